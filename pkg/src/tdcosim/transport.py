"""Message transports: in-process loopback, duplex pipe, and fault injectors.

All transports share one contract: ``publish`` enqueues a payload for
delivery and ``subscribe`` registers a handler that is invoked once per
delivered message in per-topic publish order, on a transport-owned context.
Handler failures are logged and isolated; they never poison the transport.
The MQTT transport lives in :mod:`tdcosim.mqtt`.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from multiprocessing.connection import Connection
from typing import Callable, Protocol

log = logging.getLogger(__name__)

Handler = Callable[[str, bytes], None]


class Transport(Protocol):
    def publish(self, topic: str, payload: bytes) -> None: ...

    def subscribe(self, topic: str, handler: Handler) -> "Subscription": ...

    def close(self) -> None: ...


@dataclass
class Subscription:
    topic: str
    handler: Handler
    _cancel: Callable[["Subscription"], None]

    def unsubscribe(self) -> None:
        self._cancel(self)


def _dispatch(sub: Subscription, topic: str, payload: bytes) -> None:
    try:
        sub.handler(topic, payload)
    except Exception:
        log.exception("subscriber for %s failed; message dropped", topic)


class LoopbackTransport:
    """Deterministic in-process bus: publish delivers synchronously, in order.

    Delivery happens on the publisher's thread, which satisfies the ordering
    contract trivially and keeps Logical-mode runs reproducible.
    """

    def __init__(self):
        self._subs: dict[str, list[Subscription]] = {}
        self._lock = threading.Lock()
        self.closed = False

    def publish(self, topic: str, payload: bytes) -> None:
        if self.closed:
            raise RuntimeError("transport closed")
        with self._lock:
            subs = list(self._subs.get(topic, ()))
        for sub in subs:
            _dispatch(sub, topic, payload)

    def subscribe(self, topic: str, handler: Handler) -> Subscription:
        sub = Subscription(topic, handler, self._remove)
        with self._lock:
            self._subs.setdefault(topic, []).append(sub)
        return sub

    def _remove(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)

    def close(self) -> None:
        self.closed = True


class DuplicateInjector:
    """Wraps a transport and delivers every publish twice (QoS-1 torture).

    Sequence-number dedup downstream must make the duplicate invisible.
    """

    def __init__(self, inner: Transport, copies: int = 2):
        self.inner = inner
        self.copies = copies

    def publish(self, topic: str, payload: bytes) -> None:
        for _ in range(self.copies):
            self.inner.publish(topic, payload)

    def subscribe(self, topic: str, handler: Handler) -> Subscription:
        return self.inner.subscribe(topic, handler)

    def close(self) -> None:
        self.inner.close()


class PipeTransport:
    """One end of a duplex link over a multiprocessing Connection.

    Publishes are sent to the peer; a reader thread dispatches incoming
    (topic, payload) frames to local subscribers.  Used for running the
    distribution endpoint in a separate process without a broker.
    """

    _STOP = ("__pipe_stop__", b"")

    def __init__(self, conn: Connection):
        self._conn = conn
        self._subs: dict[str, list[Subscription]] = {}
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self.closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="pipe-reader")
        self._reader.start()

    @classmethod
    def pair(cls) -> tuple["PipeTransport", "PipeTransport"]:
        import multiprocessing

        a, b = multiprocessing.Pipe()
        return cls(a), cls(b)

    def publish(self, topic: str, payload: bytes) -> None:
        if self.closed:
            raise RuntimeError("transport closed")
        with self._send_lock:
            self._conn.send((topic, payload))

    def subscribe(self, topic: str, handler: Handler) -> Subscription:
        sub = Subscription(topic, handler, self._remove)
        with self._lock:
            self._subs.setdefault(topic, []).append(sub)
        return sub

    def _remove(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)

    def _read_loop(self) -> None:
        while True:
            try:
                topic, payload = self._conn.recv()
            except (EOFError, OSError, ValueError, TypeError):
                return  # peer gone or connection torn down mid-recv
            if (topic, payload) == self._STOP:
                if not self.closed:
                    # echo so the closing side's own reader wakes up too
                    try:
                        with self._send_lock:
                            self._conn.send(self._STOP)
                    except (OSError, BrokenPipeError):
                        pass
                return
            with self._lock:
                subs = list(self._subs.get(topic, ()))
            for sub in subs:
                _dispatch(sub, topic, payload)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            with self._send_lock:
                self._conn.send(self._STOP)
        except (OSError, BrokenPipeError):
            pass
        self._reader.join(timeout=1.0)
        try:
            self._conn.close()
        except OSError:
            pass
