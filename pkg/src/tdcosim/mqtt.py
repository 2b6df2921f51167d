"""Minimal MQTT 3.1.1 client transport (QoS 0/1, clean session, auto-reconnect).

Implements just the subset of OASIS MQTT 3.1.1 this testbed needs: CONNECT /
CONNACK, SUBSCRIBE / SUBACK, PUBLISH / PUBACK, PINGREQ / PINGRESP and
DISCONNECT, against any conformant broker.  QoS 1 publishes are tracked
in-flight and retransmitted with the DUP flag after a reconnect, giving
at-least-once delivery; the receiving side deduplicates by application-level
sequence numbers, so redelivery is harmless.

The packet codec is kept as standalone functions so it can be tested against
hand-assembled byte vectors.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from typing import Callable, Optional

from .core import TransportError
from .transport import Subscription, _dispatch

log = logging.getLogger(__name__)

# packet types (high nibble of the fixed-header byte)
CONNECT = 0x10
CONNACK = 0x20
PUBLISH = 0x30
PUBACK = 0x40
SUBSCRIBE = 0x82  # type 8 with mandatory reserved bits 0010
SUBACK = 0x90
PINGREQ = 0xC0
PINGRESP = 0xD0
DISCONNECT = 0xE0

CONNACK_CODES = {
    0: "accepted",
    1: "unacceptable protocol version",
    2: "identifier rejected",
    3: "server unavailable",
    4: "bad user name or password",
    5: "not authorized",
}


def encode_string(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("string too long for MQTT")
    return struct.pack(">H", len(data)) + data


def encode_remaining_length(n: int) -> bytes:
    if n < 0 or n > 268_435_455:
        raise ValueError(f"remaining length out of range: {n}")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        out.append(digit | (0x80 if n > 0 else 0))
        if n == 0:
            return bytes(out)


def decode_remaining_length(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Returns (value, bytes consumed); raises on malformed varint."""
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise ValueError("truncated remaining-length field")
        byte = data[offset + i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            return value, i + 1
    raise ValueError("remaining-length field exceeds 4 bytes")


def encode_connect(client_id: str, keepalive_s: int, clean_session: bool = True) -> bytes:
    flags = 0x02 if clean_session else 0x00
    var = encode_string("MQTT") + bytes([0x04, flags]) + struct.pack(">H", keepalive_s)
    payload = encode_string(client_id)
    body = var + payload
    return bytes([CONNECT]) + encode_remaining_length(len(body)) + body


def encode_publish(
    topic: str, payload: bytes, pid: Optional[int] = None, qos: int = 0, dup: bool = False
) -> bytes:
    if qos not in (0, 1):
        raise ValueError("only QoS 0 and 1 are supported")
    header = 0x30 | (0x08 if dup else 0) | (qos << 1)
    body = encode_string(topic)
    if qos > 0:
        if pid is None:
            raise ValueError("QoS 1 publish needs a packet id")
        body += struct.pack(">H", pid)
    body += payload
    return bytes([header]) + encode_remaining_length(len(body)) + body


def decode_publish(flags: int, body: bytes) -> tuple[str, bytes, int, Optional[int]]:
    """Returns (topic, payload, qos, pid)."""
    qos = (flags >> 1) & 0x03
    (tlen,) = struct.unpack_from(">H", body, 0)
    topic = body[2 : 2 + tlen].decode("utf-8")
    pos = 2 + tlen
    pid = None
    if qos > 0:
        (pid,) = struct.unpack_from(">H", body, pos)
        pos += 2
    return topic, body[pos:], qos, pid


def encode_puback(pid: int) -> bytes:
    return bytes([PUBACK, 0x02]) + struct.pack(">H", pid)


def encode_subscribe(pid: int, topic: str, qos: int = 1) -> bytes:
    body = struct.pack(">H", pid) + encode_string(topic) + bytes([qos])
    return bytes([SUBSCRIBE]) + encode_remaining_length(len(body)) + body


def encode_pingreq() -> bytes:
    return bytes([PINGREQ, 0x00])


def encode_disconnect() -> bytes:
    return bytes([DISCONNECT, 0x00])


def read_packet(sock: socket.socket) -> tuple[int, bytes]:
    """Read one full control packet; returns (fixed-header byte, body)."""
    head = _read_exact(sock, 1)
    length = 0
    shift = 0
    while True:
        byte = _read_exact(sock, 1)[0]
        length |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
        if shift > 21:
            raise TransportError("malformed remaining length from broker")
    body = _read_exact(sock, length) if length else b""
    return head[0], body


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed by broker")
        buf.extend(chunk)
    return bytes(buf)


class MqttTransport:
    """MQTT 3.1.1 client with the common Transport interface.

    Reconnects with resubscribe and DUP retransmission of unacknowledged
    QoS 1 publishes whenever the session drops; gives up after
    ``max_reconnect_attempts`` consecutive failures.
    """

    def __init__(
        self,
        host: str,
        port: int,
        client_id: str,
        keepalive_s: int = 30,
        qos: int = 1,
        connect_timeout_s: float = 5.0,
        max_reconnect_attempts: int = 10,
        reconnect_delay_s: float = 0.5,
    ):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.keepalive_s = keepalive_s
        self.qos = qos
        self.connect_timeout_s = connect_timeout_s
        self.max_reconnect_attempts = max_reconnect_attempts
        self.reconnect_delay_s = reconnect_delay_s

        self._sock: Optional[socket.socket] = None
        self._send_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._subs: dict[str, list[Subscription]] = {}
        self._inflight: dict[int, bytes] = {}  # pid -> original PUBLISH packet
        self._suback: dict[int, threading.Event] = {}
        self._next_pid = 1
        self._connack = threading.Event()
        self.closed = False
        self._reader: Optional[threading.Thread] = None
        self._pinger: Optional[threading.Thread] = None
        self._connect_socket()
        self._pinger = threading.Thread(target=self._ping_loop, daemon=True, name="mqtt-ping")
        self._pinger.start()

    # -- connection management --

    def _connect_socket(self) -> None:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.connect_timeout_s)
        except OSError as exc:
            raise TransportError(f"cannot reach broker {self.host}:{self.port}: {exc}") from exc
        sock.settimeout(max(self.keepalive_s * 1.5, 5.0))
        self._sock = sock
        self._connack.clear()
        self._send_raw(encode_connect(self.client_id, self.keepalive_s, clean_session=True))
        head, body = read_packet(sock)
        if head & 0xF0 != CONNACK or len(body) < 2:
            raise TransportError("broker did not answer CONNECT with CONNACK")
        if body[1] != 0:
            raise TransportError(
                f"broker refused connection: {CONNACK_CODES.get(body[1], body[1])}"
            )
        self._connack.set()
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="mqtt-read")
        self._reader.start()

    def _reconnect(self) -> None:
        for attempt in range(1, self.max_reconnect_attempts + 1):
            if self.closed:
                return
            time.sleep(self.reconnect_delay_s)
            try:
                self._connect_socket()
            except TransportError as exc:
                log.warning("reconnect attempt %d failed: %s", attempt, exc)
                continue
            with self._state_lock:
                topics = list(self._subs)
                inflight = list(self._inflight.items())
            for topic in topics:
                self._send_subscribe(topic)
            for pid, packet in inflight:
                # resend with DUP set (byte 0 bit 3)
                self._send_raw(bytes([packet[0] | 0x08]) + packet[1:])
            log.info("reconnected to %s:%d and resubscribed %d topics", self.host, self.port, len(topics))
            return
        self.closed = True
        log.error("giving up on broker %s:%d after %d attempts", self.host, self.port, self.max_reconnect_attempts)

    def _send_raw(self, packet: bytes) -> None:
        with self._send_lock:
            if self._sock is None:
                raise TransportError("not connected")
            self._sock.sendall(packet)

    def _alloc_pid(self) -> int:
        with self._state_lock:
            pid = self._next_pid
            self._next_pid = pid % 0xFFFF + 1
            return pid

    # -- Transport interface --

    def publish(self, topic: str, payload: bytes) -> None:
        if self.closed:
            raise TransportError("transport closed")
        if self.qos == 0:
            packet = encode_publish(topic, payload, qos=0)
        else:
            pid = self._alloc_pid()
            packet = encode_publish(topic, payload, pid=pid, qos=1)
            with self._state_lock:
                self._inflight[pid] = packet
        try:
            self._send_raw(packet)
        except (TransportError, OSError) as exc:
            log.warning("publish failed (%s); reconnecting", exc)
            self._reconnect()
            if self.closed:
                raise TransportError("publish failed and reconnect exhausted") from exc

    def subscribe(self, topic: str, handler: Callable[[str, bytes], None]) -> Subscription:
        sub = Subscription(topic, handler, self._remove_sub)
        with self._state_lock:
            known = topic in self._subs
            self._subs.setdefault(topic, []).append(sub)
        if not known:
            self._send_subscribe(topic)
        return sub

    def _send_subscribe(self, topic: str) -> None:
        pid = self._alloc_pid()
        done = threading.Event()
        self._suback[pid] = done
        self._send_raw(encode_subscribe(pid, topic, qos=self.qos))
        if not done.wait(self.connect_timeout_s):
            raise TransportError(f"no SUBACK for {topic!r}")
        self._suback.pop(pid, None)

    def _remove_sub(self, sub: Subscription) -> None:
        with self._state_lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self._send_raw(encode_disconnect())
        except (TransportError, OSError):
            pass
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass

    # -- background loops --

    def _read_loop(self) -> None:
        sock = self._sock
        while not self.closed:
            try:
                head, body = read_packet(sock)
            except (TransportError, OSError):
                if not self.closed:
                    log.warning("broker session dropped; reconnecting")
                    self._reconnect()
                return
            ptype = head & 0xF0
            if ptype == PUBLISH:
                topic, payload, qos, pid = decode_publish(head & 0x0F, body)
                with self._state_lock:
                    subs = list(self._subs.get(topic, ()))
                for sub in subs:
                    _dispatch(sub, topic, payload)
                if qos == 1 and pid is not None:
                    try:
                        self._send_raw(encode_puback(pid))
                    except (TransportError, OSError):
                        pass
            elif ptype == PUBACK and len(body) >= 2:
                (pid,) = struct.unpack_from(">H", body, 0)
                with self._state_lock:
                    self._inflight.pop(pid, None)
            elif ptype == SUBACK and len(body) >= 3:
                (pid,) = struct.unpack_from(">H", body, 0)
                if body[2] == 0x80:
                    log.error("broker rejected subscription (pid %d)", pid)
                event = self._suback.get(pid)
                if event is not None:
                    event.set()
            elif ptype == PINGRESP:
                pass
            else:
                log.debug("ignoring packet type 0x%02x", ptype)

    def _ping_loop(self) -> None:
        interval = max(self.keepalive_s / 2.0, 1.0)
        while not self.closed:
            time.sleep(interval)
            if self.closed:
                return
            try:
                self._send_raw(encode_pingreq())
            except (TransportError, OSError):
                pass  # the read loop owns reconnection
