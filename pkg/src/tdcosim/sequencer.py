"""Co-simulation fabric: master sequencer, distribution endpoint, delay metering.

The transmission loop is the master clock.  At every co-simulation boundary k
it publishes the measurement of the state computed just before the boundary
instant (the packet "races" any event landing exactly on the boundary, which
is what produces the one-step propagation delay), then keeps ticking without
ever blocking on the reply.  Load updates are applied when they arrive (real
time) or exactly at boundaries (logical pacing, for determinism).  A missing
reply at the next boundary raises a closed-loop overrun and the stale policy
decides what load to carry.
"""

from __future__ import annotations

import enum
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    CosimConfig,
    DelaySample,
    LoadUpdate,
    Measurement,
    MetricError,
    OverrunEvent,
    OverrunKind,
    PacingMode,
    SimTime,
    TransportError,
    ticks_per_cosim_step,
    to_per_unit,
)
from .der import DerFleet, converge_der_pf
from .distribution import Feeder, head_power
from .messages import (
    KIND_CONTROL,
    KIND_LOAD_UPDATE,
    KIND_MEASUREMENT,
    TopicMap,
    WireFormatError,
    WireMessage,
    decode_message,
    encode_control,
    encode_load_update,
    encode_measurement,
)
from .transmission import StepHookError, TransmissionLoop
from .transport import Transport

log = logging.getLogger(__name__)


class StalePolicy(enum.Enum):
    HOLD_LAST = "hold_last"
    ZERO_LOAD = "zero_load"


@dataclass(frozen=True)
class SequencerState:
    current_step: int
    last_measurement_sent: Optional[int]
    last_load_applied: Optional[int]
    pending: str  # "awaiting_load" | "idle"
    stale_policy: StalePolicy


class ClockFollower:
    """Follower-side master-clock adoption with dedup and regression rejection.

    The distribution endpoint never advances its own clock; "now" is the last
    accepted master timestamp.  Duplicate deliveries (seq not increasing) and
    timestamp regressions are dropped and counted.
    """

    def __init__(self):
        self.last_seq = -1
        self.last_ticks = -1
        self.dropped_duplicates = 0
        self.dropped_regressions = 0

    @property
    def now(self) -> Optional[SimTime]:
        if self.last_ticks < 0:
            return None
        return SimTime(self.last_ticks)

    def sync(self, msg: WireMessage) -> Optional[SimTime]:
        """Adopt the master timestamp, or return None if the message must be dropped."""
        if msg.measurement is None:
            raise WireFormatError("clock sync requires a measurement message")
        if msg.seq <= self.last_seq:
            self.dropped_duplicates += 1
            return None
        ts = msg.measurement.timestamp
        if ts.ticks < self.last_ticks:
            self.dropped_regressions += 1
            log.warning("timestamp regression: %s < last %s; dropped", ts.ticks, self.last_ticks)
            return None
        self.last_seq = msg.seq
        self.last_ticks = ts.ticks
        return ts


def sync_timestamp(follower: ClockFollower, msg: WireMessage) -> Optional[SimTime]:
    """Spec surface for the follower clock rule; see ClockFollower.sync."""
    return follower.sync(msg)


@dataclass
class DxRecord:
    """Master-side record of one accepted load update."""

    step_index: int
    load: LoadUpdate
    per_der: Optional[dict]
    t_received: float


class FeederEndpoint:
    """Distribution + DER endpoint: answers each measurement with a load update.

    Runs its own worker thread; the transport handler only enqueues.  Connection
    events come due against the adopted master clock, applied at boundary
    processing time before the power flow.
    """

    def __init__(
        self,
        feeder: Feeder,
        fleet: DerFleet,
        config: CosimConfig,
        transport: Transport,
        topics: TopicMap,
        poi_id: str,
        feeder_id: str,
    ):
        self.feeder = feeder
        self.fleet = fleet
        self.config = config
        self.transport = transport
        self.topics = topics
        self.poi_id = poi_id
        self.feeder_id = feeder_id
        self.clock = ClockFollower()
        self.replies_sent = 0
        self._inbox: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._worker, daemon=True, name="dx-endpoint")
        self._subs = []

    def start(self) -> None:
        self._subs.append(
            self.transport.subscribe(self.topics.measurement(self.poi_id), self._on_message)
        )
        self._subs.append(self.transport.subscribe(self.topics.control, self._on_control))
        self._thread.start()

    def _on_message(self, topic: str, payload: bytes) -> None:
        self._inbox.put(payload)

    def _on_control(self, topic: str, payload: bytes) -> None:
        try:
            wire = decode_message(payload)
        except WireFormatError:
            return
        if wire.kind == KIND_CONTROL and wire.command == "stop":
            self._stop.set()
            self._inbox.put(None)  # wake the worker

    def _worker(self) -> None:
        while not self._stop.is_set():
            try:
                payload = self._inbox.get(timeout=0.1)
            except queue.Empty:
                continue
            if payload is None:
                continue
            try:
                wire = decode_message(payload)
            except WireFormatError as exc:
                log.warning("dropping malformed measurement: %s", exc)
                continue
            if wire.kind != KIND_MEASUREMENT:
                continue
            ts = self.clock.sync(wire)
            if ts is None:
                continue
            try:
                self._step(wire.measurement)
            except TransportError as exc:
                # reply lost; the master's stale policy covers the gap
                log.warning("load update for step %d not published: %s", ts.step_index, exc)

    def _step(self, m: Measurement) -> None:
        self.fleet.apply_due_events(m.timestamp)
        head_v = complex(m.v_mag_pu, 0.0)  # positive-sequence magnitude coupling
        result = converge_der_pf(self.feeder, self.fleet.units, head_v, m.freq_hz, self.config)
        p_mw, q_mvar = head_power(result.pf, self.feeder.base_mva_feeder)
        update = LoadUpdate(
            timestamp=m.timestamp,
            feeder_id=self.feeder_id,
            p_mw=p_mw,
            q_mvar=q_mvar,
            converged=result.converged,
            iterations_used=result.iterations,
        )
        payload = encode_load_update(update, seq=self.replies_sent, per_der=result.outputs.per_der)
        self.transport.publish(self.topics.load(self.feeder_id), payload)
        self.replies_sent += 1

    def stop(self, join_timeout_s: float = 5.0) -> None:
        self._stop.set()
        self._inbox.put(None)
        if self._thread.is_alive():
            self._thread.join(timeout=join_timeout_s)

    def wait_stopped(self, timeout_s: Optional[float] = None) -> bool:
        """Block until a stop command arrives (used by the process entrypoint)."""
        return self._stop.wait(timeout_s)


def run_feeder_endpoint_process(conn, spec: dict) -> None:
    """Child-process entrypoint: serve one feeder endpoint until stopped.

    Talks over the given pipe connection, or over its own MQTT session when
    the spec carries broker coordinates.
    """
    from .der import fleet_from_list  # local import keeps fork cheap
    from .distribution import feeder_from_dict
    from .transport import PipeTransport

    if spec.get("mqtt"):
        from .mqtt import MqttTransport

        transport = MqttTransport(
            spec["mqtt"]["host"], spec["mqtt"]["port"], f"cosim-dx-{spec['run_id']}"
        )
    else:
        transport = PipeTransport(conn)
    feeder = feeder_from_dict(spec["feeder"])
    fleet = DerFleet(fleet_from_list(spec["fleet"]))
    for at_ticks, ids, connected in spec.get("events", []):
        fleet.schedule(ids, connected, SimTime(at_ticks))
    config = CosimConfig(
        dt_tx=spec["dt_tx"],
        dt_cosim=spec["dt_cosim"],
        max_der_pf_iterations=spec["max_der_pf_iterations"],
        pf_tolerance=spec["pf_tolerance"],
        pacing_mode=PacingMode(spec["pacing_mode"]),
        base_mva_tx=spec["base_mva_tx"],
        base_mva_feeder=spec["base_mva_feeder"],
    )
    endpoint = FeederEndpoint(
        feeder,
        fleet,
        config,
        transport,
        TopicMap(spec["run_id"]),
        poi_id=spec["poi_id"],
        feeder_id=spec["feeder_id"],
    )
    endpoint.start()
    endpoint.wait_stopped()
    endpoint.stop()
    transport.close()


@dataclass
class SequencerResult:
    times_s: np.ndarray
    v_pcc: np.ndarray
    v_angle: np.ndarray
    freq_hz: np.ndarray
    applied_p_mw: np.ndarray
    applied_q_mvar: np.ndarray
    dx_records: list[DxRecord]
    delay_samples: list[DelaySample]
    overruns: list[OverrunEvent]
    measurements_sent: int
    n_boundaries: int
    dropped_duplicates: int
    complete: bool
    abort_reason: Optional[str] = None


class Sequencer:
    """Master-side boundary exchange driving one TransmissionLoop.

    Per boundary k: publish the Measurement sampled from the tick just before
    the boundary, keep ticking, apply the LoadUpdate when it arrives (next
    boundary at the latest in logical pacing), and meter publish-to-receipt
    delay on the monotonic clock.
    """

    def __init__(
        self,
        loop: TransmissionLoop,
        transport: Transport,
        topics: TopicMap,
        poi_id: str,
        feeder_id: str,
        feeder_bus: Optional[str] = None,
        stale_policy: StalePolicy = StalePolicy.HOLD_LAST,
        initial_load_mw: tuple[float, float] = (0.0, 0.0),
        rendezvous_timeout_s: float = 30.0,
    ):
        self.loop = loop
        self.config = loop.config
        self.transport = transport
        self.topics = topics
        self.poi_id = poi_id
        self.feeder_id = feeder_id
        self.feeder_bus = feeder_bus or poi_id
        self.stale_policy = stale_policy
        self.initial_load_mw = initial_load_mw
        self.rendezvous_timeout_s = rendezvous_timeout_s

        self.T = ticks_per_cosim_step(self.config)
        self._logical = self.config.pacing_mode is PacingMode.LOGICAL
        self._inbox: queue.Queue = queue.Queue()
        self._t_publish: dict[int, float] = {}
        self._replied: set[int] = set()
        self._pending: Optional[int] = None
        self._last_seq = -1
        self._last_ts = -1
        self._last_applied_mw = initial_load_mw
        self._last_applied_step: Optional[int] = None
        self._dropped_duplicates = 0

        self.dx_records: list[DxRecord] = []
        self.delay_samples: list[DelaySample] = []
        self.overruns: list[OverrunEvent] = []
        self.measurements_sent = 0
        self._sub = transport.subscribe(topics.load(feeder_id), self._on_load)

    @property
    def state(self) -> SequencerState:
        return SequencerState(
            current_step=self._pending if self._pending is not None else 0,
            last_measurement_sent=self._pending,
            last_load_applied=self._last_applied_step,
            pending="awaiting_load"
            if self._pending is not None and self._pending not in self._replied
            else "idle",
            stale_policy=self.stale_policy,
        )

    # -- transport side --

    def _on_load(self, topic: str, payload: bytes) -> None:
        self._inbox.put((time.monotonic(), payload))

    # -- master loop --

    def run(self, n_ticks: int) -> SequencerResult:
        n_boundaries = math.ceil(n_ticks / self.T)
        self.n_boundaries = n_boundaries
        size = n_ticks + 1
        times = np.arange(size) * self.config.dt_tx
        # NaN prefill so an aborted run's unreached tail is visibly missing
        self._series = {
            "v_pcc": np.full(size, np.nan),
            "v_angle": np.full(size, np.nan),
            "freq": np.full(size, np.nan),
            "applied_p": np.full(size, np.nan),
            "applied_q": np.full(size, np.nan),
        }
        self._capture(0, self.loop.state)
        self._prev_state = self.loop.state
        complete = True
        abort = None
        try:
            self._publish_measurement(0, self.loop.state)
            _, tx_overruns = self.loop.run(n_ticks, self._on_tick)
            self.overruns.extend(tx_overruns)
            self._finish_last_boundary()
        except (TransportError, StepHookError) as exc:
            # a hook failure only counts as a transport abort if that is its cause
            if isinstance(exc, StepHookError) and not isinstance(exc.__cause__, TransportError):
                raise
            complete = False
            abort = f"transport failure: {exc.__cause__ or exc}"
            log.error("run aborted: %s", abort)
        finally:
            try:
                self.transport.publish(self.topics.control, encode_control("stop"))
            except Exception:
                pass
        return SequencerResult(
            times_s=times,
            v_pcc=self._series["v_pcc"],
            v_angle=self._series["v_angle"],
            freq_hz=self._series["freq"],
            applied_p_mw=self._series["applied_p"],
            applied_q_mvar=self._series["applied_q"],
            dx_records=self.dx_records,
            delay_samples=self.delay_samples,
            overruns=sorted(self.overruns, key=lambda e: e.step_index),
            measurements_sent=self.measurements_sent,
            n_boundaries=n_boundaries,
            dropped_duplicates=self._dropped_duplicates,
            complete=complete,
            abort_reason=abort,
        )

    def _on_tick(self, state) -> None:
        n = state.time.step_index
        # capture first: the load recorded for tick n is the one its solve used
        self._capture(n, state)
        if n % self.T == 0:
            k = n // self.T
            if k < self.n_boundaries:
                self._boundary(k)
        elif not self._logical:
            self._drain()  # real time applies replies the moment they arrive
        self._prev_state = state

    def _boundary(self, k: int) -> None:
        if self._logical and self._pending is not None:
            self._wait_for_reply(self._pending, self.rendezvous_timeout_s)
        self._drain()
        if self._pending is not None and self._pending not in self._replied:
            budget = self.config.dt_cosim
            elapsed = time.monotonic() - self._t_publish[self._pending]
            self.overruns.append(
                OverrunEvent(
                    OverrunKind.COSIM_LOOP,
                    self._pending,
                    measured_s=max(elapsed, budget + 1e-9),  # lower bound: still unanswered
                    budget_s=budget,
                )
            )
            if self.stale_policy is StalePolicy.ZERO_LOAD:
                self.loop.queue_spot_load(self.feeder_bus, 0.0, 0.0)
                self._last_applied_mw = (0.0, 0.0)
        self._publish_measurement(k, self._prev_state)

    def _publish_measurement(self, k: int, state) -> None:
        v = state.bus_voltages[self.feeder_bus]
        m = Measurement(
            timestamp=SimTime(k * self.config.dt_cosim_ticks, k),
            poi_id=self.poi_id,
            v_mag_pu=abs(v),
            v_angle_rad=math.atan2(v.imag, v.real),
            freq_hz=state.freq_hz,
        )
        payload = encode_measurement(m, seq=k)
        self._t_publish[k] = time.monotonic()
        self.transport.publish(self.topics.measurement(self.poi_id), payload)
        self._pending = k
        self.measurements_sent += 1

    def _wait_for_reply(self, k: int, timeout_s: float) -> None:
        deadline = time.monotonic() + timeout_s
        while k not in self._replied:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return
            try:
                item = self._inbox.get(timeout=min(remaining, 0.05))
            except queue.Empty:
                continue
            self._process(item)

    def _drain(self) -> None:
        while True:
            try:
                item = self._inbox.get_nowait()
            except queue.Empty:
                return
            self._process(item)

    def _process(self, item) -> None:
        t_recv, payload = item
        try:
            wire = decode_message(payload)
        except WireFormatError as exc:
            log.warning("dropping malformed load update: %s", exc)
            return
        if wire.kind != KIND_LOAD_UPDATE or wire.load_update is None:
            return
        if wire.seq <= self._last_seq:
            self._dropped_duplicates += 1
            return
        lu = wire.load_update
        if lu.timestamp.ticks < self._last_ts:
            self._dropped_duplicates += 1
            log.warning("load update timestamp regression dropped (step %d)", lu.timestamp.step_index)
            return
        self._last_seq = wire.seq
        self._last_ts = lu.timestamp.ticks
        k = lu.timestamp.step_index
        self._replied.add(k)
        self.dx_records.append(DxRecord(k, lu, dict(wire.per_der) if wire.per_der else None, t_recv))
        if k in self._t_publish:
            self.delay_samples.append(DelaySample(k, self._t_publish[k], max(t_recv, self._t_publish[k])))
        if not lu.converged:
            cap = self.config.max_der_pf_iterations
            self.overruns.append(
                OverrunEvent(OverrunKind.DER_PF_ITERATION_CAP, k, measured_s=cap + 1, budget_s=cap)
            )
        p_pu = to_per_unit(lu.p_mw, self.config.base_mva_tx)
        q_pu = to_per_unit(lu.q_mvar, self.config.base_mva_tx)
        self.loop.queue_spot_load(self.feeder_bus, p_pu, q_pu)
        self._last_applied_mw = (lu.p_mw, lu.q_mvar)
        self._last_applied_step = k

    def _finish_last_boundary(self) -> None:
        """Collect the reply to the final measurement so the report has no tail gap."""
        if self._pending is None or self._pending in self._replied:
            return
        timeout = self.rendezvous_timeout_s if self._logical else min(1.5 * self.config.dt_cosim, 3.0)
        self._wait_for_reply(self._pending, timeout)
        if self._pending not in self._replied:
            budget = self.config.dt_cosim
            elapsed = time.monotonic() - self._t_publish[self._pending]
            self.overruns.append(
                OverrunEvent(
                    OverrunKind.COSIM_LOOP,
                    self._pending,
                    measured_s=max(elapsed, budget + 1e-9),
                    budget_s=budget,
                )
            )

    def _capture(self, n: int, state) -> None:
        v = state.bus_voltages[self.feeder_bus]
        self._series["v_pcc"][n] = abs(v)
        self._series["v_angle"][n] = math.atan2(v.imag, v.real)
        self._series["freq"][n] = state.freq_hz
        self._series["applied_p"][n] = self._last_applied_mw[0]
        self._series["applied_q"][n] = self._last_applied_mw[1]


@dataclass(frozen=True)
class DelayStats:
    count: int
    mean_s: float
    max_s: float
    p50_s: float
    p95_s: float
    p99_s: float
    bin_width_s: float
    bin_edges_s: tuple[float, ...]
    counts: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_s": self.mean_s,
            "max_s": self.max_s,
            "p50_s": self.p50_s,
            "p95_s": self.p95_s,
            "p99_s": self.p99_s,
            "bin_width_s": self.bin_width_s,
            "bin_edges_s": list(self.bin_edges_s),
            "counts": list(self.counts),
        }


def delay_stats(samples: Sequence[DelaySample], bin_width_s: float = 0.010) -> DelayStats:
    """Summary statistics plus a fixed-width histogram of closed-loop delays."""
    if not samples:
        raise MetricError("no delay samples to summarize")
    delays = np.array([s.delay_s for s in samples])
    n_bins = max(1, int(math.ceil(float(delays.max()) / bin_width_s + 1e-12)))
    edges = np.arange(n_bins + 1) * bin_width_s
    counts, _ = np.histogram(delays, bins=edges)
    return DelayStats(
        count=len(delays),
        mean_s=float(delays.mean()),
        max_s=float(delays.max()),
        p50_s=float(np.percentile(delays, 50)),
        p95_s=float(np.percentile(delays, 95)),
        p99_s=float(np.percentile(delays, 99)),
        bin_width_s=bin_width_s,
        bin_edges_s=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
    )
