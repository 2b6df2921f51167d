"""Quasi-static phasor transmission simulator.

A programmable ideal voltage source feeds a small pi-line network with
constant-power spot loads; the network is re-solved every ``dt_tx`` by
fixed-point iteration on load currents.  This is the desk-scale stand-in for
a TS-type real-time simulator: no machine dynamics, frequency is a
programmed signal rather than swing output.
"""

from __future__ import annotations

import enum
import json
import math
import queue
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Mapping, Optional

import numpy as np

from .core import (
    ConfigurationError,
    CosimConfig,
    OverrunEvent,
    OverrunKind,
    PacingMode,
    SimTime,
    SolverDivergenceError,
    seconds_to_ticks,
)

SOLVE_TOL = 1e-10
SOLVE_MAX_ITER = 100


class StepHookError(RuntimeError):
    """A step hook raised; the transmission run was aborted."""


class ProgramKind(enum.Enum):
    CONSTANT = "constant"
    STEP = "step"
    SINE = "sine"
    RAMP = "ramp"


@dataclass(frozen=True)
class SignalProgram:
    """Piecewise reference signal: constant, single step, sinusoid, or ramp.

    The step boundary is closed on the right: the value changes at
    ``t == step_time_s`` exactly (tick comparison, no float drift).  A ramp
    moves from ``base`` by ``step_delta`` starting at ``step_time_s`` over
    ``ramp_duration_s``, holding the final value afterwards.
    """

    kind: ProgramKind = ProgramKind.CONSTANT
    base: float = 1.0
    step_delta: float = 0.0
    step_time_s: float = 0.0
    amplitude: float = 0.0
    freq_hz: float = 0.0
    phase_rad: float = 0.0
    ramp_duration_s: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ConfigurationError("sine amplitude must be >= 0")
        if self.step_time_s < 0:
            raise ConfigurationError("step time must be >= 0")
        if self.kind is ProgramKind.RAMP and self.ramp_duration_s <= 0:
            raise ConfigurationError("ramp duration must be > 0")

    def value_at(self, t: SimTime) -> float:
        if self.kind is ProgramKind.CONSTANT:
            return self.base
        if self.kind is ProgramKind.STEP:
            if t.ticks >= seconds_to_ticks(self.step_time_s):
                return self.base + self.step_delta
            return self.base
        if self.kind is ProgramKind.RAMP:
            lead = t.ticks - seconds_to_ticks(self.step_time_s)
            if lead < 0:
                return self.base
            frac = min(1.0, lead / seconds_to_ticks(self.ramp_duration_s))
            return self.base + self.step_delta * frac
        # sine
        return self.base + self.amplitude * math.sin(
            2.0 * math.pi * self.freq_hz * t.seconds + self.phase_rad
        )


@dataclass(frozen=True)
class ReferenceProgram:
    """Voltage-magnitude program for the source bus plus a frequency program."""

    voltage: SignalProgram = SignalProgram(base=1.0)
    frequency: SignalProgram = SignalProgram(base=60.0)


def evaluate_reference(program: ReferenceProgram, t: SimTime) -> tuple[float, float]:
    """Source voltage reference (p.u.) and system frequency (Hz) at time t."""
    return program.voltage.value_at(t), program.frequency.value_at(t)


@dataclass(frozen=True)
class Bus:
    id: str
    kv: float = 138.0


@dataclass(frozen=True)
class PiLine:
    from_bus: str
    to_bus: str
    r_pu: float
    x_pu: float
    b_shunt_pu: float = 0.0  # total line charging, split half per end

    def __post_init__(self):
        if self.r_pu == 0 and self.x_pu == 0:
            raise ConfigurationError(f"degenerate line {self.from_bus}-{self.to_bus}")
        if self.b_shunt_pu < 0:
            raise ConfigurationError("shunt susceptance must be >= 0")

    @property
    def z_series(self) -> complex:
        return complex(self.r_pu, self.x_pu)


@dataclass(frozen=True)
class TxNetwork:
    """Small transmission network: one ideal source, pi-lines, spot loads (p.u.)."""

    buses: tuple[Bus, ...]
    lines: tuple[PiLine, ...]
    source_bus: str
    reference: ReferenceProgram = ReferenceProgram()
    spot_loads: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate bus ids")
        if self.source_bus not in ids:
            raise ConfigurationError(f"unknown source bus {self.source_bus!r}")
        known = set(ids)
        for ln in self.lines:
            if ln.from_bus not in known or ln.to_bus not in known:
                raise ConfigurationError(f"line references unknown bus: {ln}")
        for bus in self.spot_loads:
            if bus not in known:
                raise ConfigurationError(f"spot load at unknown bus {bus!r}")
        # connectivity check from the source
        adj: dict[str, list[str]] = {i: [] for i in ids}
        for ln in self.lines:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        seen = {self.source_bus}
        stack = [self.source_bus]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if seen != known:
            raise ConfigurationError(f"network not connected: unreachable {known - seen}")


@dataclass(frozen=True)
class TxState:
    time: SimTime
    bus_voltages: Mapping[str, complex]
    source_v_ref: float
    freq_hz: float


def apply_spot_load(network: TxNetwork, bus: str, p_pu: float, q_pu: float) -> TxNetwork:
    """Replace the constant-power spot load at ``bus``; effective at the next solve."""
    if bus not in {b.id for b in network.buses}:
        raise ConfigurationError(f"unknown bus {bus!r}")
    loads = dict(network.spot_loads)
    loads[bus] = (p_pu, q_pu)
    return replace(network, spot_loads=loads)


@lru_cache(maxsize=64)
def _nodal_model(buses: tuple[Bus, ...], lines: tuple[PiLine, ...], source_bus: str):
    """Bus index, partitioned admittance, and prefactored Y_rr for a network shape."""
    ids = [b.id for b in buses]
    idx = {bus_id: i for i, bus_id in enumerate(ids)}
    n = len(ids)
    y = np.zeros((n, n), dtype=complex)
    for ln in lines:
        f, t = idx[ln.from_bus], idx[ln.to_bus]
        ys = 1.0 / ln.z_series
        y[f, f] += ys + 0.5j * ln.b_shunt_pu
        y[t, t] += ys + 0.5j * ln.b_shunt_pu
        y[f, t] -= ys
        y[t, f] -= ys
    s = idx[source_bus]
    rest = [i for i in range(n) if i != s]
    y_rr = y[np.ix_(rest, rest)]
    y_rs = y[rest, s]
    y_rr_inv = np.linalg.inv(y_rr) if rest else None
    return idx, rest, y, y_rr_inv, y_rs


def solve_tx(network: TxNetwork, state_prev: Optional[TxState], t: SimTime) -> TxState:
    """Solve the nodal equations at time t with the source held at its reference.

    Fixed-point iteration on constant-power load currents to 1e-10 p.u.;
    raises SolverDivergenceError when the load exceeds maximum power transfer.
    """
    v_ref, freq_hz = evaluate_reference(network.reference, t)
    idx, rest, y, y_rr_inv, y_rs = _nodal_model(network.buses, network.lines, network.source_bus)
    ids = [b.id for b in network.buses]
    v_src = complex(v_ref, 0.0)

    if not rest:
        return TxState(t, {network.source_bus: v_src}, v_ref, freq_hz)

    s_load = np.zeros(len(rest), dtype=complex)
    for k, i in enumerate(rest):
        p, q = network.spot_loads.get(ids[i], (0.0, 0.0))
        s_load[k] = complex(p, q)

    if state_prev is not None:
        v = np.array([state_prev.bus_voltages[ids[i]] for i in rest], dtype=complex)
        v[np.abs(v) < 0.1] = v_src  # don't warm-start from a collapsed guess
    else:
        v = np.full(len(rest), v_src, dtype=complex)

    for _ in range(SOLVE_MAX_ITER):
        i_inj = np.conj(-s_load / v)
        v_new = y_rr_inv @ (i_inj - y_rs * v_src)
        if np.any(np.abs(v_new) < 1e-6) or not np.all(np.isfinite(v_new)):
            worst = int(np.argmin(np.abs(v_new)))
            raise SolverDivergenceError(
                f"voltage collapse at bus {ids[rest[worst]]!r} (t={t.seconds} s)",
                bus=ids[rest[worst]],
                mismatch=float("inf"),
            )
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < SOLVE_TOL:
            break
    else:
        mismatch = _power_mismatch(y, idx, ids, network, v, v_src, rest)
        worst = int(np.argmax(mismatch))
        raise SolverDivergenceError(
            f"no solution at bus {ids[rest[worst]]!r}: mismatch {mismatch[worst]:.3e} p.u. "
            f"(load beyond maximum power transfer?)",
            bus=ids[rest[worst]],
            mismatch=float(mismatch[worst]),
        )

    voltages = {network.source_bus: v_src}
    for k, i in enumerate(rest):
        voltages[ids[i]] = complex(v[k])
    return TxState(t, voltages, v_ref, freq_hz)


def _power_mismatch(y, idx, ids, network, v_rest, v_src, rest):
    n = len(ids)
    v_full = np.zeros(n, dtype=complex)
    v_full[idx[network.source_bus]] = v_src
    for k, i in enumerate(rest):
        v_full[i] = v_rest[k]
    s_inj = v_full * np.conj(y @ v_full)
    out = np.zeros(len(rest))
    for k, i in enumerate(rest):
        p, q = network.spot_loads.get(ids[i], (0.0, 0.0))
        out[k] = abs(s_inj[i] + complex(p, q))
    return out


def source_injection(network: TxNetwork, state: TxState) -> complex:
    """Complex power injected by the ideal source (p.u.)."""
    idx, _, y, _, _ = _nodal_model(network.buses, network.lines, network.source_bus)
    ids = [b.id for b in network.buses]
    v = np.array([state.bus_voltages[i] for i in ids], dtype=complex)
    s_inj = v * np.conj(y @ v)
    return complex(s_inj[idx[network.source_bus]])


def line_losses(network: TxNetwork, state: TxState) -> complex:
    """Total complex power absorbed by series impedances and shunts (p.u.)."""
    total = 0.0 + 0.0j
    for ln in network.lines:
        vf = state.bus_voltages[ln.from_bus]
        vt = state.bus_voltages[ln.to_bus]
        i_series = (vf - vt) / ln.z_series
        total += abs(i_series) ** 2 * ln.z_series
        # each half-shunt absorbs conj(j b/2) |V|^2 = -j b/2 |V|^2 (generates vars)
        total += (abs(vf) ** 2 + abs(vt) ** 2) * np.conj(0.5j * ln.b_shunt_pu)
    return complex(total)


class TransmissionLoop:
    """Owns the tick-by-tick advance of one TxNetwork.

    Spot-load changes from other threads go through ``queue_spot_load`` and
    are drained at the top of each step; nothing else mutates shared state.
    """

    def __init__(self, network: TxNetwork, config: CosimConfig):
        self.config = config
        self.network = network
        self._pending: queue.SimpleQueue = queue.SimpleQueue()
        self.state = solve_tx(network, None, SimTime(0, 0))

    def queue_spot_load(self, bus: str, p_pu: float, q_pu: float) -> None:
        self._pending.put((bus, p_pu, q_pu))

    def _drain_loads(self) -> None:
        while True:
            try:
                bus, p, q = self._pending.get_nowait()
            except queue.Empty:
                return
            self.network = apply_spot_load(self.network, bus, p, q)

    def run(
        self,
        ticks: int,
        step_hook: Optional[Callable[[TxState], None]] = None,
    ) -> tuple[list[TxState], list[OverrunEvent]]:
        """Advance ``ticks`` steps of dt_tx, invoking step_hook after each solve.

        RealTime pacing releases each step on the monotonic clock and records a
        TX_STEP overrun whenever a step's compute (solve + hook) exceeds dt_tx.
        Logical pacing runs flat out with zero overruns by definition.
        """
        dt_ticks = self.config.dt_tx_ticks
        dt_s = self.config.dt_tx
        realtime = self.config.pacing_mode is PacingMode.REAL_TIME
        states = [self.state]
        overruns: list[OverrunEvent] = []
        start = time.monotonic()
        for n in range(1, ticks + 1):
            if realtime:
                release = start + (n - 1) * dt_s
                now = time.monotonic()
                if now < release:
                    time.sleep(release - now)
            t0 = time.monotonic()
            self._drain_loads()
            t = SimTime(n * dt_ticks, n)
            self.state = solve_tx(self.network, self.state, t)
            if step_hook is not None:
                try:
                    step_hook(self.state)
                except Exception as exc:
                    raise StepHookError(f"step hook failed at tick {n} (t={t.seconds} s)") from exc
            states.append(self.state)
            elapsed = time.monotonic() - t0
            if realtime and elapsed > dt_s:
                overruns.append(
                    OverrunEvent(OverrunKind.TX_STEP, n, measured_s=elapsed, budget_s=dt_s)
                )
        return states, overruns


def run_tx_loop(
    network: TxNetwork,
    config: CosimConfig,
    ticks: int,
    step_hook: Optional[Callable[[TxState], None]] = None,
) -> tuple[list[TxState], list[OverrunEvent]]:
    """Convenience wrapper: run a fresh TransmissionLoop for ``ticks`` steps."""
    return TransmissionLoop(network, config).run(ticks, step_hook)


# --- JSON schema (documented in docs/file-formats.md) ---

def _program_to_dict(p: SignalProgram) -> dict:
    return {
        "kind": p.kind.value,
        "base": p.base,
        "step_delta": p.step_delta,
        "step_time_s": p.step_time_s,
        "amplitude": p.amplitude,
        "freq_hz": p.freq_hz,
        "phase_rad": p.phase_rad,
        "ramp_duration_s": p.ramp_duration_s,
    }


def _program_from_dict(d: dict) -> SignalProgram:
    return SignalProgram(
        kind=ProgramKind(d.get("kind", "constant")),
        base=float(d.get("base", 1.0)),
        step_delta=float(d.get("step_delta", 0.0)),
        step_time_s=float(d.get("step_time_s", 0.0)),
        amplitude=float(d.get("amplitude", 0.0)),
        freq_hz=float(d.get("freq_hz", 0.0)),
        phase_rad=float(d.get("phase_rad", 0.0)),
        ramp_duration_s=float(d.get("ramp_duration_s", 0.0)),
    )


def network_to_dict(network: TxNetwork, base_mva: float) -> dict:
    return {
        "schema_version": 1,
        "base_mva": base_mva,
        "buses": [{"id": b.id, "kv": b.kv} for b in network.buses],
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "r_pu": ln.r_pu,
                "x_pu": ln.x_pu,
                "b_shunt_pu": ln.b_shunt_pu,
            }
            for ln in network.lines
        ],
        "source_bus": network.source_bus,
        "reference": {
            "voltage": _program_to_dict(network.reference.voltage),
            "frequency": _program_to_dict(network.reference.frequency),
        },
        "spot_loads": {bus: list(pq) for bus, pq in network.spot_loads.items()},
    }


def network_from_dict(d: dict) -> TxNetwork:
    try:
        buses = tuple(Bus(b["id"], float(b.get("kv", 138.0))) for b in d["buses"])
        lines = tuple(
            PiLine(
                from_bus=ln["from"],
                to_bus=ln["to"],
                r_pu=float(ln["r_pu"]),
                x_pu=float(ln["x_pu"]),
                b_shunt_pu=float(ln.get("b_shunt_pu", 0.0)),
            )
            for ln in d["lines"]
        )
        ref = d.get("reference", {})
        reference = ReferenceProgram(
            voltage=_program_from_dict(ref.get("voltage", {})),
            frequency=_program_from_dict(ref.get("frequency", {"base": 60.0})),
        )
        spot_loads = {bus: (float(pq[0]), float(pq[1])) for bus, pq in d.get("spot_loads", {}).items()}
        return TxNetwork(
            buses=buses,
            lines=lines,
            source_bus=d["source_bus"],
            reference=reference,
            spot_loads=spot_loads,
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigurationError(f"malformed transmission network definition: {exc}") from exc


def load_network(path: str) -> tuple[TxNetwork, float]:
    """Load a network JSON file; returns (network, base_mva from the header)."""
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    return network_from_dict(d), float(d.get("base_mva", 100.0))
