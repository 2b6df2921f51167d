"""Stand-alone DER simulator: grid-support functions and the DER/power-flow loop.

Each unit computes its P/Q injection (per unit of its own MVA rating) from
the grid conditions at its feeder node: frequency-watt curtails active power
above a deadband, volt-var contributes reactive power along a piecewise
linear curve, and the result is clipped to the capability circle with
active-power priority.  ``converge_der_pf`` alternates the feeder power flow
with the DER update until the exchanged injections settle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .core import ConfigurationError, CosimConfig, SimTime
from .distribution import Feeder, PfSolution, backward_forward_sweep

# IEEE 1547-2018 Category B / default interoperability settings
DEFAULT_VOLT_VAR = None  # assigned below, after the class exists
DEFAULT_FREQ_WATT = None


@dataclass(frozen=True)
class VoltVarCurve:
    """Piecewise-linear volt-var droop: q1 at low voltage, deadband, q4 at high."""

    v1: float = 0.92
    v2: float = 0.98
    v3: float = 1.02
    v4: float = 1.08
    q1: float = 0.44
    q4: float = -0.44

    def __post_init__(self):
        if not (self.v1 < self.v2 <= self.v3 < self.v4):
            raise ConfigurationError("volt-var breakpoints must satisfy v1 < v2 <= v3 < v4")
        if not (self.q1 >= 0.0 >= self.q4):
            raise ConfigurationError("volt-var limits must satisfy q1 >= 0 >= q4")


@dataclass(frozen=True)
class FreqWattParams:
    deadband_hz: float = 0.036
    droop_pu: float = 0.05
    f_nominal_hz: float = 60.0

    def __post_init__(self):
        if self.deadband_hz < 0:
            raise ConfigurationError("deadband must be >= 0")
        if self.droop_pu <= 0:
            raise ConfigurationError("droop must be > 0")


DEFAULT_VOLT_VAR = VoltVarCurve()
DEFAULT_FREQ_WATT = FreqWattParams()


class GsfMode(enum.Enum):
    CONSTANT_PQ = "constant_pq"
    VOLT_VAR = "volt_var"
    FREQ_WATT = "freq_watt"
    VOLT_VAR_FREQ_WATT = "volt_var_freq_watt"


def volt_var(v_poi_pu: float, curve: VoltVarCurve, p_pu: float = 0.0) -> float:
    """Reactive output (per unit of rating) for a node voltage, capability-clipped."""
    if v_poi_pu <= 0:
        raise ConfigurationError(f"non-physical voltage {v_poi_pu}")
    if v_poi_pu <= curve.v1:
        q = curve.q1
    elif v_poi_pu < curve.v2:
        q = curve.q1 * (curve.v2 - v_poi_pu) / (curve.v2 - curve.v1)
    elif v_poi_pu <= curve.v3:
        q = 0.0
    elif v_poi_pu < curve.v4:
        q = curve.q4 * (v_poi_pu - curve.v3) / (curve.v4 - curve.v3)
    else:
        q = curve.q4
    cap = math.sqrt(max(0.0, 1.0 - p_pu * p_pu))
    return max(-cap, min(cap, q))


def freq_watt(f_hz: float, params: FreqWattParams, p_pre_pu: float) -> float:
    """Over-frequency active-power curtailment; below the deadband, output is unchanged."""
    if f_hz <= 0:
        raise ConfigurationError(f"non-physical frequency {f_hz}")
    if not 0.0 <= p_pre_pu <= 1.0:
        raise ConfigurationError(f"p_pre out of [0,1]: {p_pre_pu}")
    excess = f_hz - params.f_nominal_hz - params.deadband_hz
    if excess <= 0:
        return p_pre_pu
    return max(0.0, p_pre_pu - excess / (params.f_nominal_hz * params.droop_pu))


@dataclass
class DerUnit:
    """One controllable device at a feeder node.

    ``connected`` is the only mutable field; the fleet flips it at co-sim
    boundaries when scheduled events come due.
    """

    id: str
    node: str
    s_rated_mva: float
    p_available_pu: float = 1.0
    gsf_mode: GsfMode = GsfMode.CONSTANT_PQ
    volt_var: VoltVarCurve = field(default_factory=VoltVarCurve)
    freq_watt: FreqWattParams = field(default_factory=FreqWattParams)
    connected: bool = True

    def __post_init__(self):
        if self.s_rated_mva <= 0:
            raise ConfigurationError(f"DER {self.id}: rating must be > 0")
        if not 0.0 <= self.p_available_pu <= 1.0:
            raise ConfigurationError(f"DER {self.id}: p_available must be in [0,1]")


@dataclass(frozen=True)
class DerOutputs:
    """Outputs per DER (per unit of each rating) and aggregated per node (MW/MVAr)."""

    per_der: Mapping[str, tuple[float, float]]
    node_injections_mva: Mapping[str, tuple[float, float]]

    def max_delta(self, other: "DerOutputs") -> float:
        """Largest change in any DER's (p, q) between two rounds."""
        worst = 0.0
        for der_id, (p, q) in self.per_der.items():
            p2, q2 = other.per_der.get(der_id, (0.0, 0.0))
            worst = max(worst, abs(p - p2), abs(q - q2))
        for der_id in other.per_der:
            if der_id not in self.per_der:
                p2, q2 = other.per_der[der_id]
                worst = max(worst, abs(p2), abs(q2))
        return worst


def der_outputs(ders: Sequence[DerUnit], pf: PfSolution, freq_hz: float) -> DerOutputs:
    """Evaluate every unit's GSF against a power-flow solution."""
    per_der: dict[str, tuple[float, float]] = {}
    per_node: dict[str, list[float]] = {}
    for der in ders:
        if not der.connected:
            per_der[der.id] = (0.0, 0.0)
            continue
        if der.node not in pf.node_v:
            raise ConfigurationError(f"DER {der.id}: node {der.node!r} missing from solution")
        p = der.p_available_pu
        if der.gsf_mode in (GsfMode.FREQ_WATT, GsfMode.VOLT_VAR_FREQ_WATT):
            p = freq_watt(freq_hz, der.freq_watt, p)
        q = 0.0
        if der.gsf_mode in (GsfMode.VOLT_VAR, GsfMode.VOLT_VAR_FREQ_WATT):
            q = volt_var(pf.v_mag(der.node), der.volt_var, p)
        per_der[der.id] = (p, q)
        agg = per_node.setdefault(der.node, [0.0, 0.0])
        agg[0] += p * der.s_rated_mva
        agg[1] += q * der.s_rated_mva
    return DerOutputs(
        per_der=per_der,
        node_injections_mva={node: (pq[0], pq[1]) for node, pq in per_node.items()},
    )


@dataclass(frozen=True)
class DerPfResult:
    pf: PfSolution
    outputs: DerOutputs
    iterations: int
    converged: bool


def converge_der_pf(
    feeder: Feeder,
    ders: Sequence[DerUnit],
    head_v: complex,
    freq_hz: float,
    config: CosimConfig,
) -> DerPfResult:
    """Alternate power flow and DER update until the exchanged injections settle.

    The convergence metric is the change in DER outputs between rounds (that
    is what the two clients exchange), thresholded at ``config.pf_tolerance``.
    The iteration count includes the initial power flow.  Hitting
    ``config.max_der_pf_iterations`` returns ``converged=False`` rather than
    raising: a stale-but-published result beats a stalled loop.
    """
    outputs = DerOutputs(per_der={}, node_injections_mva={})
    pf = backward_forward_sweep(
        feeder, head_v, injections=None, tol=config.pf_tolerance, max_iter=100
    )
    iterations = 1
    if not ders:
        return DerPfResult(pf, outputs, iterations, pf.converged)

    converged = False
    while iterations < config.max_der_pf_iterations:
        new_outputs = der_outputs(ders, pf, freq_hz)
        if new_outputs.max_delta(outputs) < config.pf_tolerance:
            outputs = new_outputs
            converged = True
            break
        outputs = new_outputs
        injections_pu = {
            node: (p / feeder.base_mva_feeder, q / feeder.base_mva_feeder)
            for node, (p, q) in outputs.node_injections_mva.items()
        }
        pf = backward_forward_sweep(
            feeder, head_v, injections=injections_pu, tol=config.pf_tolerance, max_iter=100
        )
        iterations += 1
    else:
        converged = False
    if not pf.converged:
        converged = False
    return DerPfResult(pf, outputs, iterations, converged)


@dataclass(frozen=True)
class ConnectionEvent:
    """Scheduled connect/disconnect taking effect at the first boundary >= ``at``."""

    at: SimTime
    ids: tuple[str, ...]
    connected: bool


class DerFleet:
    """Registry of DER units plus their pending connection schedule.

    Mutations (event application) must happen only on the thread driving the
    co-simulation boundaries; everything else reads immutable snapshots.
    """

    def __init__(self, units: Iterable[DerUnit]):
        self.units: list[DerUnit] = list(units)
        ids = [u.id for u in self.units]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate DER ids")
        self._by_id = {u.id: u for u in self.units}
        self._schedule: list[ConnectionEvent] = []

    def unit(self, der_id: str) -> DerUnit:
        try:
            return self._by_id[der_id]
        except KeyError:
            raise ConfigurationError(f"unknown DER id {der_id!r}") from None

    def schedule(self, ids: Sequence[str], connected: bool, at: SimTime) -> ConnectionEvent:
        for der_id in ids:
            self.unit(der_id)
        event = ConnectionEvent(at=at, ids=tuple(ids), connected=connected)
        self._schedule.append(event)
        self._schedule.sort(key=lambda e: e.at.ticks)
        return event

    @property
    def pending_events(self) -> tuple[ConnectionEvent, ...]:
        return tuple(self._schedule)

    def apply_due_events(self, now: SimTime) -> list[ConnectionEvent]:
        """Flip flags for every scheduled event with ``at <= now``; idempotent."""
        applied = []
        while self._schedule and self._schedule[0].at.ticks <= now.ticks:
            event = self._schedule.pop(0)
            for der_id in event.ids:
                self._by_id[der_id].connected = event.connected
            applied.append(event)
        return applied


def set_connected(
    fleet: DerFleet, ids: Sequence[str], connected: bool, at: SimTime
) -> ConnectionEvent:
    """Schedule a connect/disconnect for the given units (applied at boundaries)."""
    return fleet.schedule(ids, connected, at)


# --- fleet (de)serialization, inline with the feeder JSON schema ---

def _curve_to_dict(c: VoltVarCurve) -> dict:
    return {"v1": c.v1, "v2": c.v2, "v3": c.v3, "v4": c.v4, "q1": c.q1, "q4": c.q4}


def _params_to_dict(p: FreqWattParams) -> dict:
    return {"deadband_hz": p.deadband_hz, "droop_pu": p.droop_pu, "f_nominal_hz": p.f_nominal_hz}


def fleet_to_list(units: Sequence[DerUnit]) -> list[dict]:
    return [
        {
            "id": u.id,
            "node": u.node,
            "s_rated_mva": u.s_rated_mva,
            "p_available_pu": u.p_available_pu,
            "gsf_mode": u.gsf_mode.value,
            "volt_var": _curve_to_dict(u.volt_var),
            "freq_watt": _params_to_dict(u.freq_watt),
            "connected": u.connected,
        }
        for u in units
    ]


def fleet_from_list(items: Sequence[dict]) -> list[DerUnit]:
    units = []
    for d in items:
        try:
            vv = d.get("volt_var", {})
            fw = d.get("freq_watt", {})
            units.append(
                DerUnit(
                    id=d["id"],
                    node=d["node"],
                    s_rated_mva=float(d["s_rated_mva"]),
                    p_available_pu=float(d.get("p_available_pu", 1.0)),
                    gsf_mode=GsfMode(d.get("gsf_mode", "constant_pq")),
                    volt_var=VoltVarCurve(**vv) if vv else VoltVarCurve(),
                    freq_watt=FreqWattParams(**fw) if fw else FreqWattParams(),
                    connected=bool(d.get("connected", True)),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed DER definition: {exc}") from exc
    return units
