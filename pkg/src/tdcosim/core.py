"""Shared domain types, unit conventions, and the exact-tick simulation clock.

Time is represented as integer microsecond ticks so that step/boundary
alignment comparisons are exact: advancing k steps of dt and asking

    time.ticks == k * seconds_to_ticks(dt)

never accumulates floating-point drift.  All other quantities are per-unit
floats on explicitly declared MVA bases.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

TICK_US = 1  # tick size: 1 microsecond
TICKS_PER_SECOND = 1_000_000 // TICK_US


class ConfigurationError(ValueError):
    """Invalid configuration, topology, or domain value."""


class SolverDivergenceError(RuntimeError):
    """A network solve failed to converge (e.g. load beyond maximum transfer)."""

    def __init__(self, message, bus=None, mismatch=None):
        super().__init__(message)
        self.bus = bus
        self.mismatch = mismatch


class TransportError(RuntimeError):
    """Transport-level failure (connect, publish, or session loss)."""


class MetricError(RuntimeError):
    """A post-processing metric could not be computed from the given reports."""


def seconds_to_ticks(seconds: float) -> int:
    """Convert seconds to integer ticks, rejecting values off the tick grid."""
    if seconds < 0:
        raise ConfigurationError(f"negative duration: {seconds}")
    ticks = round(seconds * TICKS_PER_SECOND)
    if not math.isclose(ticks, seconds * TICKS_PER_SECOND, rel_tol=1e-9, abs_tol=1e-3):
        raise ConfigurationError(
            f"{seconds} s is not representable on the {TICK_US} us tick grid"
        )
    return ticks


def ticks_to_seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


@dataclass(frozen=True)
class SimTime:
    """A point on the run-relative master clock.

    ``ticks`` is exact integer time; ``step_index`` is the index in the owning
    loop (transmission tick counter or co-simulation step counter, depending
    on who stamped it).
    """

    ticks: int
    step_index: int = 0

    def __post_init__(self):
        if self.ticks < 0 or self.step_index < 0:
            raise ConfigurationError("SimTime must be non-negative")

    @property
    def seconds(self) -> float:
        return ticks_to_seconds(self.ticks)

    @classmethod
    def from_step(cls, step_index: int, dt_seconds: float) -> "SimTime":
        return cls(ticks=step_index * seconds_to_ticks(dt_seconds), step_index=step_index)

    def advanced(self, dt_ticks: int, steps: int = 1) -> "SimTime":
        return SimTime(self.ticks + steps * dt_ticks, self.step_index + steps)

    def __lt__(self, other: "SimTime"):
        return self.ticks < other.ticks

    def __le__(self, other: "SimTime"):
        return self.ticks <= other.ticks


class PacingMode(enum.Enum):
    REAL_TIME = "real_time"
    LOGICAL = "logical"


@dataclass(frozen=True)
class CosimConfig:
    """Timing and coupling parameters shared by both sides of the co-simulation.

    ``dt_cosim`` must be an integer multiple of ``dt_tx``; the transmission
    side is the master and exchanges boundary data every ``dt_cosim`` seconds.
    """

    dt_tx: float = 0.005
    dt_cosim: float = 1.0
    max_der_pf_iterations: int = 10
    pf_tolerance: float = 1e-8
    pacing_mode: PacingMode = PacingMode.LOGICAL
    base_mva_tx: float = 100.0
    base_mva_feeder: float = 10.0

    def __post_init__(self):
        if self.dt_tx <= 0 or self.dt_cosim <= 0:
            raise ConfigurationError("timesteps must be positive")
        if self.max_der_pf_iterations < 1:
            raise ConfigurationError("max_der_pf_iterations must be >= 1")
        if self.pf_tolerance <= 0:
            raise ConfigurationError("pf_tolerance must be > 0")
        if self.base_mva_tx <= 0 or self.base_mva_feeder <= 0:
            raise ConfigurationError("MVA bases must be > 0")
        ticks_per_cosim_step(self)  # raises if the step ratio is not integral

    @property
    def dt_tx_ticks(self) -> int:
        return seconds_to_ticks(self.dt_tx)

    @property
    def dt_cosim_ticks(self) -> int:
        return seconds_to_ticks(self.dt_cosim)


def ticks_per_cosim_step(config: CosimConfig) -> int:
    """Number of transmission ticks per co-simulation boundary exchange."""
    tx = seconds_to_ticks(config.dt_tx)
    cosim = seconds_to_ticks(config.dt_cosim)
    if tx == 0:
        raise ConfigurationError("dt_tx below tick resolution")
    if cosim % tx != 0:
        raise ConfigurationError(
            f"dt_cosim ({config.dt_cosim} s) is not an integer multiple of dt_tx ({config.dt_tx} s)"
        )
    return cosim // tx


def to_per_unit(value_physical: float, base_mva: float) -> float:
    """MW or MVAr to per-unit on the given MVA base."""
    if base_mva <= 0:
        raise ConfigurationError(f"non-positive MVA base: {base_mva}")
    return value_physical / base_mva


def from_per_unit(value_pu: float, base_mva: float) -> float:
    if base_mva <= 0:
        raise ConfigurationError(f"non-positive MVA base: {base_mva}")
    return value_pu * base_mva


class OverrunKind(enum.Enum):
    TX_STEP = "tx_step"
    COSIM_LOOP = "cosim_loop"
    DER_PF_ITERATION_CAP = "der_pf_iteration_cap"


@dataclass(frozen=True)
class OverrunEvent:
    """A step or exchange that exceeded its budget.

    For timing kinds the units are seconds. For DER_PF_ITERATION_CAP the
    'measured' value is the iteration the loop would have needed (cap + 1)
    against a budget of the configured cap, keeping measured > budget.
    """

    kind: OverrunKind
    step_index: int
    measured_s: float
    budget_s: float

    def __post_init__(self):
        if not self.measured_s > self.budget_s:
            raise ConfigurationError("overrun requires measured > budget")


@dataclass(frozen=True)
class DelaySample:
    """Closed-loop delay: measurement publish to load-update receipt (monotonic clock)."""

    step_index: int
    t_publish: float
    t_load_received: float

    def __post_init__(self):
        if self.t_load_received < self.t_publish:
            raise ConfigurationError("delay sample is negative")

    @property
    def delay_s(self) -> float:
        return self.t_load_received - self.t_publish


@dataclass(frozen=True)
class Measurement:
    """Boundary measurement published by the transmission side each co-sim step."""

    timestamp: SimTime
    poi_id: str
    v_mag_pu: float
    v_angle_rad: float
    freq_hz: float

    def __post_init__(self):
        if self.v_mag_pu <= 0:
            raise ConfigurationError(f"non-physical voltage magnitude: {self.v_mag_pu}")
        if not 55.0 <= self.freq_hz <= 65.0:
            raise ConfigurationError(f"frequency out of supported band: {self.freq_hz} Hz")


@dataclass(frozen=True)
class LoadUpdate:
    """Aggregate feeder-head consumption returned by the distribution side.

    ``timestamp`` echoes the triggering Measurement so the master can match
    replies to boundaries. A non-converged power flow is still published
    (``converged=False``) so the loop never stalls.
    """

    timestamp: SimTime
    feeder_id: str
    p_mw: float
    q_mvar: float
    converged: bool = True
    iterations_used: int = 1

    def __post_init__(self):
        if self.iterations_used < 1:
            raise ConfigurationError("iterations_used must be >= 1")
