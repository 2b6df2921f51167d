"""Coupled and monolithic scenario runners producing comparable RunReports.

Both runners prime the exchange from one power-flow solution at the t=0
reference voltage, so neither side starts from an unrealistic zero load.
The monolithic runner exchanges boundary values every transmission tick with
zero communication delay: it is the oracle the coupled runs are measured
against, built from the same component code so that any discrepancy is
attributable to the coupling alone.
"""

from __future__ import annotations

import enum
import logging
import math
import multiprocessing
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    ConfigurationError,
    CosimConfig,
    DelaySample,
    OverrunEvent,
    SimTime,
    to_per_unit,
)
from .der import DerFleet, converge_der_pf, fleet_from_list, fleet_to_list
from .distribution import head_power
from .messages import TopicMap
from .mqtt import MqttTransport
from .scenarios import ScenarioSpec, scenario_to_dict
from .sequencer import FeederEndpoint, Sequencer, run_feeder_endpoint_process
from .transmission import TransmissionLoop, apply_spot_load, evaluate_reference, solve_tx
from .transport import DuplicateInjector, LoopbackTransport, PipeTransport, Transport

log = logging.getLogger(__name__)


class RunMode(enum.Enum):
    COSIM = "cosim"
    MONOLITHIC_TX = "monolithic_tx"
    MONOLITHIC_DX = "monolithic_dx"


@dataclass
class RunReport:
    """Everything one run produced: signals at dt_tx resolution plus event logs."""

    mode: RunMode
    scenario_name: str
    times_s: np.ndarray
    series: dict[str, np.ndarray]
    delay_samples: list[DelaySample]
    overruns: list[OverrunEvent]
    convergence: dict
    config: CosimConfig
    scenario: dict
    complete: bool = True
    notes: dict = field(default_factory=dict)

    def signal(self, name: str) -> np.ndarray:
        try:
            return self.series[name]
        except KeyError:
            raise ConfigurationError(
                f"unknown signal {name!r}; have {sorted(self.series)}"
            ) from None


def _build_fleet(spec: ScenarioSpec) -> DerFleet:
    """Fresh mutable units per run (connection flags change during the run)."""
    fleet = DerFleet(fleet_from_list(fleet_to_list(spec.fleet)))
    for ev in spec.der_events:
        fleet.schedule(spec.event_ids(ev), ev.connected, SimTime(round(ev.at_s * 1e6)))
    return fleet


def _prime(spec: ScenarioSpec, fleet: DerFleet):
    """Initial feeder solution at the t=0 reference, used to seed the spot load."""
    v0, f0 = evaluate_reference(spec.network.reference, SimTime(0, 0))
    result = converge_der_pf(spec.feeder, fleet.units, complex(v0, 0.0), f0, spec.config)
    p_mw, q_mvar = head_power(result.pf, spec.feeder.base_mva_feeder)
    return p_mw, q_mvar, result


def _der_series_keys(spec: ScenarioSpec) -> list[str]:
    return [u.id for u in spec.fleet]


def run_cosim(
    spec: ScenarioSpec,
    transport: str | Transport = "loopback",
    endpoint_mode: str = "thread",
    mqtt_host: str = "localhost",
    mqtt_port: int = 1883,
    run_id: Optional[str] = None,
    duplicate_injection: bool = False,
) -> RunReport:
    """Run the coupled scenario over the chosen transport and endpoint placement.

    ``transport`` is "loopback", "mqtt", or a ready Transport instance shared
    by both sides; ``endpoint_mode`` is "thread" or "process" (process mode
    uses a duplex pipe unless the transport is mqtt).
    """
    spec.validate()
    config = spec.config
    run_id = run_id or uuid.uuid4().hex[:8]
    topics = TopicMap(run_id)
    fleet = _build_fleet(spec)
    p0_mw, q0_mvar, prime = _prime(spec, fleet)

    network = apply_spot_load(
        spec.network,
        spec.feeder_bus,
        to_per_unit(p0_mw, config.base_mva_tx),
        to_per_unit(q0_mvar, config.base_mva_tx),
    )
    loop = TransmissionLoop(network, config)

    endpoint = None
    process = None
    owned_transports: list[Transport] = []
    if isinstance(transport, str) and transport not in ("loopback", "mqtt"):
        raise ConfigurationError(f"unknown transport {transport!r}")
    if endpoint_mode not in ("thread", "process"):
        raise ConfigurationError(f"unknown endpoint mode {endpoint_mode!r}")

    if endpoint_mode == "process":
        child_spec = {
            "feeder": scenario_to_dict(spec)["feeder"],
            "fleet": fleet_to_list(fleet.units),
            "events": [
                (round(ev.at_s * 1e6), list(spec.event_ids(ev)), ev.connected)
                for ev in spec.der_events
            ],
            "dt_tx": config.dt_tx,
            "dt_cosim": config.dt_cosim,
            "max_der_pf_iterations": config.max_der_pf_iterations,
            "pf_tolerance": config.pf_tolerance,
            "pacing_mode": config.pacing_mode.value,
            "base_mva_tx": config.base_mva_tx,
            "base_mva_feeder": config.base_mva_feeder,
            "run_id": run_id,
            "poi_id": spec.poi_id,
            "feeder_id": spec.feeder_id,
        }
        child_conn = None
        if transport == "mqtt":
            child_spec["mqtt"] = {"host": mqtt_host, "port": mqtt_port}
            master_tr: Transport = MqttTransport(mqtt_host, mqtt_port, f"cosim-tx-{run_id}")
            owned_transports.append(master_tr)
        else:
            parent_conn, child_conn = multiprocessing.Pipe()
            master_tr = PipeTransport(parent_conn)
            owned_transports.append(master_tr)
        process = multiprocessing.Process(
            target=run_feeder_endpoint_process, args=(child_conn, child_spec), daemon=True
        )
        process.start()
    else:
        if transport == "loopback":
            bus: Transport = LoopbackTransport()
            owned_transports.append(bus)
            master_tr = dx_tr = bus
        elif transport == "mqtt":
            master_tr = MqttTransport(mqtt_host, mqtt_port, f"cosim-tx-{run_id}")
            dx_tr = MqttTransport(mqtt_host, mqtt_port, f"cosim-dx-{run_id}")
            owned_transports.extend([master_tr, dx_tr])
        else:
            master_tr = dx_tr = transport
        if duplicate_injection:
            if dx_tr is master_tr:
                master_tr = dx_tr = DuplicateInjector(master_tr)
            else:
                master_tr = DuplicateInjector(master_tr)
                dx_tr = DuplicateInjector(dx_tr)
        endpoint = FeederEndpoint(
            spec.feeder, fleet, config, dx_tr, topics, spec.poi_id, spec.feeder_id
        )
        endpoint.start()

    seq = Sequencer(
        loop,
        master_tr,
        topics,
        poi_id=spec.poi_id,
        feeder_id=spec.feeder_id,
        feeder_bus=spec.feeder_bus,
        stale_policy=spec.stale_policy,
        initial_load_mw=(p0_mw, q0_mvar),
    )
    try:
        result = seq.run(spec.n_ticks)
    finally:
        if endpoint is not None:
            endpoint.stop()
        if process is not None:
            process.join(timeout=10.0)
            if process.is_alive():
                process.terminate()
                process.join(timeout=2.0)
        for tr in owned_transports:
            try:
                tr.close()
            except Exception:
                pass

    size = spec.n_ticks + 1
    T = config.dt_cosim_ticks // config.dt_tx_ticks
    p_dx = np.full(size, p0_mw)
    q_dx = np.full(size, q0_mvar)
    der_keys = _der_series_keys(spec)
    der_p = {der_id: np.full(size, prime.outputs.per_der.get(der_id, (0.0, 0.0))[0]) for der_id in der_keys}
    der_q = {der_id: np.full(size, prime.outputs.per_der.get(der_id, (0.0, 0.0))[1]) for der_id in der_keys}
    iterations = []
    non_converged = 0
    for rec in sorted(seq.dx_records, key=lambda r: r.step_index):
        start = rec.step_index * T
        if start >= size:
            continue
        p_dx[start:] = rec.load.p_mw
        q_dx[start:] = rec.load.q_mvar
        if rec.per_der:
            for der_id, (p, q) in rec.per_der.items():
                if der_id in der_p:
                    der_p[der_id][start:] = p
                    der_q[der_id][start:] = q
        iterations.append(rec.load.iterations_used)
        if not rec.load.converged:
            non_converged += 1

    series = {
        "v_pcc": result.v_pcc,
        "v_angle": result.v_angle,
        "freq_hz": result.freq_hz,
        "p_dx_mw": p_dx,
        "q_dx_mvar": q_dx,
        "applied_p_mw": result.applied_p_mw,
        "applied_q_mvar": result.applied_q_mvar,
    }
    for der_id in der_keys:
        series[f"der_p_pu:{der_id}"] = der_p[der_id]
        series[f"der_q_pu:{der_id}"] = der_q[der_id]

    convergence = {
        "boundaries": result.n_boundaries,
        "measurements_sent": result.measurements_sent,
        "replies_received": len(seq.dx_records),
        "non_converged": non_converged,
        "max_iterations_used": max(iterations, default=0),
        "mean_iterations_used": float(np.mean(iterations)) if iterations else 0.0,
        "dropped_duplicates": result.dropped_duplicates,
    }
    return RunReport(
        mode=RunMode.COSIM,
        scenario_name=spec.name,
        times_s=result.times_s,
        series=series,
        delay_samples=result.delay_samples,
        overruns=result.overruns,
        convergence=convergence,
        config=config,
        scenario=scenario_to_dict(spec),
        complete=result.complete,
        notes={"run_id": run_id, "transport": transport if isinstance(transport, str) else "custom",
               "endpoint_mode": endpoint_mode, "abort_reason": result.abort_reason},
    )


def run_monolithic(spec: ScenarioSpec, mode: RunMode = RunMode.MONOLITHIC_TX) -> RunReport:
    """All components in one loop, exchanging boundary values every dt_tx.

    MONOLITHIC_TX and MONOLITHIC_DX share one implementation here (the same
    equations run either way at desk scale); the tag records which side the
    run stands in for.
    """
    if mode is RunMode.COSIM:
        raise ConfigurationError("use run_cosim for coupled runs")
    spec.validate()
    config = spec.config
    fleet = _build_fleet(spec)
    p0_mw, q0_mvar, prime = _prime(spec, fleet)

    n = spec.n_ticks
    size = n + 1
    times = np.arange(size) * config.dt_tx
    v_pcc = np.empty(size)
    v_angle = np.empty(size)
    freq = np.empty(size)
    p_dx = np.empty(size)
    q_dx = np.empty(size)
    der_keys = _der_series_keys(spec)
    der_p = {k: np.empty(size) for k in der_keys}
    der_q = {k: np.empty(size) for k in der_keys}

    network = apply_spot_load(
        spec.network,
        spec.feeder_bus,
        to_per_unit(p0_mw, config.base_mva_tx),
        to_per_unit(q0_mvar, config.base_mva_tx),
    )
    state = solve_tx(network, None, SimTime(0, 0))

    def capture(i, st, result, p_mw, q_mvar):
        v = st.bus_voltages[spec.feeder_bus]
        v_pcc[i] = abs(v)
        v_angle[i] = math.atan2(v.imag, v.real)
        freq[i] = st.freq_hz
        p_dx[i] = p_mw
        q_dx[i] = q_mvar
        for der_id in der_keys:
            p, q = result.outputs.per_der.get(der_id, (0.0, 0.0))
            der_p[der_id][i] = p
            der_q[der_id][i] = q

    capture(0, state, prime, p0_mw, q0_mvar)
    latest = (p0_mw, q0_mvar)
    iterations = []
    non_converged = 0
    dt_ticks = config.dt_tx_ticks
    for i in range(1, size):
        network = apply_spot_load(
            network,
            spec.feeder_bus,
            to_per_unit(latest[0], config.base_mva_tx),
            to_per_unit(latest[1], config.base_mva_tx),
        )
        t = SimTime(i * dt_ticks, i)
        state = solve_tx(network, state, t)
        fleet.apply_due_events(t)
        v_mag = abs(state.bus_voltages[spec.feeder_bus])
        result = converge_der_pf(spec.feeder, fleet.units, complex(v_mag, 0.0), state.freq_hz, config)
        p_mw, q_mvar = head_power(result.pf, spec.feeder.base_mva_feeder)
        iterations.append(result.iterations)
        if not result.converged:
            non_converged += 1
        capture(i, state, result, p_mw, q_mvar)
        latest = (p_mw, q_mvar)

    series = {
        "v_pcc": v_pcc,
        "v_angle": v_angle,
        "freq_hz": freq,
        "p_dx_mw": p_dx,
        "q_dx_mvar": q_dx,
        "applied_p_mw": p_dx.copy(),
        "applied_q_mvar": q_dx.copy(),
    }
    for der_id in der_keys:
        series[f"der_p_pu:{der_id}"] = der_p[der_id]
        series[f"der_q_pu:{der_id}"] = der_q[der_id]
    convergence = {
        "boundaries": n,
        "measurements_sent": n,
        "replies_received": n,
        "non_converged": non_converged,
        "max_iterations_used": max(iterations, default=0),
        "mean_iterations_used": float(np.mean(iterations)) if iterations else 0.0,
        "dropped_duplicates": 0,
    }
    return RunReport(
        mode=mode,
        scenario_name=spec.name,
        times_s=times,
        series=series,
        delay_samples=[],
        overruns=[],
        convergence=convergence,
        config=config,
        scenario=scenario_to_dict(spec),
        complete=True,
        notes={},
    )
