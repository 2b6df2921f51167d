"""Scenario definitions: what to simulate, for how long, and with which events.

A ScenarioSpec bundles the co-sim configuration, the transmission network
(with its reference program), the feeder (inline or synthesized on load),
the DER fleet, and any connect/disconnect events.  Built-in scenarios ship
as JSON files in ``tdcosim.builtin_scenarios``; users can copy and edit them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional

from .core import ConfigurationError, CosimConfig, PacingMode, seconds_to_ticks
from .der import DerUnit, fleet_from_list, fleet_to_list
from .distribution import Feeder, feeder_from_dict, feeder_to_dict, synthesize_feeder
from .sequencer import StalePolicy
from .transmission import (
    ProgramKind,
    TxNetwork,
    network_from_dict,
    network_to_dict,
)

BUILTIN_PACKAGE = "tdcosim.builtin_scenarios"


@dataclass(frozen=True)
class DerEvent:
    """Connect/disconnect of a set of units; ids ("*",) means the whole fleet."""

    at_s: float
    ids: tuple[str, ...]
    connected: bool


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    duration_s: float
    config: CosimConfig
    network: TxNetwork
    feeder: Feeder
    fleet: tuple[DerUnit, ...] = ()
    der_events: tuple[DerEvent, ...] = ()
    poi_id: str = "pcc"
    feeder_id: str = "f1"
    feeder_bus: str = "pcc"
    stale_policy: StalePolicy = StalePolicy.HOLD_LAST
    step_phase_offset_s: Optional[float] = None  # step time relative to its nearest boundary

    def __post_init__(self):
        self.validate()

    @property
    def n_ticks(self) -> int:
        return seconds_to_ticks(self.duration_s) // self.config.dt_tx_ticks

    def validate(self) -> None:
        dur_ticks = seconds_to_ticks(self.duration_s)
        if dur_ticks == 0 or dur_ticks % self.config.dt_tx_ticks != 0:
            raise ConfigurationError("duration must be a positive multiple of dt_tx")
        if self.feeder_bus not in {b.id for b in self.network.buses}:
            raise ConfigurationError(f"feeder bus {self.feeder_bus!r} not in network")
        fleet_ids = {u.id for u in self.fleet}
        for u in self.fleet:
            if u.node not in {n.id for n in self.feeder.nodes}:
                raise ConfigurationError(f"DER {u.id} at unknown feeder node {u.node!r}")
        for ev in self.der_events:
            at_ticks = seconds_to_ticks(ev.at_s)  # raises if off the tick grid
            if at_ticks >= dur_ticks:
                raise ConfigurationError(f"DER event at {ev.at_s} s outside run duration")
            for der_id in ev.ids:
                if der_id != "*" and der_id not in fleet_ids:
                    raise ConfigurationError(f"DER event references unknown unit {der_id!r}")
        vp = self.network.reference.voltage
        if vp.kind is ProgramKind.STEP:
            step_ticks = seconds_to_ticks(vp.step_time_s)
            if step_ticks >= dur_ticks:
                raise ConfigurationError("voltage step outside run duration")
            if self.step_phase_offset_s is not None:
                cosim = self.config.dt_cosim_ticks
                offset = round(self.step_phase_offset_s * 1e6)
                if (step_ticks - offset) % cosim != 0:
                    raise ConfigurationError(
                        "step_phase_offset_s does not place the step at boundary + offset"
                    )

    def event_ids(self, ev: DerEvent) -> tuple[str, ...]:
        if ev.ids == ("*",):
            return tuple(u.id for u in self.fleet)
        return ev.ids


def with_overrides(
    spec: ScenarioSpec,
    dt_cosim: Optional[float] = None,
    dt_tx: Optional[float] = None,
    pacing_mode: Optional[PacingMode] = None,
    duration_s: Optional[float] = None,
    name: Optional[str] = None,
) -> ScenarioSpec:
    """Clone a scenario with timing overrides (used for sweeps and reruns)."""
    config = replace(
        spec.config,
        dt_cosim=dt_cosim if dt_cosim is not None else spec.config.dt_cosim,
        dt_tx=dt_tx if dt_tx is not None else spec.config.dt_tx,
        pacing_mode=pacing_mode if pacing_mode is not None else spec.config.pacing_mode,
    )
    return replace(
        spec,
        name=name if name is not None else spec.name,
        config=config,
        duration_s=duration_s if duration_s is not None else spec.duration_s,
    )


# --- JSON (schema in docs/file-formats.md) ---

def _config_to_dict(c: CosimConfig) -> dict:
    return {
        "dt_tx": c.dt_tx,
        "dt_cosim": c.dt_cosim,
        "max_der_pf_iterations": c.max_der_pf_iterations,
        "pf_tolerance": c.pf_tolerance,
        "pacing_mode": c.pacing_mode.value,
        "base_mva_tx": c.base_mva_tx,
        "base_mva_feeder": c.base_mva_feeder,
    }


def _config_from_dict(d: dict) -> CosimConfig:
    return CosimConfig(
        dt_tx=float(d.get("dt_tx", 0.005)),
        dt_cosim=float(d.get("dt_cosim", 1.0)),
        max_der_pf_iterations=int(d.get("max_der_pf_iterations", 10)),
        pf_tolerance=float(d.get("pf_tolerance", 1e-8)),
        pacing_mode=PacingMode(d.get("pacing_mode", "logical")),
        base_mva_tx=float(d.get("base_mva_tx", 100.0)),
        base_mva_feeder=float(d.get("base_mva_feeder", 10.0)),
    )


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "schema_version": 1,
        "name": spec.name,
        "duration_s": spec.duration_s,
        "config": _config_to_dict(spec.config),
        "stale_policy": spec.stale_policy.value,
        "poi_id": spec.poi_id,
        "feeder_id": spec.feeder_id,
        "feeder_bus": spec.feeder_bus,
        "step_phase_offset_s": spec.step_phase_offset_s,
        "network": network_to_dict(spec.network, spec.config.base_mva_tx),
        "feeder": feeder_to_dict(spec.feeder),
        "ders": fleet_to_list(spec.fleet),
        "der_events": [
            {"at_s": ev.at_s, "ids": list(ev.ids), "connected": ev.connected}
            for ev in spec.der_events
        ],
    }


def scenario_from_dict(d: dict) -> ScenarioSpec:
    try:
        config = _config_from_dict(d.get("config", {}))
        feeder_spec = d["feeder"]
        if "synthesize" in feeder_spec:
            syn = feeder_spec["synthesize"]
            feeder = synthesize_feeder(
                n_nodes=int(syn["n_nodes"]),
                total_p_mw=float(syn["total_p_mw"]),
                total_q_mvar=float(syn["total_q_mvar"]),
                topology_seed=int(syn["topology_seed"]),
                der_fraction=float(syn.get("der_fraction", 0.0)),
                base_mva=float(syn.get("base_mva", config.base_mva_feeder)),
                zip_fractions=tuple(syn.get("zip_fractions", (0.4, 0.3, 0.3))),
            )
        else:
            feeder = feeder_from_dict(feeder_spec)
        ders_spec = d.get("ders", [])
        if isinstance(ders_spec, dict) and "template" in ders_spec:
            # one unit per DER attachment node, instantiated from the template
            template = dict(ders_spec["template"])
            fleet = tuple(
                fleet_from_list(
                    [{**template, "id": f"der-{node}", "node": node} for node in feeder.der_nodes]
                )
            )
        else:
            fleet = tuple(fleet_from_list(ders_spec))
        events = tuple(
            DerEvent(
                at_s=float(ev["at_s"]),
                ids=tuple(ev["ids"]),
                connected=bool(ev["connected"]),
            )
            for ev in d.get("der_events", [])
        )
        return ScenarioSpec(
            name=d["name"],
            duration_s=float(d["duration_s"]),
            config=config,
            network=network_from_dict(d["network"]),
            feeder=feeder,
            fleet=fleet,
            der_events=events,
            poi_id=d.get("poi_id", "pcc"),
            feeder_id=d.get("feeder_id", "f1"),
            feeder_bus=d.get("feeder_bus", d.get("poi_id", "pcc")),
            stale_policy=StalePolicy(d.get("stale_policy", "hold_last")),
            step_phase_offset_s=d.get("step_phase_offset_s"),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed scenario: {exc}") from exc


def load_scenario(path: str) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(spec: ScenarioSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def list_builtin_scenarios() -> list[str]:
    names = []
    for entry in resources.files(BUILTIN_PACKAGE).iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return sorted(names)


def builtin_scenario(name: str) -> ScenarioSpec:
    entry = resources.files(BUILTIN_PACKAGE) / f"{name}.json"
    if not entry.is_file():
        raise ConfigurationError(
            f"unknown scenario {name!r}; built-ins: {', '.join(list_builtin_scenarios())}"
        )
    return scenario_from_dict(json.loads(entry.read_text(encoding="utf-8")))
