"""RunReport serialization: JSON round-trip and CSV signal export."""

from __future__ import annotations

import csv
import json

import numpy as np

from .core import DelaySample, OverrunEvent, OverrunKind
from .runner import RunMode, RunReport
from .scenarios import _config_from_dict, _config_to_dict


def report_to_dict(report: RunReport) -> dict:
    return {
        "schema_version": 1,
        "mode": report.mode.value,
        "scenario_name": report.scenario_name,
        "times_s": report.times_s.tolist(),
        "series": {name: values.tolist() for name, values in report.series.items()},
        "delay_samples": [
            {
                "step_index": s.step_index,
                "t_publish": s.t_publish,
                "t_load_received": s.t_load_received,
            }
            for s in report.delay_samples
        ],
        "overruns": [
            {
                "kind": o.kind.value,
                "step_index": o.step_index,
                "measured_s": o.measured_s,
                "budget_s": o.budget_s,
            }
            for o in report.overruns
        ],
        "convergence": report.convergence,
        "config": _config_to_dict(report.config),
        "scenario": report.scenario,
        "complete": report.complete,
        "notes": report.notes,
    }


def report_from_dict(d: dict) -> RunReport:
    return RunReport(
        mode=RunMode(d["mode"]),
        scenario_name=d["scenario_name"],
        times_s=np.asarray(d["times_s"]),
        series={name: np.asarray(vals) for name, vals in d["series"].items()},
        delay_samples=[
            DelaySample(s["step_index"], s["t_publish"], s["t_load_received"])
            for s in d.get("delay_samples", [])
        ],
        overruns=[
            OverrunEvent(OverrunKind(o["kind"]), o["step_index"], o["measured_s"], o["budget_s"])
            for o in d.get("overruns", [])
        ],
        convergence=d.get("convergence", {}),
        config=_config_from_dict(d.get("config", {})),
        scenario=d.get("scenario", {}),
        complete=d.get("complete", True),
        notes=d.get("notes", {}),
    )


def save_report(report: RunReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh)
        fh.write("\n")


def load_report(path: str) -> RunReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))


def signal_columns(report: RunReport) -> list[str]:
    """Stable column order: the core signals first, then per-DER series sorted."""
    core = [
        "v_pcc",
        "v_angle",
        "freq_hz",
        "p_dx_mw",
        "q_dx_mvar",
        "applied_p_mw",
        "applied_q_mvar",
    ]
    extra = sorted(name for name in report.series if name not in core)
    return [name for name in core if name in report.series] + extra


def write_signals_csv(report: RunReport, path: str) -> None:
    """One row per dt_tx sample, one column per signal."""
    columns = signal_columns(report)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s"] + columns)
        data = [report.series[name] for name in columns]
        for i, t in enumerate(report.times_s):
            writer.writerow([repr(float(t))] + [repr(float(col[i])) for col in data])


def summarize(report: RunReport) -> dict:
    """Human/machine summary used by the CLI ``report`` command."""
    overruns_by_kind: dict[str, int] = {}
    for o in report.overruns:
        overruns_by_kind[o.kind.value] = overruns_by_kind.get(o.kind.value, 0) + 1
    out = {
        "scenario": report.scenario_name,
        "mode": report.mode.value,
        "duration_s": float(report.times_s[-1]) if len(report.times_s) else 0.0,
        "samples": len(report.times_s),
        "signals": signal_columns(report),
        "complete": report.complete,
        "overruns": overruns_by_kind,
        "convergence": report.convergence,
    }
    if report.delay_samples:
        delays = [s.delay_s for s in report.delay_samples]
        out["delay"] = {
            "count": len(delays),
            "mean_s": sum(delays) / len(delays),
            "max_s": max(delays),
        }
    return out
