"""Topic map and JSON wire schemas for the co-simulation exchange.

Payloads are UTF-8 JSON with explicit unit-bearing field names and a
per-publisher monotonically increasing ``seq``.  Decoding ignores unknown
fields (forward compatibility) and round-trips exactly:
``decode(encode(m)) == m`` for any valid message.  The byte-level contract
is documented in docs/wire-protocol.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Optional

from .core import LoadUpdate, Measurement, SimTime, TICK_US

SCHEMA_VERSION = 1

KIND_MEASUREMENT = "measurement"
KIND_LOAD_UPDATE = "load_update"
KIND_CONTROL = "control"


class WireFormatError(ValueError):
    """Payload is not a valid co-simulation wire message."""


@dataclass(frozen=True)
class TopicMap:
    """Topic layout for one run; topics are unique per (run_id, endpoint)."""

    run_id: str

    def measurement(self, poi_id: str) -> str:
        return f"cosim/{self.run_id}/tx/{poi_id}/measurement"

    def load(self, feeder_id: str) -> str:
        return f"cosim/{self.run_id}/feeder/{feeder_id}/load"

    @property
    def control(self) -> str:
        return f"cosim/{self.run_id}/control"


@dataclass(frozen=True)
class WireMessage:
    """A decoded message: its kind, publisher sequence number, and body."""

    kind: str
    seq: int
    measurement: Optional[Measurement] = None
    load_update: Optional[LoadUpdate] = None
    per_der: Optional[Mapping[str, tuple[float, float]]] = None
    command: Optional[str] = None


def _timestamp_fields(t: SimTime) -> dict:
    return {"timestamp_ticks": t.ticks, "tick_size_us": TICK_US, "step_index": t.step_index}


def _parse_timestamp(d: dict) -> SimTime:
    ticks = int(d["timestamp_ticks"])
    tick_us = int(d.get("tick_size_us", TICK_US))
    if tick_us != TICK_US:
        # normalize foreign tick sizes onto our grid
        scaled = ticks * tick_us
        if scaled % TICK_US != 0:
            raise WireFormatError(f"timestamp not representable: {ticks} x {tick_us} us")
        ticks = scaled // TICK_US
    return SimTime(ticks=ticks, step_index=int(d.get("step_index", 0)))


def encode_measurement(m: Measurement, seq: int) -> bytes:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": KIND_MEASUREMENT,
        "seq": seq,
        **_timestamp_fields(m.timestamp),
        "poi_id": m.poi_id,
        "v_mag_pu": m.v_mag_pu,
        "v_angle_rad": m.v_angle_rad,
        "freq_hz": m.freq_hz,
    }
    return json.dumps(doc).encode("utf-8")


def encode_load_update(
    lu: LoadUpdate, seq: int, per_der: Optional[Mapping[str, tuple[float, float]]] = None
) -> bytes:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": KIND_LOAD_UPDATE,
        "seq": seq,
        **_timestamp_fields(lu.timestamp),
        "feeder_id": lu.feeder_id,
        "p_mw": lu.p_mw,
        "q_mvar": lu.q_mvar,
        "converged": lu.converged,
        "iterations_used": lu.iterations_used,
    }
    if per_der is not None:
        doc["per_der"] = {der_id: [p, q] for der_id, (p, q) in per_der.items()}
    return json.dumps(doc).encode("utf-8")


def encode_control(command: str, seq: int = 0) -> bytes:
    return json.dumps(
        {"schema_version": SCHEMA_VERSION, "kind": KIND_CONTROL, "seq": seq, "cmd": command}
    ).encode("utf-8")


def decode_message(payload: bytes) -> WireMessage:
    """Parse any co-simulation wire payload; unknown fields are ignored."""
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireFormatError(f"not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise WireFormatError("payload is not a JSON object")
    kind = doc.get("kind")
    try:
        seq = int(doc.get("seq", 0))
        if kind == KIND_MEASUREMENT:
            m = Measurement(
                timestamp=_parse_timestamp(doc),
                poi_id=str(doc["poi_id"]),
                v_mag_pu=float(doc["v_mag_pu"]),
                v_angle_rad=float(doc["v_angle_rad"]),
                freq_hz=float(doc["freq_hz"]),
            )
            return WireMessage(kind=kind, seq=seq, measurement=m)
        if kind == KIND_LOAD_UPDATE:
            lu = LoadUpdate(
                timestamp=_parse_timestamp(doc),
                feeder_id=str(doc["feeder_id"]),
                p_mw=float(doc["p_mw"]),
                q_mvar=float(doc["q_mvar"]),
                converged=bool(doc.get("converged", True)),
                iterations_used=int(doc.get("iterations_used", 1)),
            )
            per_der = None
            if "per_der" in doc:
                per_der = {
                    der_id: (float(pq[0]), float(pq[1])) for der_id, pq in doc["per_der"].items()
                }
            return WireMessage(kind=kind, seq=seq, load_update=lu, per_der=per_der)
        if kind == KIND_CONTROL:
            return WireMessage(kind=kind, seq=seq, command=str(doc.get("cmd", "")))
    except (KeyError, TypeError, ValueError) as exc:
        raise WireFormatError(f"malformed {kind} message: {exc}") from exc
    raise WireFormatError(f"unknown message kind: {kind!r}")
