"""Radial distribution feeder model and backward/forward-sweep power flow.

Positive-sequence, single-phase-equivalent solver for tree feeders: the
backward pass aggregates ZIP-load currents leaf to root, the forward pass
propagates voltage drops root to leaf, repeating until the largest node
voltage change falls below tolerance.  DER injections enter as negative
loads.  Non-convergence is returned in the solution, never raised: the
co-simulation loop has no abort path.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional

import numpy as np

from .core import ConfigurationError, from_per_unit

COLLAPSE_V = 1e-6


@dataclass(frozen=True)
class FeederNode:
    id: str
    kv: float = 12.47


@dataclass(frozen=True)
class Branch:
    from_node: str
    to_node: str
    r_pu: float
    x_pu: float

    def __post_init__(self):
        if self.r_pu == 0 and self.x_pu == 0:
            raise ConfigurationError(f"zero-impedance branch {self.from_node}-{self.to_node}")

    @property
    def z(self) -> complex:
        return complex(self.r_pu, self.x_pu)


@dataclass(frozen=True)
class ZipLoad:
    """ZIP composite load: p0/q0 at 1.0 p.u. voltage, split into Z/I/P fractions."""

    p0_pu: float
    q0_pu: float
    z_frac: float = 0.0
    i_frac: float = 0.0
    p_frac: float = 1.0

    def __post_init__(self):
        for frac in (self.z_frac, self.i_frac, self.p_frac):
            if not 0.0 <= frac <= 1.0:
                raise ConfigurationError(f"ZIP fraction out of [0,1]: {frac}")
        if abs(self.z_frac + self.i_frac + self.p_frac - 1.0) > 1e-9:
            raise ConfigurationError("ZIP fractions must sum to 1")


@dataclass(frozen=True)
class Feeder:
    """Radial feeder rooted at ``nodes[0]`` (the head / PCC side)."""

    nodes: tuple[FeederNode, ...]
    branches: tuple[Branch, ...]
    loads: Mapping[str, ZipLoad] = field(default_factory=dict)
    der_nodes: tuple[str, ...] = ()
    base_mva_feeder: float = 10.0

    def __post_init__(self):
        if len(self.nodes) < 1:
            raise ConfigurationError("feeder needs at least one node")
        if self.base_mva_feeder <= 0:
            raise ConfigurationError("base_mva_feeder must be > 0")
        self._topology  # force validation at construction

    @property
    def head_id(self) -> str:
        return self.nodes[0].id

    @cached_property
    def _topology(self):
        """parent index, branch impedance, and depth-level grouping (BFS from head)."""
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate node ids")
        n = len(ids)
        if len(self.branches) != n - 1:
            raise ConfigurationError(
                f"radial feeder needs exactly {n - 1} branches, got {len(self.branches)}"
            )
        idx = {node_id: i for i, node_id in enumerate(ids)}
        adj: dict[int, list[tuple[int, complex]]] = {i: [] for i in range(n)}
        for br in self.branches:
            if br.from_node not in idx or br.to_node not in idx:
                raise ConfigurationError(f"branch references unknown node: {br}")
            f, t = idx[br.from_node], idx[br.to_node]
            adj[f].append((t, br.z))
            adj[t].append((f, br.z))
        parent = np.full(n, -1, dtype=np.int64)
        z_to_parent = np.zeros(n, dtype=complex)
        depth = np.full(n, -1, dtype=np.int64)
        depth[0] = 0
        order = [0]
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v, z in adj[u]:
                    if depth[v] == -1:
                        depth[v] = depth[u] + 1
                        parent[v] = u
                        z_to_parent[v] = z
                        order.append(v)
                        nxt.append(v)
            frontier = nxt
        if len(order) != n:
            raise ConfigurationError("feeder graph is not a connected tree")
        levels = [
            np.flatnonzero(depth == d).astype(np.int64) for d in range(int(depth.max()) + 1)
        ]
        return idx, parent, z_to_parent, levels, depth

    @property
    def node_index(self) -> Mapping[str, int]:
        return self._topology[0]

    @property
    def max_depth(self) -> int:
        return int(self._topology[4].max())


@dataclass(frozen=True)
class PfSolution:
    """Converged (or capped) sweep result; head power is the injection into the feeder."""

    node_v: Mapping[str, complex]
    head_p_pu: float
    head_q_pu: float
    iterations: int
    converged: bool
    max_mismatch_pu: float

    def v_mag(self, node_id: str) -> float:
        return abs(self.node_v[node_id])


def zip_power(load: ZipLoad, v_mag: float) -> complex:
    """Complex power consumed by a ZIP load at the given voltage magnitude."""
    scale = load.z_frac * v_mag**2 + load.i_frac * v_mag + load.p_frac
    return complex(load.p0_pu, load.q0_pu) * scale


def backward_forward_sweep(
    feeder: Feeder,
    head_v_pu: complex,
    injections: Optional[Mapping[str, tuple[float, float]]] = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PfSolution:
    """Solve the radial power flow for a given head voltage and DER injections.

    Convergence metric is the largest successive node-voltage change.  A
    voltage collapse or hitting ``max_iter`` yields ``converged=False`` with
    the last mismatch; callers decide policy.
    """
    if not 0.5 < abs(head_v_pu) < 1.5:
        raise ConfigurationError(f"head voltage out of range: |{head_v_pu}| p.u.")
    idx, parent, z_to_parent, levels, _ = feeder._topology
    ids = [n.id for n in feeder.nodes]
    n = len(ids)

    s0 = np.zeros(n, dtype=complex)
    zf = np.zeros(n)
    if_ = np.zeros(n)
    pf = np.zeros(n)
    for node_id, load in feeder.loads.items():
        if node_id not in idx:
            raise ConfigurationError(f"load at unknown node {node_id!r}")
        i = idx[node_id]
        s0[i] = complex(load.p0_pu, load.q0_pu)
        zf[i], if_[i], pf[i] = load.z_frac, load.i_frac, load.p_frac
    s_inj = np.zeros(n, dtype=complex)
    if injections:
        for node_id, (p, q) in injections.items():
            if node_id not in idx:
                raise ConfigurationError(f"injection at unknown node {node_id!r}")
            s_inj[idx[node_id]] = complex(p, q)

    head_v = complex(head_v_pu)
    v = np.full(n, head_v, dtype=complex)
    acc = np.zeros(n, dtype=complex)
    converged = False
    mismatch = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        vm = np.abs(v)
        if np.any(vm < COLLAPSE_V) or not np.all(np.isfinite(vm)):
            mismatch = math.inf
            break
        s_net = s0 * (zf * vm**2 + if_ * vm + pf) - s_inj
        acc = np.conj(s_net / v)
        for level in reversed(levels[1:]):  # backward: aggregate currents into parents
            np.add.at(acc, parent[level], acc[level])
        v_new = np.empty(n, dtype=complex)
        v_new[0] = head_v
        for level in levels[1:]:  # forward: apply series drops
            v_new[level] = v_new[parent[level]] - z_to_parent[level] * acc[level]
        mismatch = float(np.max(np.abs(v_new - v)))
        v = v_new
        if mismatch < tol:
            converged = True
            break

    s_head = head_v * np.conj(acc[0])
    node_v = {node_id: complex(v[idx[node_id]]) for node_id in ids}
    return PfSolution(
        node_v=node_v,
        head_p_pu=float(s_head.real),
        head_q_pu=float(s_head.imag),
        iterations=iterations,
        converged=converged,
        max_mismatch_pu=mismatch,
    )


def series_losses(feeder: Feeder, sol: PfSolution) -> complex:
    """Total complex series loss implied by a solution's node voltages."""
    total = 0.0 + 0.0j
    for br in feeder.branches:
        dv = sol.node_v[br.from_node] - sol.node_v[br.to_node]
        i = dv / br.z
        total += abs(i) ** 2 * br.z
    return complex(total)


def head_power(sol: PfSolution, base_mva_feeder: float) -> tuple[float, float]:
    """Feeder-head injection in physical units for the LoadUpdate message."""
    return (
        from_per_unit(sol.head_p_pu, base_mva_feeder),
        from_per_unit(sol.head_q_pu, base_mva_feeder),
    )


def synthesize_feeder(
    n_nodes: int,
    total_p_mw: float,
    total_q_mvar: float,
    topology_seed: int,
    der_fraction: float = 0.0,
    base_mva: float = 10.0,
    zip_fractions: tuple[float, float, float] = (0.4, 0.3, 0.3),
) -> Feeder:
    """Deterministic seeded radial feeder: trunk of ~sqrt(n) nodes plus laterals.

    Loads are spread over non-head nodes with a leaf bias and scaled so they
    sum exactly to the requested totals; ``der_fraction`` of all nodes are
    flagged as DER attachment points.  Same seed, same feeder, byte for byte.
    """
    if n_nodes < 2:
        raise ConfigurationError("synthesize_feeder needs n_nodes >= 2")
    if not 0.0 <= der_fraction <= 1.0:
        raise ConfigurationError("der_fraction must be in [0,1]")
    rng = random.Random(topology_seed)

    trunk_len = max(1, round(math.sqrt(n_nodes)))
    # keep per-branch impedance inversely proportional to trunk length so the
    # head-to-leaf drop stays a few percent at nominal loading
    r_scale = 0.03 / trunk_len

    nodes = [FeederNode(f"n{i}") for i in range(n_nodes)]
    parent_of: dict[int, int] = {}
    depth = {0: 0}
    eligible = [0]  # attachment candidates with depth < trunk_len
    for i in range(1, n_nodes):
        if i <= trunk_len:
            p = i - 1
        else:
            p = eligible[rng.randrange(len(eligible))]
        parent_of[i] = p
        depth[i] = depth[p] + 1
        if depth[i] < trunk_len:
            eligible.append(i)

    branches = []
    children = {i: 0 for i in range(n_nodes)}
    for i in range(1, n_nodes):
        children[parent_of[i]] += 1
        r = rng.uniform(0.5, 1.5) * r_scale
        x = rng.uniform(1.8, 2.2) * r
        branches.append(Branch(f"n{parent_of[i]}", f"n{i}", r, x))

    weights = []
    for i in range(1, n_nodes):
        w = rng.uniform(0.5, 1.5)
        weights.append(w)
    # leaf bias applied after the tree is known
    for j, i in enumerate(range(1, n_nodes)):
        if children[i] == 0:
            weights[j] *= 2.0
    w_sum = sum(weights)
    loads = {}
    for j, i in enumerate(range(1, n_nodes)):
        share = weights[j] / w_sum
        loads[f"n{i}"] = ZipLoad(
            p0_pu=total_p_mw * share / base_mva,
            q0_pu=total_q_mvar * share / base_mva,
            z_frac=zip_fractions[0],
            i_frac=zip_fractions[1],
            p_frac=zip_fractions[2],
        )

    n_der = round(der_fraction * n_nodes)
    der_nodes = tuple(f"n{i}" for i in sorted(rng.sample(range(1, n_nodes), n_der)))

    return Feeder(
        nodes=tuple(nodes),
        branches=tuple(branches),
        loads=loads,
        der_nodes=der_nodes,
        base_mva_feeder=base_mva,
    )


# --- JSON and CSV interfaces (schemas in docs/file-formats.md) ---

def feeder_to_dict(feeder: Feeder) -> dict:
    return {
        "schema_version": 1,
        "base_mva": feeder.base_mva_feeder,
        "nodes": [{"id": n.id, "kv": n.kv} for n in feeder.nodes],
        "branches": [
            {"from": b.from_node, "to": b.to_node, "r_pu": b.r_pu, "x_pu": b.x_pu}
            for b in feeder.branches
        ],
        "loads": {
            node: {
                "p0_pu": ld.p0_pu,
                "q0_pu": ld.q0_pu,
                "z_frac": ld.z_frac,
                "i_frac": ld.i_frac,
                "p_frac": ld.p_frac,
            }
            for node, ld in feeder.loads.items()
        },
        "der_nodes": list(feeder.der_nodes),
    }


def feeder_from_dict(d: dict) -> Feeder:
    try:
        return Feeder(
            nodes=tuple(FeederNode(n["id"], float(n.get("kv", 12.47))) for n in d["nodes"]),
            branches=tuple(
                Branch(b["from"], b["to"], float(b["r_pu"]), float(b["x_pu"]))
                for b in d["branches"]
            ),
            loads={
                node: ZipLoad(
                    p0_pu=float(ld["p0_pu"]),
                    q0_pu=float(ld["q0_pu"]),
                    z_frac=float(ld.get("z_frac", 0.0)),
                    i_frac=float(ld.get("i_frac", 0.0)),
                    p_frac=float(ld.get("p_frac", 1.0)),
                )
                for node, ld in d.get("loads", {}).items()
            },
            der_nodes=tuple(d.get("der_nodes", [])),
            base_mva_feeder=float(d.get("base_mva", 10.0)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed feeder definition: {exc}") from exc


def save_feeder(feeder: Feeder, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(feeder_to_dict(feeder), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_feeder(path: str) -> Feeder:
    with open(path, "r", encoding="utf-8") as fh:
        return feeder_from_dict(json.load(fh))


def export_solution_csv(sol: PfSolution, feeder: Feeder, path: str) -> None:
    """One row per node: voltage magnitude and angle, in feeder node order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "v_mag_pu", "v_angle_rad"])
        for node in feeder.nodes:
            v = sol.node_v[node.id]
            writer.writerow([node.id, repr(abs(v)), repr(math.atan2(v.imag, v.real))])
