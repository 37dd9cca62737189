"""Hierarchical network model.

A cluster is described as a tree of nested domains: devices inside a node,
nodes inside a leaf switch, leaves under a spine, and so on. Every level of
that tree carries its own point-to-point latency and per-byte cost, so the
price of a transfer depends on the lowest level whose domains are large
enough to contain all participants. This module owns that abstraction: the
level table, closed-form collective costs per level, and generators for a
few common physical topologies.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

logger = logging.getLogger(__name__)

MAX_LEVELS = 5


class TopologyError(ValueError):
    """Raised when a topology description is malformed or inconsistent."""


class CollectiveKind(str, Enum):
    ALL_REDUCE = "allreduce"
    ALL_GATHER = "allgather"
    REDUCE_SCATTER = "reducescatter"
    ALL_TO_ALL = "alltoall"


@dataclass(frozen=True)
class LevelSpec:
    """One level of the communication hierarchy.

    capacity: number of devices a single domain at this level contains.
    bandwidth_bps: raw per-link bandwidth in bytes per second.
    alpha_s: one-way latency in seconds for a transfer crossing this level.
    oversubscription: ratio of subscribed to provisioned bandwidth; the
        effective per-byte cost is scaled up by this factor.
    """

    capacity: int
    bandwidth_bps: float
    alpha_s: float
    oversubscription: float = 1.0

    @property
    def effective_beta(self) -> float:
        """Seconds per byte after applying the oversubscription penalty."""
        return self.oversubscription / self.bandwidth_bps

    def validate(self, index: int) -> None:
        if self.capacity < 1:
            raise TopologyError(f"level {index}: capacity must be >= 1, got {self.capacity}")
        if self.bandwidth_bps <= 0:
            raise TopologyError(f"level {index}: bandwidth must be positive, got {self.bandwidth_bps}")
        if self.alpha_s < 0:
            raise TopologyError(f"level {index}: latency must be non-negative, got {self.alpha_s}")
        if self.oversubscription < 1.0:
            raise TopologyError(
                f"level {index}: oversubscription must be >= 1, got {self.oversubscription}"
            )


@dataclass
class TopologySpec:
    """A full cluster description as a list of nested levels.

    Level 0 is the innermost domain (devices sharing the fastest
    interconnect). Capacities must strictly increase along the list and
    each must divide the next so domains nest evenly; the outermost
    capacity equals the device count of the whole cluster.
    """

    levels: list[LevelSpec]
    total_devices: int

    def __post_init__(self) -> None:
        if not self.levels:
            raise TopologyError("topology needs at least one level")
        if len(self.levels) > MAX_LEVELS:
            raise TopologyError(
                f"at most {MAX_LEVELS} levels supported, got {len(self.levels)}"
            )
        for idx, lvl in enumerate(self.levels):
            lvl.validate(idx)
        caps = [lvl.capacity for lvl in self.levels]
        for idx in range(1, len(caps)):
            if caps[idx] <= caps[idx - 1]:
                raise TopologyError(
                    f"level capacities must strictly increase: "
                    f"level {idx} has {caps[idx]} <= level {idx - 1} capacity {caps[idx - 1]}"
                )
            if caps[idx] % caps[idx - 1] != 0:
                raise TopologyError(
                    f"level {idx} capacity {caps[idx]} does not divide evenly into "
                    f"level {idx - 1} domains of {caps[idx - 1]}"
                )
        if caps[-1] != self.total_devices:
            raise TopologyError(
                f"outermost capacity {caps[-1]} must equal total device count {self.total_devices}"
            )

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def capacity(self, level: int) -> int:
        return self.levels[level].capacity

    def capacities(self) -> tuple[int, ...]:
        return tuple(lvl.capacity for lvl in self.levels)

    def tightest_level(self, n_devices: int) -> int:
        """Lowest level whose domains can hold a group of n_devices."""
        if n_devices < 1:
            raise TopologyError(f"group size must be >= 1, got {n_devices}")
        for idx, lvl in enumerate(self.levels):
            if lvl.capacity >= n_devices:
                return idx
        raise TopologyError(
            f"group of {n_devices} exceeds the cluster size {self.total_devices}"
        )

    def to_dict(self) -> dict:
        return {
            "levels": [
                {
                    "capacity": lvl.capacity,
                    "bandwidth_Bps": lvl.bandwidth_bps,
                    "alpha_s": lvl.alpha_s,
                    "oversubscription": lvl.oversubscription,
                }
                for lvl in self.levels
            ],
            "total_devices": self.total_devices,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TopologySpec":
        try:
            raw_levels = data["levels"]
            total = int(data["total_devices"])
        except (KeyError, TypeError) as exc:
            raise TopologyError(f"missing topology field: {exc}") from exc
        levels = []
        for idx, item in enumerate(raw_levels):
            try:
                levels.append(
                    LevelSpec(
                        capacity=int(item["capacity"]),
                        bandwidth_bps=float(item["bandwidth_Bps"]),
                        alpha_s=float(item["alpha_s"]),
                        oversubscription=float(item.get("oversubscription", 1.0)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise TopologyError(f"level {idx}: {exc}") from exc
        return cls(levels=levels, total_devices=total)


@dataclass
class LevelCostMatrix:
    """Per-level alpha/beta table with closed-form collective costs.

    Both vectors must be monotone along the hierarchy: an outer level is
    never cheaper than an inner one, in latency or per-byte cost. All
    collective estimates assume ring schedules, which is what the
    standard libraries converge to for large payloads.
    """

    alphas: list[float]
    betas: list[float]

    def __post_init__(self) -> None:
        if len(self.alphas) != len(self.betas):
            raise TopologyError(
                f"alpha table has {len(self.alphas)} levels but beta table has {len(self.betas)}"
            )

    def p2p_time(self, level: int, nbytes: float) -> float:
        """Point-to-point transfer crossing the given level."""
        return self.alphas[level] + nbytes * self.betas[level]

    def collective_time(
        self, kind: CollectiveKind, level: int, n_ranks: int, nbytes: float
    ) -> float:
        """Ring-schedule cost of one collective over n_ranks at a level.

        nbytes is the full logical tensor size: the gathered result for
        allgather, the buffer being reduced for reducescatter, each
        rank's complete gradient for allreduce. A single-rank collective
        is a no-op and costs nothing.
        """
        if n_ranks <= 1:
            return 0.0
        alpha = self.alphas[level]
        beta = self.betas[level]
        steps = n_ranks - 1
        frac = steps / n_ranks
        if kind == CollectiveKind.ALL_REDUCE:
            return 2 * steps * alpha + 2 * frac * nbytes * beta
        # allgather, reducescatter and alltoall all move (n-1)/n of the
        # payload through each rank once under a ring schedule.
        return steps * alpha + frac * nbytes * beta


def build_level_matrix(topo: TopologySpec) -> LevelCostMatrix:
    """Extract the per-level cost table from a topology, checking monotonicity.

    Rejects any topology where an outer level is faster than an inner one;
    that would mean the hierarchy labels are wrong, and every placement
    conclusion drawn from them would be backwards.
    """
    alphas = [lvl.alpha_s for lvl in topo.levels]
    betas = [lvl.effective_beta for lvl in topo.levels]
    for idx in range(1, len(alphas)):
        if alphas[idx] < alphas[idx - 1]:
            raise TopologyError(
                f"latency must not decrease with level: level {idx} alpha "
                f"{alphas[idx]:g} < level {idx - 1} alpha {alphas[idx - 1]:g}"
            )
        if betas[idx] < betas[idx - 1]:
            raise TopologyError(
                f"per-byte cost must not decrease with level: level {idx} beta "
                f"{betas[idx]:g} < level {idx - 1} beta {betas[idx - 1]:g}"
            )
    return LevelCostMatrix(alphas=alphas, betas=betas)


def _hgx_node(params: dict) -> TopologySpec:
    node_size = int(params.get("node_size", 8))
    nvlink_bw = float(params.get("nvlink_bw", 900e9))
    return TopologySpec(
        levels=[LevelSpec(node_size, nvlink_bw, 1e-6)],
        total_devices=node_size,
    )


def _fat_tree(params: dict) -> TopologySpec:
    node_size = int(params.get("node_size", 8))
    nodes = int(params.get("nodes", 16))
    node_bw = float(params.get("node_bw", 900e9))
    fabric_bw = float(params.get("fabric_bw", 50e9))
    node_alpha = float(params.get("node_alpha", 1e-6))
    fabric_alpha = float(params.get("fabric_alpha", 5e-6))
    return TopologySpec(
        levels=[
            LevelSpec(node_size, node_bw, node_alpha),
            LevelSpec(node_size * nodes, fabric_bw, fabric_alpha),
        ],
        total_devices=node_size * nodes,
    )


def _spine_leaf(params: dict) -> TopologySpec:
    node_size = int(params.get("node_size", 8))
    nodes_per_leaf = int(params.get("nodes_per_leaf", 4))
    num_leaves = int(params.get("num_leaves", 2))
    node_bw = float(params.get("node_bw", 900e9))
    leaf_bw = float(params.get("leaf_bw", 25e9))
    spine_bw = float(params.get("spine_bw", leaf_bw))
    oversub = float(params.get("oversubscription", 2.0))
    node_alpha = float(params.get("node_alpha", 1e-6))
    leaf_alpha = float(params.get("leaf_alpha", 5e-6))
    spine_alpha = float(params.get("spine_alpha", 1e-5))
    leaf_cap = node_size * nodes_per_leaf
    total = leaf_cap * num_leaves
    return TopologySpec(
        levels=[
            LevelSpec(node_size, node_bw, node_alpha),
            LevelSpec(leaf_cap, leaf_bw, leaf_alpha),
            LevelSpec(total, spine_bw, spine_alpha, oversubscription=oversub),
        ],
        total_devices=total,
    )


def _torus(params: dict) -> TopologySpec:
    # A wraparound mesh has no switch hierarchy, but hop distance still
    # stratifies it: pairs along the first axis are one hop apart, 2x2
    # blocks stay within two hops, and the whole mesh is bounded by the
    # sum of the ring radii. Each hop class becomes an affinity level
    # whose per-byte cost scales with its hop bound, so a 4x4 torus
    # yields three levels (2, 4, 16 devices).
    dims = [int(d) for d in params.get("dims", [4, 4])]
    link_bw = float(params.get("link_bw", 100e9))
    hop_alpha = float(params.get("hop_alpha", 1e-6))
    if not dims or any(d < 2 for d in dims):
        raise TopologyError(f"torus dims must all be >= 2, got {dims}")
    total = 1
    for d in dims:
        total *= d
    levels = []
    for i in range(len(dims)):
        cap = 2 ** (i + 1)
        hops = i + 1
        levels.append(LevelSpec(cap, link_bw / hops, hop_alpha * hops))
    max_hops = sum(d // 2 for d in dims)
    if total > levels[-1].capacity:
        levels.append(LevelSpec(total, link_bw / max_hops, hop_alpha * max_hops))
    return TopologySpec(levels=levels, total_devices=total)


_TEMPLATES = {
    "hgx_node": _hgx_node,
    "fat_tree": _fat_tree,
    "spine_leaf": _spine_leaf,
    "torus": _torus,
}

_TEMPLATE_PARAMS = {
    "hgx_node": frozenset({"node_size", "nvlink_bw"}),
    "fat_tree": frozenset({
        "node_size", "nodes", "node_bw", "fabric_bw", "node_alpha", "fabric_alpha",
    }),
    "spine_leaf": frozenset({
        "node_size", "nodes_per_leaf", "num_leaves", "node_bw", "leaf_bw",
        "spine_bw", "oversubscription", "node_alpha", "leaf_alpha", "spine_alpha",
    }),
    "torus": frozenset({"dims", "link_bw", "hop_alpha"}),
}


def topology_templates() -> tuple[str, ...]:
    """Names accepted by gen_topology, for CLI choices and messages."""
    return tuple(sorted(_TEMPLATES))


def gen_topology(template: str, params: dict | None = None) -> TopologySpec:
    """Instantiate a named topology template with override parameters."""
    if template not in _TEMPLATES:
        raise TopologyError(
            f"unknown topology template {template!r}; choose from {sorted(_TEMPLATES)}"
        )
    params = params or {}
    unknown = set(params) - _TEMPLATE_PARAMS[template]
    if unknown:
        raise TopologyError(
            f"{template} does not take {sorted(unknown)}; "
            f"known parameters: {sorted(_TEMPLATE_PARAMS[template])}"
        )
    return _TEMPLATES[template](params)


def load_topology(path: str) -> TopologySpec:
    """Read a topology from JSON, either explicit levels or a template."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TopologyError(f"{path}: invalid JSON: {exc}") from exc
    if "template" in data:
        return gen_topology(data["template"], data.get("params"))
    try:
        return TopologySpec.from_dict(data)
    except TopologyError as exc:
        raise TopologyError(f"{path}: {exc}") from exc


def save_topology(topo: TopologySpec, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(topo.to_dict(), fh, indent=2)
        fh.write("\n")
