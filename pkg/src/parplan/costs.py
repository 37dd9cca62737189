"""Shared cost assembly: stage loads, gradient sync, batch-time closure.

Every consumer (the exact solver, the brute-force checker, the baseline
searchers, the CLI report writers) prices stages through the functions
in this module, in the same floating-point order, so that two paths
arriving at the same strategy produce bit-identical numbers.

A placement plan is a contiguous tiling of the layer graph into stages.
Each stage carries a parallelization variant, a state-sharding width, a
recompute flag, and the affinity level of its inbound boundary transfer.
The per-microbatch load of a stage is

    compute (+ recompute) + variant collectives + sharding overhead / m
    + inbound p2p + outbound p2p

and a batch costs ``t_stage * (m + s - 1) + sync`` under both supported
schedules, where t_stage is the bottleneck load.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from parplan.graph import (
    ModelGraph,
    ProfileError,
    Schedule,
    StageProfile,
    stage_aggregate,
)
from parplan.memory import (
    NO_SHARDING,
    ZeroConfig,
    ZeroStage,
    escalate_zero,
    recompute_latency_penalty,
    stage_memory,
    zero_overhead,
)
from parplan.network import (
    CollectiveKind,
    LevelCostMatrix,
    LevelSpec,
    TopologySpec,
)

logger = logging.getLogger(__name__)

# Sentinel for "no feasible plan at this sweep point"; the reason codes
# name the constraint that killed it.
REASON_MEMORY = "memory"
REASON_DEVICES = "devices"
REASON_VARIANT = "variant"


def collective_seconds(
    matrix: LevelCostMatrix,
    level: int,
    n_ranks: int,
    collectives: tuple[tuple[CollectiveKind, int, float], ...],
) -> float:
    """Price a stage's aggregated collective calls at one level.

    Each (kind, count, total_bytes) entry is billed as one call over the
    summed payload plus count-1 extra latency-only rounds: bandwidth
    terms are linear in bytes so summing them first is exact, while the
    startup terms repeat per call.
    """
    total = 0.0
    for kind, count, nbytes in collectives:
        if count <= 0 or n_ranks <= 1:
            continue
        total += matrix.collective_time(kind, level, n_ranks, nbytes)
        if count > 1:
            total += (count - 1) * matrix.collective_time(kind, level, n_ranks, 0.0)
    return total


def stage_load(
    matrix: LevelCostMatrix,
    topo: TopologySpec,
    sp: StageProfile,
    *,
    shard_width: int,
    zero: ZeroConfig,
    recompute: bool,
    micro_batches: int,
    in_level: int | None,
    out_level: int | None,
) -> float:
    """Per-microbatch latency of one stage, in seconds.

    in_level/out_level are affinity levels of the boundary transfers;
    None marks a pipeline endpoint with no transfer in that direction.
    Variant collectives run among the variant's ranks inside the domain
    that holds the stage's full allocation; sharding collectives run
    among shard_width ranks inside the tightest domain that holds them.
    """
    allocation = sp.width * shard_width
    t = sp.fwd_s + sp.bwd_s
    if recompute:
        t += recompute_latency_penalty(sp)
    if sp.collectives and sp.width > 1:
        stage_level = topo.tightest_level(allocation)
        t += collective_seconds(matrix, stage_level, sp.width, sp.collectives)
    if zero.stage != ZeroStage.NONE and zero.degree > 1:
        zero_level = topo.tightest_level(zero.degree)
        overhead = zero_overhead(
            matrix, zero_level, zero, sp.weight_bytes, sp.opt_bytes, micro_batches
        )
        t += overhead / micro_batches
    if in_level is not None:
        t += matrix.p2p_time(in_level, sp.stash_input_bytes)
    if out_level is not None:
        t += matrix.p2p_time(out_level, sp.p2p_out_bytes)
    return t


def grad_sync_bytes(graph: ModelGraph) -> float:
    """Gradient payload of one data-parallel sync, in bytes.

    Sums full (unsharded) weight bytes over all layers, counting tied
    embedding tables once: the largest embedding layer stands in for the
    whole tied group.
    """
    total = 0.0
    embedding = 0.0
    for layer in graph.layers:
        if layer.is_embedding:
            embedding = max(embedding, layer.weight_bytes)
        else:
            total += layer.weight_bytes
    return total + embedding


def pick_stage_config(
    matrix: LevelCostMatrix,
    topo: TopologySpec,
    sp: StageProfile,
    *,
    shard_width: int,
    budget: float | None,
    stage_pos: int,
    schedule: Schedule,
    micro_batches: int,
    recompute: bool,
    allow_zero: bool = True,
) -> tuple[ZeroConfig, bool] | None:
    """Cheapest deployable (sharding, recompute) pair for one stage slot.

    escalate_zero alone returns the memory-minimal rung, but the two
    recompute branches trade differently against sharding: recomputing
    frees stashed activations, which can hold a stage at a lower ZeRO
    rung whose collective overhead dwarfs the extra forward pass. Each
    branch contributes its own minimal rung and the cheaper stage load
    wins; the requested branch wins exact ties, keeping the choice
    deterministic. Without a budget there is nothing to trade off and
    the request passes through unchanged.
    """
    if budget is None:
        return NO_SHARDING, recompute
    best: tuple[ZeroConfig, bool] | None = None
    best_load = 0.0
    for branch in (recompute, not recompute):
        picked = escalate_zero(
            sp, budget, stage_pos, schedule, micro_batches, shard_width, branch, allow_zero
        )
        if picked is None:
            continue
        zero, rec = picked
        load = stage_load(
            matrix,
            topo,
            sp,
            shard_width=shard_width,
            zero=zero,
            recompute=rec,
            micro_batches=micro_batches,
            in_level=None,
            out_level=None,
        )
        if best is None or load < best_load:
            best, best_load = picked, load
    return best


def sync_seconds(
    matrix: LevelCostMatrix,
    topo: TopologySpec,
    replication: int,
    devices_used: int,
    grad_bytes: float,
) -> float:
    """Per-batch gradient AllReduce across replication replicas.

    The replicas pack adjacently, so the sync group spans the tightest
    domain holding all of them.
    """
    if replication <= 1:
        return 0.0
    level = topo.tightest_level(replication * devices_used)
    return matrix.collective_time(CollectiveKind.ALL_REDUCE, level, replication, grad_bytes)


def close_batch_time(t_stage: float, micro_batches: int, num_stages: int, sync_s: float) -> float:
    """Total seconds per global batch for a bottleneck-t_stage pipeline."""
    return t_stage * (micro_batches + num_stages - 1) + sync_s


def micro_batch_count(global_batch: int, replication: int, microbatch_size: int) -> int:
    """Microbatches per replica; ragged tails round up to a full one."""
    return -(-global_batch // (replication * microbatch_size))


def replica_view(
    topo: TopologySpec, matrix: LevelCostMatrix, replication: int
) -> tuple[TopologySpec, LevelCostMatrix, tuple[int, ...]] | None:
    """Topology as seen by one of `replication` congruent replicas.

    Each replica owns total/replication devices in a congruent subtree:
    levels above that size collapse away and the top surviving level is
    clipped to the replica's share. Returns None when the cluster does
    not split into congruent subtrees for this replication factor.
    """
    total = topo.total_devices
    if replication < 1 or total % replication != 0:
        return None
    share = total // replication
    kept: list[LevelSpec] = []
    level_map: list[int] = []
    for idx, lvl in enumerate(topo.levels):
        if lvl.capacity < share:
            kept.append(lvl)
            level_map.append(idx)
            continue
        kept.append(
            LevelSpec(
                capacity=share,
                bandwidth_bps=lvl.bandwidth_bps,
                alpha_s=lvl.alpha_s,
                oversubscription=lvl.oversubscription,
            )
        )
        level_map.append(idx)
        break
    for prev, nxt in zip(kept, kept[1:]):
        if nxt.capacity % prev.capacity != 0:
            return None
    sub_topo = TopologySpec(levels=tuple(kept), total_devices=share)
    sub_matrix = LevelCostMatrix(
        alphas=tuple(matrix.alphas[i] for i in level_map),
        betas=tuple(matrix.betas[i] for i in level_map),
    )
    return sub_topo, sub_matrix, tuple(level_map)


def greedy_edge_levels(capacities: tuple[int, ...], sizes: list[int]) -> list[int] | None:
    """Lowest-feasible affinity level per pipeline edge, left to right.

    Maintains, per level, the device total of the run of stages still
    connected to the current tail by edges at or below that level: a
    chain of stages linked through level-l edges must share a single
    level-l domain, so each such run is capped by the domain size.
    Returns None when some edge fits at no level.
    """
    num_levels = len(capacities)
    run = [sizes[0]] * num_levels
    levels: list[int] = []
    for a in sizes[1:]:
        chosen = -1
        for lvl in range(num_levels):
            if all(run[m] + a <= capacities[m] for m in range(lvl, num_levels)):
                chosen = lvl
                break
        if chosen < 0:
            return None
        for m in range(num_levels):
            run[m] = run[m] + a if m >= chosen else a
        levels.append(chosen)
    return levels


@dataclass(frozen=True)
class PlanStage:
    """One pipeline stage of a finished placement plan."""

    # Half-open layer range [start, stop) this stage owns.
    start: int
    stop: int
    # Parallelization variant key (t, e, c, seq) shared by its layers.
    variant: tuple[int, int, int, bool]
    # State-sharding group width; devices = variant width * shard_width.
    shard_width: int
    devices: int
    # Sharding escalation outcome and recompute choice for this stage.
    zero_stage: int
    zero_degree: int
    recompute: bool
    # Affinity level of the inbound boundary transfer (None = first stage),
    # indexed against the full cluster topology.
    in_level: int | None
    # Per-microbatch latency and peak per-device memory.
    load_s: float
    peak_bytes: float

    def to_dict(self) -> dict:
        t, e, c, seq = self.variant
        return {
            "start": self.start,
            "stop": self.stop,
            "variant": {"t": t, "e": e, "c": c, "seq": seq},
            "shard_width": self.shard_width,
            "devices": self.devices,
            "zero_stage": self.zero_stage,
            "zero_degree": self.zero_degree,
            "recompute": self.recompute,
            "in_level": self.in_level,
            "load_s": self.load_s,
            "peak_bytes": self.peak_bytes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlanStage":
        v = data["variant"]
        return cls(
            start=int(data["start"]),
            stop=int(data["stop"]),
            variant=(int(v["t"]), int(v["e"]), int(v["c"]), bool(v["seq"])),
            shard_width=int(data["shard_width"]),
            devices=int(data["devices"]),
            zero_stage=int(data["zero_stage"]),
            zero_degree=int(data["zero_degree"]),
            recompute=bool(data["recompute"]),
            in_level=None if data["in_level"] is None else int(data["in_level"]),
            load_s=float(data["load_s"]),
            peak_bytes=float(data["peak_bytes"]),
        )


@dataclass(frozen=True)
class PlacementPlan:
    """A complete scored strategy: stage tiling plus batch closure."""

    stages: tuple[PlanStage, ...]
    replication: int
    microbatch_size: int
    micro_batches: int
    devices_used: int
    schedule: str
    t_stage_s: float
    sync_s: float
    t_batch_s: float
    throughput_sps: float
    global_batch: int

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def bottleneck(self) -> PlanStage:
        """The stage whose load sets t_stage (first among ties)."""
        return max(self.stages, key=lambda st: st.load_s)

    def strategy_tuple(self) -> str:
        """Human-readable {p, d, t, s, (e, c)} summary of the bottleneck."""
        st = self.bottleneck()
        t, e, c, seq = st.variant
        seq_width = t if seq else 1
        return f"{{{self.num_stages}, {self.replication}, {t}, {seq_width}, ({e}, {c})}}"

    def to_dict(self) -> dict:
        return {
            "stages": [st.to_dict() for st in self.stages],
            "replication": self.replication,
            "microbatch_size": self.microbatch_size,
            "micro_batches": self.micro_batches,
            "devices_used": self.devices_used,
            "schedule": self.schedule,
            "t_stage_s": self.t_stage_s,
            "sync_s": self.sync_s,
            "t_batch_s": self.t_batch_s,
            "throughput_sps": self.throughput_sps,
            "global_batch": self.global_batch,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlacementPlan":
        return cls(
            stages=tuple(PlanStage.from_dict(st) for st in data["stages"]),
            replication=int(data["replication"]),
            microbatch_size=int(data["microbatch_size"]),
            micro_batches=int(data["micro_batches"]),
            devices_used=int(data["devices_used"]),
            schedule=str(data["schedule"]),
            t_stage_s=float(data["t_stage_s"]),
            sync_s=float(data["sync_s"]),
            t_batch_s=float(data["t_batch_s"]),
            throughput_sps=float(data["throughput_sps"]),
            global_batch=int(data["global_batch"]),
        )


@dataclass
class StructureScore:
    """Result of pricing an explicit stage structure."""

    plan: PlacementPlan | None
    reason: str | None = None
    # Stages that individually blew the budget (diagnostics for manual
    # strategies, which are reported rather than repaired).
    over_budget: list[int] = field(default_factory=list)


def score_structure(
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix,
    *,
    stages: list[tuple[int, int, tuple[int, int, int, bool], int]],
    replication: int = 1,
    microbatch_size: int | None = None,
    budget: float | None = None,
    recompute: bool = False,
    in_levels: list[int] | None = None,
    fixed_configs: list[tuple[ZeroConfig, bool]] | None = None,
    allow_zero: bool = True,
) -> StructureScore:
    """Price an explicit (start, stop, variant, shard_width) tiling.

    Edge levels come from in_levels (full-topology indexes) when given,
    otherwise from the greedy lowest-feasible assignment. Sharding and
    recompute per stage come from fixed_configs when given, otherwise
    each stage takes its cheaper recompute branch at minimal sharding
    (pick_stage_config); with fixed configs a busted budget marks the
    plan infeasible instead of being repaired.
    """
    mbs = graph.micro_batch_size if microbatch_size is None else microbatch_size
    view = replica_view(topo, matrix, replication)
    if view is None:
        return StructureScore(None, REASON_DEVICES)
    sub_topo, sub_matrix, level_map = view
    num_stages = len(stages)
    m = micro_batch_count(graph.global_batch, replication, mbs)

    sizes = []
    profiles: list[StageProfile] = []
    for start, stop, key, shard_width in stages:
        try:
            sp = stage_aggregate(graph, start, stop, key, mbs)
        except ProfileError:
            return StructureScore(None, REASON_VARIANT)
        profiles.append(sp)
        sizes.append(sp.width * shard_width)
    if sum(sizes) > sub_topo.total_devices:
        return StructureScore(None, REASON_DEVICES)

    if in_levels is None:
        sub_levels = greedy_edge_levels(sub_topo.capacities(), sizes)
        if sub_levels is None:
            return StructureScore(None, REASON_DEVICES)
    else:
        inverse = {orig: sub for sub, orig in enumerate(level_map)}
        sub_levels = []
        for lvl in in_levels:
            if lvl not in inverse:
                return StructureScore(None, REASON_DEVICES)
            sub_levels.append(inverse[lvl])

    plan_stages: list[PlanStage] = []
    over_budget: list[int] = []
    loads: list[float] = []
    for idx, ((start, stop, key, shard_width), sp) in enumerate(zip(stages, profiles)):
        pos = num_stages - idx
        if fixed_configs is not None:
            zero, rec = fixed_configs[idx]
        else:
            picked = pick_stage_config(
                sub_matrix,
                sub_topo,
                sp,
                shard_width=shard_width,
                budget=budget,
                stage_pos=pos,
                schedule=graph.schedule,
                micro_batches=m,
                recompute=recompute,
                allow_zero=allow_zero,
            )
            if picked is None:
                return StructureScore(None, REASON_MEMORY)
            zero, rec = picked
        mem = stage_memory(sp, pos, graph.schedule, rec, zero, m)
        if budget is not None and mem.peak > budget:
            if fixed_configs is None:
                return StructureScore(None, REASON_MEMORY)
            over_budget.append(idx)
        in_lvl = None if idx == 0 else sub_levels[idx - 1]
        out_lvl = None if idx == num_stages - 1 else sub_levels[idx]
        load = stage_load(
            sub_matrix,
            sub_topo,
            sp,
            shard_width=shard_width,
            zero=zero,
            recompute=rec,
            micro_batches=m,
            in_level=in_lvl,
            out_level=out_lvl,
        )
        loads.append(load)
        plan_stages.append(
            PlanStage(
                start=start,
                stop=stop,
                variant=key,
                shard_width=shard_width,
                devices=sizes[idx],
                zero_stage=int(zero.stage),
                zero_degree=zero.degree,
                recompute=rec,
                in_level=None if idx == 0 else level_map[sub_levels[idx - 1]],
                load_s=load,
                peak_bytes=mem.peak,
            )
        )
    if over_budget:
        return StructureScore(None, REASON_MEMORY, over_budget)

    t_stage = max(loads)
    used = sum(sizes)
    sync = sync_seconds(matrix, topo, replication, used, grad_sync_bytes(graph))
    t_batch = close_batch_time(t_stage, m, num_stages, sync)
    plan = PlacementPlan(
        stages=tuple(plan_stages),
        replication=replication,
        microbatch_size=mbs,
        micro_batches=m,
        devices_used=used,
        schedule=graph.schedule.value,
        t_stage_s=t_stage,
        sync_s=sync,
        t_batch_s=t_batch,
        throughput_sps=graph.global_batch / t_batch,
        global_batch=graph.global_batch,
    )
    return StructureScore(plan, None)


def rescore_plan(
    plan: PlacementPlan,
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix,
    *,
    budget: float | None = None,
    keep_levels: bool = True,
) -> StructureScore:
    """Reprice a stored plan's strategy under a (possibly different) network.

    With keep_levels the stored edge levels are reused, which makes a
    same-network rescore reproduce t_batch_s exactly (the round-trip
    check). Without it edges are re-assigned greedily, which is how a
    plan found under a wrong network model gets billed under the true
    one.
    """
    stages = [(st.start, st.stop, st.variant, st.shard_width) for st in plan.stages]
    fixed = [
        (
            ZeroConfig(ZeroStage(st.zero_stage), st.zero_degree),
            st.recompute,
        )
        for st in plan.stages
    ]
    in_levels = None
    if keep_levels and len(plan.stages) > 1:
        in_levels = [st.in_level for st in plan.stages[1:]]
    return score_structure(
        graph,
        topo,
        matrix,
        stages=stages,
        replication=plan.replication,
        microbatch_size=plan.microbatch_size,
        budget=budget,
        in_levels=in_levels,
        fixed_configs=fixed,
    )


def spread(loads: list[float]) -> float:
    """Relative spread (max-min)/max of per-stage loads; 0 for one stage."""
    if len(loads) <= 1:
        return 0.0
    hi = max(loads)
    lo = min(loads)
    if hi <= 0.0:
        return 0.0
    return (hi - lo) / hi
