"""Brute-force reference optimum and concrete-embedding witnesses.

This module exhaustively enumerates every placement the cost model
admits on a deliberately tiny instance: all contiguous stage tilings,
all per-stage variant and sharding-width combinations, and all per-edge
affinity-level profiles. Feasibility of a level profile is decided by
actually constructing a concrete device embedding (an exact recursive
bin packer over the domain tree), so the result is ground truth rather
than a counter approximation. Costs are priced through the exact same
functions the solver uses, so any objective disagreement isolates a
search bug instead of a pricing difference.

The enumeration is factorial in layers, devices, and levels; the guard
refuses anything beyond a handful of each.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

from parplan.costs import (
    REASON_DEVICES,
    REASON_MEMORY,
    REASON_VARIANT,
    PlacementPlan,
    close_batch_time,
    grad_sync_bytes,
    micro_batch_count,
    pick_stage_config,
    replica_view,
    score_structure,
    stage_load,
    sync_seconds,
)
from parplan.graph import ModelGraph, stage_aggregate
from parplan.network import LevelCostMatrix, TopologySpec, build_level_matrix

logger = logging.getLogger(__name__)

# Enumeration explodes beyond these; the guard names them in the error.
MAX_ORACLE_LAYERS = 6
MAX_ORACLE_DEVICES = 8
MAX_ORACLE_LEVELS = 3


class OracleError(Exception):
    """Raised when an instance is too large to enumerate exhaustively."""


@dataclass(frozen=True)
class OracleResult:
    """Outcome of an exhaustive search over one sweep point."""

    feasible: bool
    t_batch_s: float | None
    plan: PlacementPlan | None
    # Device ids per stage (replica-local) realizing the best placement.
    embedding: tuple[tuple[int, ...], ...] | None
    reason: str | None
    states_scored: int


def _split_segment(
    stages: tuple[int, ...], edges: tuple[int, ...], level: int
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Split a stage chain at every edge claimed at exactly `level`."""
    parts = []
    cur = [stages[0]]
    cur_edges: list[int] = []
    for stage, edge in zip(stages[1:], edges):
        if edge == level:
            parts.append((tuple(cur), tuple(cur_edges)))
            cur = [stage]
            cur_edges = []
        else:
            cur.append(stage)
            cur_edges.append(edge)
    parts.append((tuple(cur), tuple(cur_edges)))
    return parts


def _place_group(
    segments: list[tuple[tuple[int, ...], tuple[int, ...]]],
    level: int,
    sizes: tuple[int, ...],
    caps: tuple[int, ...],
) -> dict[int, list[int]] | None:
    """Assign domain-relative device ids to every stage of `segments`.

    All segments must fit inside one level-`level` domain. Stage chains
    linked by edges below `level` recurse into single subdomains; a
    lone stage has no co-location constraint of its own (its collectives
    are priced by group size, not by placement), so it just consumes
    capacity and may straddle subdomains.
    """
    total = sum(sizes[s] for seg in segments for s in seg[0])
    if total > caps[level]:
        return None
    if level == 0:
        out: dict[int, list[int]] = {}
        nxt = 0
        for stage_ids, _edges in segments:
            for s in stage_ids:
                out[s] = list(range(nxt, nxt + sizes[s]))
                nxt += sizes[s]
        return out

    sub_cap = caps[level - 1]
    n_bins = caps[level] // sub_cap
    units: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    atoms: list[int] = []
    for stage_ids, edges in segments:
        for part_stages, part_edges in _split_segment(stage_ids, edges, level):
            if len(part_stages) == 1:
                atoms.append(part_stages[0])
            else:
                units.append((part_stages, part_edges))

    unit_sizes = [sum(sizes[s] for s in u[0]) for u in units]

    # Backtracking assignment of units to subdomain bins. Bins are
    # interchangeable, so a unit only ever tries the first empty bin.
    bins: list[list[int]] = [[] for _ in range(n_bins)]
    bin_load = [0] * n_bins

    def materialize() -> dict[int, list[int]] | None:
        placed: dict[int, list[int]] = {}
        used_ids: set[int] = set()
        for b in range(n_bins):
            if not bins[b]:
                continue
            group = [units[u] for u in bins[b]]
            sub = _place_group(group, level - 1, sizes, caps)
            if sub is None:
                return None
            base = b * sub_cap
            for stage, ids in sub.items():
                shifted = [base + i for i in ids]
                placed[stage] = shifted
                used_ids.update(shifted)
        free = [i for i in range(caps[level]) if i not in used_ids]
        for stage in atoms:
            placed[stage] = free[: sizes[stage]]
            free = free[sizes[stage]:]
        return placed

    def assign(idx: int) -> dict[int, list[int]] | None:
        if idx == len(units):
            return materialize()
        seen_empty = False
        for b in range(n_bins):
            if not bins[b]:
                if seen_empty:
                    continue
                seen_empty = True
            if bin_load[b] + unit_sizes[idx] > sub_cap:
                continue
            bins[b].append(idx)
            bin_load[b] += unit_sizes[idx]
            result = assign(idx + 1)
            bins[b].pop()
            bin_load[b] -= unit_sizes[idx]
            if result is not None:
                return result
        return None

    return assign(0)


def pack_devices(
    sizes: tuple[int, ...], edge_levels: tuple[int, ...], caps: tuple[int, ...]
) -> list[list[int]] | None:
    """Concrete device ids per stage honoring the claimed edge levels.

    An edge claimed at level l promises that its two stages share a
    level-l domain; the constructed embedding is allowed to land them
    closer (running an edge over a cheaper link never invalidates the
    claimed price, which is an upper bound). Returns None when no
    embedding exists.
    """
    if len(edge_levels) != max(len(sizes) - 1, 0):
        raise ValueError("need one edge level per adjacent stage pair")
    top = len(caps) - 1
    segment = (tuple(range(len(sizes))), tuple(edge_levels))
    placed = _place_group([segment], top, tuple(sizes), caps)
    if placed is None:
        return None
    return [sorted(placed[i]) for i in range(len(sizes))]


def witness_for_plan(
    plan: PlacementPlan, topo: TopologySpec, matrix: LevelCostMatrix
) -> list[list[int]] | None:
    """Concrete embedding realizing a plan's claimed edge levels.

    Levels stored on the plan are full-cluster indexes; the packing runs
    on one replica's subtree. Returns None when the claim is not
    realizable, which callers must surface: it means the solver's
    capacity counter accepted a profile no embedding supports.
    """
    view = replica_view(topo, matrix, plan.replication)
    if view is None:
        return None
    sub_topo, _sub_matrix, level_map = view
    inverse = {orig: sub for sub, orig in enumerate(level_map)}
    sizes = tuple(st.devices for st in plan.stages)
    levels = []
    for st in plan.stages[1:]:
        if st.in_level not in inverse:
            return None
        levels.append(inverse[st.in_level])
    return pack_devices(sizes, tuple(levels), sub_topo.capacities())


def brute_force_optimum(
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix | None = None,
    *,
    budget: float | None = None,
    devices: int | None = None,
    microbatch_size: int | None = None,
    replication: int = 1,
    max_stages: int | None = None,
    recompute: bool = False,
    allow_zero: bool = True,
) -> OracleResult:
    """Exhaustive optimum over one (microbatch size, replication) point.

    Enumerates stage tilings x variants x sharding widths x edge-level
    profiles, prices them with the shared cost functions, and keeps the
    best by (batch time, devices used, stage count) with strict
    improvement in canonical enumeration order. Raises OracleError on
    instances beyond the hard size guard.
    """
    L = len(graph.layers)
    if L > MAX_ORACLE_LAYERS:
        raise OracleError(
            f"{L} layers exceed the enumeration guard ({MAX_ORACLE_LAYERS})"
        )
    if topo.total_devices > MAX_ORACLE_DEVICES:
        raise OracleError(
            f"{topo.total_devices} devices exceed the enumeration guard "
            f"({MAX_ORACLE_DEVICES})"
        )
    if topo.num_levels > MAX_ORACLE_LEVELS:
        raise OracleError(
            f"{topo.num_levels} levels exceed the enumeration guard "
            f"({MAX_ORACLE_LEVELS})"
        )

    if matrix is None:
        matrix = build_level_matrix(topo)
    mbs = graph.micro_batch_size if microbatch_size is None else microbatch_size

    view = replica_view(topo, matrix, replication)
    if view is None:
        return OracleResult(False, None, None, None, REASON_DEVICES, 0)
    sub_topo, sub_matrix, level_map = view
    total = topo.total_devices if devices is None else min(devices, topo.total_devices)
    k_budget = min(sub_topo.total_devices, total // replication)
    if k_budget < 1:
        return OracleResult(False, None, None, None, REASON_DEVICES, 0)
    m = micro_batch_count(graph.global_batch, replication, mbs)
    s_max = min(max_stages if max_stages is not None else L, L, k_budget)
    caps = sub_topo.capacities()
    num_levels = len(caps)
    grad_bytes = grad_sync_bytes(graph)

    agg_cache: dict = {}
    cfg_cache: dict = {}
    load_cache: dict = {}
    pack_cache: dict = {}
    sync_cache: dict = {}
    states = 0
    best_key: tuple | None = None
    best_combo: tuple | None = None
    saw_variant_tiling = False
    saw_device_fit = False

    def options_for(start: int, stop: int) -> list[tuple]:
        cached = agg_cache.get((start, stop))
        if cached is not None:
            return cached
        opts = []
        for key in graph.common_variants(start, stop):
            sp = stage_aggregate(graph, start, stop, key, mbs)
            dst = 1
            while sp.width * dst <= k_budget:
                opts.append((key, sp, dst, sp.width * dst))
                dst *= 2
        agg_cache[(start, stop)] = opts
        return opts

    def config_for(start, stop, key, sp, dst, pos):
        ck = (start, stop, key, dst, pos)
        if ck not in cfg_cache:
            cfg_cache[ck] = pick_stage_config(
                sub_matrix,
                sub_topo,
                sp,
                shard_width=dst,
                budget=budget,
                stage_pos=pos,
                schedule=graph.schedule,
                micro_batches=m,
                recompute=recompute,
                allow_zero=allow_zero,
            )
        return cfg_cache[ck]

    def load_for(start, stop, key, sp, dst, cfg, rec, in_l, out_l):
        lk = (start, stop, key, dst, int(cfg.stage), cfg.degree, rec, in_l, out_l)
        if lk not in load_cache:
            load_cache[lk] = stage_load(
                sub_matrix,
                sub_topo,
                sp,
                shard_width=dst,
                zero=cfg,
                recompute=rec,
                micro_batches=m,
                in_level=in_l,
                out_level=out_l,
            )
        return load_cache[lk]

    def packable(sizes: tuple[int, ...], prof: tuple[int, ...]) -> bool:
        pk = (sizes, prof)
        if pk not in pack_cache:
            pack_cache[pk] = pack_devices(sizes, prof, caps) is not None
        return pack_cache[pk]

    for p in range(1, s_max + 1):
        for cuts in itertools.combinations(range(1, L), p - 1):
            bounds = (0, *cuts, L)
            ranges = [(bounds[i], bounds[i + 1]) for i in range(p)]
            per_stage = [options_for(start, stop) for start, stop in ranges]
            if any(not opts for opts in per_stage):
                continue
            saw_variant_tiling = True

            # DFS over per-stage options under the device budget.
            chosen: list[tuple] = []

            def walk(idx: int, used: int) -> None:
                nonlocal states, best_key, best_combo, saw_device_fit
                if idx == p:
                    saw_device_fit = True
                    sizes = tuple(opt[3] for opt in chosen)
                    configs = []
                    for i, opt in enumerate(chosen):
                        start, stop = ranges[i]
                        picked = config_for(start, stop, opt[0], opt[1], opt[2], p - i)
                        if picked is None:
                            return
                        configs.append(picked)
                    if used not in sync_cache:
                        sync_cache[used] = sync_seconds(
                            matrix, topo, replication, used, grad_bytes
                        )
                    sync = sync_cache[used]
                    for prof in itertools.product(range(num_levels), repeat=p - 1):
                        if not packable(sizes, prof):
                            continue
                        t_stage = 0.0
                        for i, opt in enumerate(chosen):
                            start, stop = ranges[i]
                            cfg, rec = configs[i]
                            in_l = prof[i - 1] if i > 0 else None
                            out_l = prof[i] if i < p - 1 else None
                            load = load_for(
                                start, stop, opt[0], opt[1], opt[2], cfg, rec, in_l, out_l
                            )
                            if load > t_stage:
                                t_stage = load
                        t_batch = close_batch_time(t_stage, m, p, sync)
                        states += 1
                        key = (t_batch, used, p)
                        if best_key is None or key < best_key:
                            best_key = key
                            best_combo = (ranges, tuple(chosen), prof, tuple(configs))
                    return
                for opt in per_stage[idx]:
                    if used + opt[3] > k_budget:
                        continue
                    chosen.append(opt)
                    walk(idx + 1, used + opt[3])
                    chosen.pop()

            walk(0, 0)

    if best_combo is None:
        if not saw_variant_tiling:
            reason = REASON_VARIANT
        elif saw_device_fit:
            reason = REASON_MEMORY
        else:
            reason = REASON_DEVICES
        return OracleResult(False, None, None, None, reason, states)

    ranges, chosen, prof, _configs = best_combo
    stages = [
        (start, stop, opt[0], opt[2]) for (start, stop), opt in zip(ranges, chosen)
    ]
    scored = score_structure(
        graph,
        topo,
        matrix,
        stages=stages,
        replication=replication,
        microbatch_size=mbs,
        budget=budget,
        recompute=recompute,
        in_levels=[level_map[lvl] for lvl in prof],
        allow_zero=allow_zero,
    )
    if scored.plan is None:
        raise RuntimeError(
            f"best enumerated state failed rescoring: {scored.reason}"
        )
    sizes = tuple(opt[3] for opt in chosen)
    embedding = pack_devices(sizes, prof, caps)
    assert embedding is not None
    logger.debug(
        "oracle scored %d states, best t_batch %.6g", states, scored.plan.t_batch_s
    )
    return OracleResult(
        True,
        scored.plan.t_batch_s,
        scored.plan,
        tuple(tuple(ids) for ids in embedding),
        None,
        states,
    )


def check_suite(
    count: int = 100, seed: int = 0, perturb: float = 0.0, verbose: bool = False
) -> int:
    """Solver-vs-brute-force agreement over randomized small instances.

    Instance i uses seed + i; each must match in feasibility and, when
    feasible, in exact batch time. `perturb` skews the cost matrix the
    solver prices with (alphas and betas scaled by 1 + perturb) while
    brute force keeps the true one: a negative control that must fail
    loudly whenever it is nonzero. Returns the number of mismatches.
    """
    from parplan import solver, synth

    failures = 0
    for i in range(count):
        inst = synth.random_instance(seed + i)
        graph, topo = inst["graph"], inst["topo"]
        matrix = build_level_matrix(topo)
        solver_matrix = matrix
        if perturb:
            solver_matrix = LevelCostMatrix(
                alphas=tuple(a * (1.0 + perturb) for a in matrix.alphas),
                betas=tuple(b * (1.0 + perturb) for b in matrix.betas),
            )
        res = solver.plan(
            graph,
            topo,
            solver_matrix,
            budget=inst["budget"],
            replication=[inst["replication"]],
            max_stages=inst["max_stages"],
        )
        ref = brute_force_optimum(
            graph,
            topo,
            matrix,
            budget=inst["budget"],
            replication=inst["replication"],
            max_stages=inst["max_stages"],
        )
        got = res.plan.t_batch_s if res.plan is not None else None
        want = ref.t_batch_s if ref.feasible else None
        ok = got == want
        failures += 0 if ok else 1
        if verbose:
            status = "ok" if ok else "MISMATCH"
            print(
                f"seed={seed + i:<6d} solver={'-' if got is None else repr(got):<24} "
                f"oracle={'-' if want is None else repr(want):<24} {status}"
            )
    return failures
