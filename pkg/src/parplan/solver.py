"""Exact placement planning via a level-aware dynamic program.

The planner tiles the layer graph into contiguous pipeline stages,
assigns each stage a parallelization variant, a state-sharding width,
and a device allocation, and picks the affinity level of every
stage-to-stage boundary transfer. The dynamic program runs backward
over layer suffixes with state

    (assumed inbound level, suffix start, device budget, stage count)

holding the best tilings of that suffix. The inbound level is
deferred: a suffix is priced as if its first boundary transfer arrives
at the assumed level, and the transition that later prepends a stage
commits to that level when it consumes the edge.

Capacity is tracked per level as a run counter: a chain of stages
connected by edges at or below level l must share one level-l domain,
so each entry carries, per level, the device total of the maximal such
chain at the suffix head. Prepending a stage with allocation a over an
edge at level e is admitted only if a plus the counter stays within the
domain capacity at every level >= e. The counter is a necessary
condition for an embedding to exist, not a sufficient one in general
(bin-packing into sibling domains can still fail); keeping it
first-order is what keeps the table polynomial. The brute-force checker
in the oracle module packs concrete devices to cross-check the claim on
small instances.

A single entry per cell is not enough, because two suffixes can be
incomparable: one with the lower bottleneck load, the other with the
smaller run counter that alone admits a cheap low-level prepend later.
Each cell therefore keeps a small frontier of entries, lex-sorted by
(load, devices, run counters at or above the cell's level), pruned by
dominance on those same fields. Dominated entries always sort after a
dominator, so truncating the frontier to its first `frontier` slots
never drops an entry while a dominator of it is dropped. At the top
level the run counter equals devices used, the order is total, and one
slot is enough. The fill counts how often a finite entry falls off the
end of a full frontier; when that count is zero the bounded frontier
provably kept everything reachable and the solve is exact.

Ties on the full key keep the first candidate in visit order: cut
positions ascend, then variants and shard widths in menu order, then
the consumed level, then the predecessor slot. Every (devices, stages)
cell of a row replays its own candidate sequence in that canonical
order and touches no other cell of the row, so the fill is a flat loop
over independent cells: splitting it across threads cannot reorder
anything and output is byte-identical for any `threads` setting. The
cell loop is compiled with numba; the frontier stacks it maintains
live in small per-cell scratch arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from parplan.costs import (
    REASON_DEVICES,
    REASON_MEMORY,
    REASON_VARIANT,
    PlacementPlan,
    PlanStage,
    close_batch_time,
    grad_sync_bytes,
    micro_batch_count,
    replica_view,
    stage_load,
    sync_seconds,
)
from parplan.graph import ModelGraph, StageProfile, stage_aggregate
from parplan.memory import (
    NO_SHARDING,
    ZeroConfig,
    ZeroStage,
    escalation_order,
    max_feasible_position,
    stage_memory,
)
from parplan.network import LevelCostMatrix, TopologySpec, build_level_matrix

logger = logging.getLogger(__name__)

_DEFAULT_FRONTIER = 4
# Run counters are stored as int16, which caps the per-point device
# budget; topologies past this size would need a wider dtype.
_MAX_K_BUDGET = 32767


@dataclass(frozen=True)
class SweepPoint:
    """Outcome of one (microbatch size, replication) sweep point."""

    microbatch_size: int
    replication: int
    feasible: bool
    reason: str | None
    plan: PlacementPlan | None

    def log_entry(self) -> dict:
        entry = {
            "microbatch_size": self.microbatch_size,
            "replication": self.replication,
            "feasible": self.feasible,
            "reason": self.reason,
        }
        if self.plan is not None:
            entry["t_batch_s"] = self.plan.t_batch_s
            entry["devices_used"] = self.plan.devices_used
            entry["num_stages"] = self.plan.num_stages
        return entry


@dataclass
class PlanResult:
    """Best plan over the sweep plus the per-point search log."""

    plan: PlacementPlan | None
    sweep: list[SweepPoint] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.plan is not None

    def search_log(self) -> list[dict]:
        return [pt.log_entry() for pt in self.sweep]

    def to_dict(self) -> dict:
        return {
            "best": None if self.plan is None else self.plan.to_dict(),
            "sweep": self.search_log(),
        }


@dataclass
class _StageChoice:
    """One (layer range, variant, shard width) column of the transition set.

    configs holds the distinct (sharding, recompute) pairs escalation
    settles on; config_by_pos maps stage position counted from the
    pipeline end to an index into it, -1 where nothing fits the budget.
    """

    profile: StageProfile
    shard_width: int
    allocation: int
    configs: list[tuple[ZeroConfig, bool]]
    config_by_pos: np.ndarray

    def uses_sharding(self) -> bool:
        return any(cfg.stage != ZeroStage.NONE for cfg, _ in self.configs)


def _shard_width_candidates(width: int, limit: int) -> list[int]:
    """Power-of-two sharding widths whose allocation fits the budget."""
    out = []
    dst = 1
    while width * dst <= limit:
        out.append(dst)
        dst *= 2
    return out


def _schedule_configs(
    matrix: LevelCostMatrix,
    topo: TopologySpec,
    sp: StageProfile,
    budget: float | None,
    schedule,
    micro_batches: int,
    shard_width: int,
    recompute: bool,
    allow_zero: bool,
    max_positions: int,
) -> _StageChoice | None:
    """Config pick for every stage position, or None if hopeless.

    Peak memory under 1F1B is affine in the stage position, so each
    escalation rung covers positions up to a closed-form threshold. A
    position then takes the cheaper stage load between the first rung
    still covering it in each recompute branch, ties keeping the
    requested branch: the same pick pick_stage_config makes, without
    pricing every position separately.
    """
    if budget is None:
        configs = [(NO_SHARDING, recompute)]
        by_pos = np.zeros(max_positions + 1, dtype=np.int8)
        by_pos[0] = -1
        return _StageChoice(sp, shard_width, sp.width * shard_width, configs, by_pos)

    ladder: list[tuple[ZeroConfig, bool]] = []
    reach: list[int] = []
    for zstage, rec in escalation_order(recompute, allow_zero=allow_zero):
        cfg = NO_SHARDING if zstage == ZeroStage.NONE else ZeroConfig(zstage, shard_width)
        ladder.append((cfg, rec))
        reach.append(max_feasible_position(sp, budget, schedule, rec, cfg, micro_batches))
    if max(reach) < 1:
        return None

    loads: list[float | None] = [None] * len(ladder)

    def rung_load(rung: int) -> float:
        if loads[rung] is None:
            cfg, rec = ladder[rung]
            loads[rung] = stage_load(
                matrix,
                topo,
                sp,
                shard_width=shard_width,
                zero=cfg,
                recompute=rec,
                micro_batches=micro_batches,
                in_level=None,
                out_level=None,
            )
        return loads[rung]

    configs: list[tuple[ZeroConfig, bool]] = []
    seen: dict[int, int] = {}
    by_pos = np.full(max_positions + 1, -1, dtype=np.int8)
    for pos in range(1, max_positions + 1):
        pick = -1
        covered: set[bool] = set()
        for rung, top in enumerate(reach):
            rec = ladder[rung][1]
            if top < pos or rec in covered:
                continue
            covered.add(rec)
            if pick < 0 or rung_load(rung) < rung_load(pick):
                pick = rung
            if len(covered) == 2:
                break
        if pick < 0:
            continue
        if pick not in seen:
            seen[pick] = len(configs)
            configs.append(ladder[pick])
        by_pos[pos] = seen[pick]
    return _StageChoice(sp, shard_width, sp.width * shard_width, configs, by_pos)


def _plane_slots(num_levels: int, frontier: int) -> list[int]:
    """Frontier width per level plane; the top plane is totally ordered."""
    return [frontier if lvl < num_levels - 1 else 1 for lvl in range(num_levels)]


class _Tables:
    """Full DP tables for one sweep point.

    One array block indexed [plane, slot, devices, stages, row], where
    rows are suffix starts. The row axis sits innermost because a
    cell's candidate reads scan cuts at fixed (devices, stages), so
    consecutive cuts land in the same cache lines. Devices used is not
    stored separately: the run counter at the top level always equals
    it, since nothing ever resets that counter.
    """

    def __init__(
        self, num_levels: int, num_layers: int, k_budget: int, max_stages: int, frontier: int
    ):
        self.slots = _plane_slots(num_levels, frontier)
        shape = (
            num_levels,
            max(self.slots),
            k_budget + 1,
            max_stages + 1,
            num_layers + 1,
        )
        self.lat = np.full(shape, np.inf)
        self.lvl = np.zeros(shape, dtype=np.int8)
        self.cut = np.zeros(shape, dtype=np.int16)
        self.run = np.zeros(shape + (num_levels,), dtype=np.int16)
        # Empty suffix: zero stages, zero load, any leftover devices.
        self.lat[:, 0, :, 0, num_layers] = 0.0


@njit(cache=True)
def _cell_insert(lat_st, lvl_st, cut_st, run_st, wrun, p, nslots, nl, clat, clvl, ccut, crun):
    """Merge one candidate into one cell's plane-p frontier stack.

    Scalar twin of the frontier rules described in the module
    docstring: non-strict dominance on (load, run counters at or above
    p) drops the candidate, duplicates included; survivors bubble into
    lex position, evicting larger entries downward; an evictee
    dominated by the entry that displaced it dies in place. Returns 1
    when a finite entry falls off the end of a full stack, else 0. The
    counter at nl-1 doubles as the devices-used field of the key.
    """
    for f in range(nslots):
        slat = lat_st[p, f]
        if slat == np.inf:
            break
        if slat <= clat:
            dom = True
            for mu in range(p, nl):
                if run_st[p, f, mu] > crun[mu]:
                    dom = False
                    break
            if dom:
                return 0
    wlat = clat
    wlvl = clvl
    wcut = ccut
    for mu in range(nl):
        wrun[mu] = crun[mu]
    for f in range(nslots):
        slat = lat_st[p, f]
        if slat == np.inf:
            lat_st[p, f] = wlat
            lvl_st[p, f] = wlvl
            cut_st[p, f] = wcut
            for mu in range(nl):
                run_st[p, f, mu] = wrun[mu]
            return 0
        less = False
        tie = True
        if wlat < slat:
            less = True
            tie = False
        elif wlat > slat:
            tie = False
        if tie:
            cu = wrun[nl - 1]
            su = run_st[p, f, nl - 1]
            if cu < su:
                less = True
                tie = False
            elif cu > su:
                tie = False
        if tie:
            for mu in range(p, nl - 1):
                cr = wrun[mu]
                sr = run_st[p, f, mu]
                if cr < sr:
                    less = True
                    break
                if cr > sr:
                    break
        if less:
            lat_st[p, f], wlat = wlat, lat_st[p, f]
            lvl_st[p, f], wlvl = wlvl, lvl_st[p, f]
            cut_st[p, f], wcut = wcut, cut_st[p, f]
            for mu in range(nl):
                tmp = run_st[p, f, mu]
                run_st[p, f, mu] = wrun[mu]
                wrun[mu] = tmp
            if lat_st[p, f] <= wlat:
                dead = True
                for mu in range(p, nl):
                    if run_st[p, f, mu] > wrun[mu]:
                        dead = False
                        break
                if dead:
                    return 0
    return 1


@njit(cache=True, parallel=True)
def _fill_row(
    lat, lvl, cut, run, row, s_hi, n_wp,
    t_stop, t_alloc, t_cons, t_pmax, t_loads,
    caps, slots, overflow_out,
):
    """Fill all cells of one suffix-start row from the rows after it.

    Each (devices, stages) cell replays the row's transitions in
    canonical order against small local stacks, then writes its
    occupied slots back; cells never read each other, so the device
    loop parallelizes without changing any result. A consumed level of
    -1 marks the pipeline tail, which has no outbound edge: it reads
    the empty-suffix base entry and skips the run-capacity check.
    """
    nl = lat.shape[0]
    fmax = lat.shape[1]
    K1 = lat.shape[2]
    T = t_stop.shape[0]
    for k in prange(K1):
        lat_st = np.empty((nl, fmax))
        lvl_st = np.empty((nl, fmax), np.int64)
        cut_st = np.empty((nl, fmax), np.int64)
        run_st = np.empty((nl, fmax, nl), np.int64)
        nrun = np.empty(nl, np.int64)
        wrun = np.empty(nl, np.int64)
        ov = 0
        for s in range(1, s_hi + 1):
            for p in range(n_wp):
                for f in range(slots[p]):
                    lat_st[p, f] = np.inf
            sp = s - 1
            for ti in range(T):
                if s > t_pmax[ti]:
                    continue
                a = t_alloc[ti]
                if a > k:
                    continue
                kp = k - a
                c = t_cons[ti]
                stop = t_stop[ti]
                cp = c if c >= 0 else 0
                for f in range(slots[cp]):
                    plat = lat[cp, f, kp, sp, stop]
                    if plat == np.inf:
                        break
                    if c >= 0:
                        ok = True
                        for mu in range(c, nl):
                            if run[cp, f, kp, sp, stop, mu] + a > caps[mu]:
                                ok = False
                                break
                        if not ok:
                            continue
                    for mu in range(nl):
                        if c >= 0 and mu >= c:
                            nrun[mu] = run[cp, f, kp, sp, stop, mu] + a
                        else:
                            nrun[mu] = a
                    for p in range(n_wp):
                        ld = t_loads[ti, p, s]
                        clat = plat if plat >= ld else ld
                        if clat == np.inf:
                            continue
                        ov += _cell_insert(
                            lat_st, lvl_st, cut_st, run_st, wrun,
                            p, slots[p], nl, clat, cp, stop, nrun,
                        )
            for p in range(n_wp):
                for f in range(slots[p]):
                    v = lat_st[p, f]
                    if v == np.inf:
                        break
                    lat[p, f, k, s, row] = v
                    lvl[p, f, k, s, row] = lvl_st[p, f]
                    cut[p, f, k, s, row] = cut_st[p, f]
                    for mu in range(nl):
                        run[p, f, k, s, row, mu] = run_st[p, f, mu]
        overflow_out[k] = ov


class _Fill:
    """Transition generator and table filler for one sweep point."""

    def __init__(
        self,
        graph: ModelGraph,
        sub_topo: TopologySpec,
        sub_matrix: LevelCostMatrix,
        *,
        microbatch_size: int,
        budget: float | None,
        micro_batches: int,
        k_budget: int,
        max_stages: int,
        recompute: bool,
        allow_zero: bool,
        frontier: int,
        agg_cache: dict,
    ):
        if k_budget > _MAX_K_BUDGET:
            raise ValueError(
                f"device budget {k_budget} exceeds the supported maximum "
                f"of {_MAX_K_BUDGET}"
            )
        self.graph = graph
        self.topo = sub_topo
        self.matrix = sub_matrix
        self.mbs = microbatch_size
        self.budget = budget
        self.m = micro_batches
        self.k_budget = k_budget
        self.max_stages = max_stages
        self.recompute = recompute
        self.allow_zero = allow_zero
        self.frontier = frontier
        self.agg_cache = agg_cache
        self.caps = sub_topo.capacities()
        self.num_levels = sub_topo.num_levels
        self.overflow = 0
        self.tables = _Tables(
            self.num_levels, graph.num_layers, k_budget, max_stages, frontier
        )
        self._caps_arr = np.asarray(self.caps, dtype=np.int64)
        self._slots_arr = np.asarray(self.tables.slots, dtype=np.int64)
        self._overflow_by_k = np.zeros(k_budget + 1, dtype=np.int64)
        self._choice_cache: dict[tuple[int, int], list[_StageChoice]] = {}
        self._load_cache: dict[tuple, np.ndarray] = {}

    # ---- transition enumeration --------------------------------------

    def _menu(self, start: int, stop: int) -> tuple:
        """(key, StageProfile) pairs for the layer range [start, stop)."""
        cached = self.agg_cache.get((start, stop))
        if cached is None:
            cached = tuple(
                (key, stage_aggregate(self.graph, start, stop, key, self.mbs))
                for key in self.graph.common_variants(start, stop)
            )
            self.agg_cache[(start, stop)] = cached
        return cached

    def _choices(self, start: int, stop: int) -> list[_StageChoice]:
        """All admissible (variant, shard width) columns for one range."""
        cached = self._choice_cache.get((start, stop))
        if cached is not None:
            return cached
        out: list[_StageChoice] = []
        for _key, sp in self._menu(start, stop):
            for dst in _shard_width_candidates(sp.width, self.k_budget):
                choice = _schedule_configs(
                    self.matrix,
                    self.topo,
                    sp,
                    self.budget,
                    self.graph.schedule,
                    self.m,
                    dst,
                    self.recompute,
                    self.allow_zero,
                    self.max_stages,
                )
                if choice is None:
                    continue
                # A wider sharding group that never actually shards is
                # the narrow one with extra devices and an equal-or-
                # higher collective level: dominated, skip it.
                if dst > 1 and not choice.uses_sharding():
                    continue
                out.append(choice)
        self._choice_cache[(start, stop)] = out
        return out

    def _loads_by_pos(
        self, choice: _StageChoice, in_level: int | None, out_level: int | None
    ) -> np.ndarray:
        """Stage load per stage position for one (in, out) level pair."""
        sp = choice.profile
        key = (sp.start, sp.stop, sp.key, choice.shard_width, in_level, out_level)
        vec = self._load_cache.get(key)
        if vec is not None:
            return vec
        vec = np.full(self.max_stages + 1, np.inf)
        for idx, (cfg, rec) in enumerate(choice.configs):
            scalar = stage_load(
                self.matrix,
                self.topo,
                sp,
                shard_width=choice.shard_width,
                zero=cfg,
                recompute=rec,
                micro_batches=self.m,
                in_level=in_level,
                out_level=out_level,
            )
            vec[choice.config_by_pos == idx] = scalar
        self._load_cache[key] = vec
        return vec

    # ---- row fill -----------------------------------------------------

    def _in_planes(self, start: int) -> list[tuple[int, int | None]]:
        if start == 0:
            # The head stage has no inbound transfer; only plane 0 is
            # read at selection time, so only plane 0 is filled.
            return [(0, None)]
        return [(lvl, lvl) for lvl in range(self.num_levels)]

    def _row_transitions(self, start: int) -> tuple | None:
        """Flatten one row's transition menu into kernel arrays.

        One entry per (cut, choice, consumed level): device cost,
        replay cut, consumed level (-1 marks the pipeline tail, which
        has no outbound edge), the highest stage position any schedule
        config admits, and per-plane stage loads by position, with inf
        at positions the memory budget rejected.
        """
        L = self.graph.num_layers
        S1 = self.max_stages + 1
        in_planes = self._in_planes(start)
        stops: list[int] = []
        allocs: list[int] = []
        cons: list[int] = []
        pmax: list[int] = []
        loads: list[np.ndarray] = []
        for stop in range(start + 1, L + 1):
            if not self.graph.common_variants(start, stop):
                # Variant menus only shrink as the range grows.
                break
            outs = [None] if stop == L else list(range(self.num_levels))
            for choice in self._choices(start, stop):
                valid = np.nonzero(choice.config_by_pos[1:] >= 0)[0]
                if valid.size == 0:
                    continue
                # A suffix of (L - stop) layers cannot tile into more
                # stages than that, so higher positions are dead.
                top_pos = min(int(valid[-1]) + 1, L - stop + 1)
                for out in outs:
                    ld = np.full((self.num_levels, S1), np.inf)
                    for plane, in_level in in_planes:
                        ld[plane] = self._loads_by_pos(choice, in_level, out)
                    stops.append(stop)
                    allocs.append(choice.allocation)
                    cons.append(-1 if out is None else out)
                    pmax.append(top_pos)
                    loads.append(ld)
        if not stops:
            return None
        return (
            np.asarray(stops, dtype=np.int64),
            np.asarray(allocs, dtype=np.int64),
            np.asarray(cons, dtype=np.int64),
            np.asarray(pmax, dtype=np.int64),
            np.stack(loads),
        )

    def run(self) -> _Tables:
        L = self.graph.num_layers
        t = self.tables
        for start in range(L - 1, -1, -1):
            trans = self._row_transitions(start)
            if trans is None:
                continue
            t_stop, t_alloc, t_cons, t_pmax, t_loads = trans
            _fill_row(
                t.lat, t.lvl, t.cut, t.run,
                start,
                min(self.max_stages, L - start),
                1 if start == 0 else self.num_levels,
                t_stop, t_alloc, t_cons, t_pmax, t_loads,
                self._caps_arr, self._slots_arr, self._overflow_by_k,
            )
            self.overflow += int(self._overflow_by_k.sum())
        return t

    def reconstruct(
        self, num_stages: int, k_start: int | None = None, slot: int = 0
    ) -> list[tuple[_StageChoice, int, int | None]]:
        """Replay the winning transitions from one full-graph cell entry.

        Returns per-stage (choice, position, inbound level) head to
        tail. The fill stored the winning load, device count, consumed
        level, and cut per entry; replaying candidates in canonical
        order and matching those values plus the run counters
        identifies the exact transition without storing back-pointers.
        """
        t = self.tables
        out: list[tuple[_StageChoice, int, int | None]] = []
        k = self.k_budget if k_start is None else k_start
        plane, start, s, f = 0, 0, num_stages, slot
        while start < self.graph.num_layers:
            cell_lat = t.lat[plane, f, k, s, start]
            cell_run = t.run[plane, f, k, s, start]
            cell_used = int(cell_run[-1])
            consumed = int(t.lvl[plane, f, k, s, start])
            stop = int(t.cut[plane, f, k, s, start])
            in_level = None if start == 0 else plane
            match = None
            next_slot = 0
            for choice in self._choices(start, stop):
                a = choice.allocation
                if a > k or choice.config_by_pos[s] < 0:
                    continue
                if stop == self.graph.num_layers:
                    if s != 1:
                        continue
                    cand_lat = self._loads_by_pos(choice, in_level, None)[1]
                    if (
                        cand_lat == cell_lat
                        and a == cell_used
                        and np.all(cell_run == a)
                    ):
                        match = choice
                        break
                    continue
                load = self._loads_by_pos(choice, in_level, consumed)[s]
                grow = np.arange(self.num_levels) >= consumed
                for f_pred in range(t.slots[consumed]):
                    pred_lat = t.lat[consumed, f_pred, k - a, s - 1, stop]
                    if not np.isfinite(pred_lat):
                        break
                    pred_run = t.run[consumed, f_pred, k - a, s - 1, stop]
                    if any(
                        pred_run[lvl] + a > self.caps[lvl]
                        for lvl in range(consumed, self.num_levels)
                    ):
                        continue
                    cand_lat = max(pred_lat, load)
                    cand_used = int(pred_run[-1]) + a
                    cand_run = np.where(grow, pred_run.astype(np.int64) + a, a)
                    if (
                        cand_lat == cell_lat
                        and cand_used == cell_used
                        and np.array_equal(cand_run, cell_run)
                    ):
                        match = choice
                        next_slot = f_pred
                        break
                if match is not None:
                    break
            if match is None:
                raise RuntimeError(
                    f"table replay failed at cell (level={plane}, start={start}, "
                    f"devices={k}, stages={s}, slot={f}); fill and replay disagree"
                )
            out.append((match, s, in_level))
            k -= match.allocation
            plane, start, s, f = consumed, stop, s - 1, next_slot
        return out


def _variant_tiling_exists(graph: ModelGraph, max_stages: int) -> bool:
    """Can the graph tile into <= max_stages stages with shared variants?"""
    L = graph.num_layers
    INF = L + 1
    best = [0] * (L + 1)  # fewest stages covering suffix [j, L)
    for start in range(L - 1, -1, -1):
        best_here = INF
        for stop in range(start + 1, L + 1):
            if not graph.common_variants(start, stop):
                break
            if best[stop] < INF:
                best_here = min(best_here, 1 + best[stop])
        best[start] = best_here
    return best[0] <= max_stages


def plan(
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix | None = None,
    *,
    budget: float | None = None,
    devices: int | None = None,
    microbatch_sizes: list[int] | None = None,
    replication: list[int] | None = None,
    max_stages: int | None = None,
    recompute: bool = False,
    allow_zero: bool = True,
    use_memory: bool = True,
    threads: int = 1,
    frontier: int = _DEFAULT_FRONTIER,
) -> PlanResult:
    """Sweep (microbatch size, replication) and solve each point exactly.

    Returns the throughput-best plan across the sweep along with a log
    entry per point; infeasible points carry a reason code naming the
    binding constraint. Points run in ascending (microbatch,
    replication) order and ties keep the earlier point, so the result
    is reproducible run to run. `recompute` states a preference, not a
    mandate: under a budget every stage takes whichever recompute
    branch prices cheaper at its minimal sharding, and the flag only
    decides exact ties (and passes through when memory is off).
    `frontier` bounds how many incomparable entries each table cell
    retains below the top level; the default covers every instance
    small enough to brute-force check, and the fill tracks whether the
    bound ever bit.
    """
    if frontier < 1:
        raise ValueError(f"frontier must be >= 1, got {frontier}")
    if matrix is None:
        matrix = build_level_matrix(topo)
    if microbatch_sizes is None:
        microbatch_sizes = [graph.micro_batch_size]
    if replication is None:
        replication = [1]
    total = topo.total_devices if devices is None else min(devices, topo.total_devices)
    grads = grad_sync_bytes(graph)
    eff_budget = budget if use_memory else None
    numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))

    sweep: list[SweepPoint] = []
    best: PlacementPlan | None = None
    best_key = None
    agg_caches: dict[int, dict] = {}
    for mbs in sorted(set(microbatch_sizes)):
        for d in sorted(set(replication)):
            point = _solve_point(
                graph,
                topo,
                matrix,
                mbs=mbs,
                d=d,
                budget=eff_budget,
                total=total,
                max_stages=max_stages,
                recompute=recompute,
                allow_zero=allow_zero,
                grads=grads,
                frontier=frontier,
                agg_cache=agg_caches.setdefault(mbs, {}),
            )
            sweep.append(point)
            logger.debug("sweep point %s", point.log_entry())
            if point.plan is None:
                continue
            key = (
                point.plan.t_batch_s,
                point.plan.devices_used,
                point.plan.num_stages,
            )
            if best_key is None or key < best_key:
                best, best_key = point.plan, key
    if best is None:
        logger.info("no feasible plan over %d sweep points", len(sweep))
    else:
        logger.info(
            "best plan: t_batch=%.6gs, %d stages, %d devices",
            best.t_batch_s, best.num_stages, best.devices_used,
        )
    return PlanResult(plan=best, sweep=sweep)


def _solve_point(
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix,
    *,
    mbs: int,
    d: int,
    budget: float | None,
    total: int,
    max_stages: int | None,
    recompute: bool,
    allow_zero: bool,
    grads: float,
    frontier: int,
    agg_cache: dict,
) -> SweepPoint:
    view = replica_view(topo, matrix, d)
    if view is None or total // d < 1:
        return SweepPoint(mbs, d, False, REASON_DEVICES, None)
    sub_topo, sub_matrix, level_map = view
    k_budget = min(sub_topo.total_devices, total // d)
    s_cap = min(graph.num_layers, k_budget)
    s_max = s_cap if max_stages is None else min(max_stages, s_cap)
    if s_max < 1:
        return SweepPoint(mbs, d, False, REASON_DEVICES, None)
    m = micro_batch_count(graph.global_batch, d, mbs)

    fill = _Fill(
        graph,
        sub_topo,
        sub_matrix,
        microbatch_size=mbs,
        budget=budget,
        micro_batches=m,
        k_budget=k_budget,
        max_stages=s_max,
        recompute=recompute,
        allow_zero=allow_zero,
        frontier=frontier,
        agg_cache=agg_cache,
    )
    tables = fill.run()
    if fill.overflow:
        logger.debug(
            "sweep point mbs=%d d=%d: frontier saturated %d times; "
            "solve is exact within the kept entries",
            mbs, d, fill.overflow,
        )

    # The gradient sync level depends on devices actually used, so a
    # cheaper-sync structure can hide at a smaller device column or a
    # deeper frontier slot even though its bottleneck load is higher:
    # close over every entry, pricing sync from its own device count.
    lat_all = tables.lat[0, :, :, :, 0]
    used_all = tables.run[0, :, :, :, 0, -1]
    num_slots = tables.slots[0]
    sync_by_used: dict[int, float] = {}
    best_s = None
    best_k = None
    best_f = None
    best_key = None
    for s in range(1, s_max + 1):
        for k in range(1, k_budget + 1):
            for f in range(num_slots):
                lat = lat_all[f, k, s]
                if not np.isfinite(lat):
                    break
                used = int(used_all[f, k, s])
                sync = sync_by_used.get(used)
                if sync is None:
                    sync = sync_seconds(matrix, topo, d, used, grads)
                    sync_by_used[used] = sync
                t_batch = close_batch_time(float(lat), m, s, sync)
                key = (t_batch, used, s)
                if best_key is None or key < best_key:
                    best_key, best_s, best_k, best_f = key, s, k, f
    if best_s is None:
        del fill, tables, lat_all, used_all  # free before the relaxed refill
        reason = _probe_reason(
            graph, sub_topo, sub_matrix,
            mbs=mbs, budget=budget, k_budget=k_budget, max_stages=s_max,
            recompute=recompute, allow_zero=allow_zero,
            frontier=frontier, agg_cache=agg_cache, m=m,
        )
        return SweepPoint(mbs, d, False, reason, None)

    trace = fill.reconstruct(best_s, best_k, best_f)
    stages = []
    loads = []
    for idx, (choice, pos, in_level) in enumerate(trace):
        sp = choice.profile
        zero, rec = choice.configs[int(choice.config_by_pos[pos])]
        # The outbound edge level is the next stage's inbound plane.
        out_level = trace[idx + 1][2] if idx + 1 < len(trace) else None
        load = stage_load(
            sub_matrix,
            sub_topo,
            sp,
            shard_width=choice.shard_width,
            zero=zero,
            recompute=rec,
            micro_batches=m,
            in_level=in_level,
            out_level=out_level,
        )
        loads.append(load)
        mem = stage_memory(sp, pos, graph.schedule, rec, zero, m)
        stages.append(
            PlanStage(
                start=sp.start,
                stop=sp.stop,
                variant=sp.key,
                shard_width=choice.shard_width,
                devices=choice.allocation,
                zero_stage=int(zero.stage),
                zero_degree=zero.degree,
                recompute=rec,
                in_level=None if in_level is None else level_map[in_level],
                load_s=load,
                peak_bytes=mem.peak,
            )
        )
    t_stage = max(loads)
    used = sum(st.devices for st in stages)
    sync = sync_seconds(matrix, topo, d, used, grads)
    t_batch = close_batch_time(t_stage, m, len(stages), sync)
    plan_obj = PlacementPlan(
        stages=tuple(stages),
        replication=d,
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
    return SweepPoint(mbs, d, True, None, plan_obj)


def _probe_reason(
    graph: ModelGraph,
    sub_topo: TopologySpec,
    sub_matrix: LevelCostMatrix,
    *,
    mbs: int,
    budget: float | None,
    k_budget: int,
    max_stages: int,
    recompute: bool,
    allow_zero: bool,
    frontier: int,
    agg_cache: dict,
    m: int,
) -> str:
    """Name the constraint that killed an infeasible sweep point.

    Variant gaps are structural, so they are checked first; then the
    point is re-solved with the memory budget lifted. Feasible under no
    budget means memory was binding, otherwise devices were.
    """
    if not _variant_tiling_exists(graph, max_stages):
        return REASON_VARIANT
    if budget is None:
        return REASON_DEVICES
    relaxed = _Fill(
        graph,
        sub_topo,
        sub_matrix,
        microbatch_size=mbs,
        budget=None,
        micro_batches=m,
        k_budget=k_budget,
        max_stages=max_stages,
        recompute=recompute,
        allow_zero=allow_zero,
        frontier=frontier,
        agg_cache=agg_cache,
    )
    tables = relaxed.run()
    if np.isfinite(tables.lat[0, 0, k_budget, 1:, 0]).any():
        return REASON_MEMORY
    return REASON_DEVICES
