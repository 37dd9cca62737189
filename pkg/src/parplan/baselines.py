"""Reference planners the exact solver is measured against.

All three share the solver's cost functions, so a comparison between
them is about search quality, never about scoring drift:

- flat_dp runs the identical dynamic program on a flattened view of
  the cluster that keeps only the level-0 link parameters. Compute and
  memory are modeled exactly; the network is deliberately blind to
  hierarchy. Rescoring its plan under the true level matrix shows what
  that blindness costs.
- mcmc_search is simulated annealing over the same strategy
  dimensions the solver enumerates: stage boundaries, per-stage variant
  and sharding width, replication, microbatch size, and recompute.
  Restarts are independent chains; a fixed seed reproduces the whole
  search bit for bit.
- eval_manual scores a hand-written (p, d, t, e, c) recipe the way it
  would be deployed: equal contiguous stages, no sharding escalation,
  memory shortfalls reported rather than repaired.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from typing import Mapping

from .costs import StructureScore, score_structure
from .graph import ModelGraph
from .memory import ZeroConfig, ZeroStage
from .network import LevelCostMatrix, LevelSpec, TopologySpec, build_level_matrix
from .solver import PlanResult, _shard_width_candidates, plan

logger = logging.getLogger(__name__)

VariantKey = tuple[int, int, int, bool]


def flatten_topology(topo: TopologySpec) -> TopologySpec:
    """Collapse a hierarchy to one level with the level-0 link parameters.

    Every pair of devices appears directly connected at the innermost
    link's alpha and effective bandwidth, which is exactly the picture a
    topology-unaware planner works from.
    """
    base = topo.levels[0]
    flat = LevelSpec(
        capacity=topo.total_devices,
        bandwidth_bps=base.bandwidth_bps,
        alpha_s=base.alpha_s,
        oversubscription=base.oversubscription,
    )
    return TopologySpec(levels=(flat,), total_devices=topo.total_devices)


def flat_dp(
    graph: ModelGraph,
    topo: TopologySpec,
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
) -> PlanResult:
    """Solve the placement problem as if the cluster had no hierarchy.

    Runs the exact solver on flatten_topology(topo): same transitions,
    same memory escalation, same sweep, but every transfer priced at
    level-0 cost and no packing constraints above the single level. The
    returned plan's timings are optimistic on a real hierarchy; rescore
    it under the true matrix (rescore_plan with keep_levels=False) to
    see what it actually costs.
    """
    return plan(
        graph,
        flatten_topology(topo),
        budget=budget,
        devices=devices,
        microbatch_sizes=microbatch_sizes,
        replication=replication,
        max_stages=max_stages,
        recompute=recompute,
        allow_zero=allow_zero,
        use_memory=use_memory,
        threads=threads,
    )


@dataclass(frozen=True)
class McmcParams:
    """Knobs for the annealing baseline."""

    # Proposals per chain and number of independent chains.
    iterations: int = 5000
    restarts: int = 10
    # Starting temperature; None picks 10% of the chain's initial batch
    # time so acceptance starts permissive at any problem scale.
    initial_temperature: float | None = None
    # Geometric cooling factor applied after every proposal.
    decay: float = 0.995
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.initial_temperature is not None and self.initial_temperature <= 0.0:
            raise ValueError(
                f"initial_temperature must be > 0, got {self.initial_temperature}"
            )


@dataclass(frozen=True)
class _ChainState:
    """One annealing configuration: a full strategy minus derived values."""

    # Interior layer cuts, strictly increasing; p = len(cuts) + 1 stages.
    cuts: tuple[int, ...]
    # Per stage: (variant key, sharding group width).
    variants: tuple[tuple[VariantKey, int], ...]
    replication: int
    microbatch: int
    recompute: bool

    def stage_ranges(self, num_layers: int) -> list[tuple[int, int]]:
        bounds = (0, *self.cuts, num_layers)
        return list(zip(bounds[:-1], bounds[1:]))


def _score_state(
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix,
    state: _ChainState,
    *,
    budget: float | None,
    device_cap: int,
    allow_zero: bool,
) -> tuple[float, StructureScore | None]:
    """Batch time of a chain state, inf when it is not deployable."""
    stages = []
    used = 0
    for (start, stop), (key, width) in zip(
        state.stage_ranges(graph.num_layers), state.variants
    ):
        stages.append((start, stop, key, width))
        used += graph.layers[start].variant(key).width * width
    if used * state.replication > device_cap:
        return math.inf, None
    score = score_structure(
        graph,
        topo,
        matrix,
        stages=stages,
        replication=state.replication,
        microbatch_size=state.microbatch,
        budget=budget,
        recompute=state.recompute,
        allow_zero=allow_zero,
    )
    if score.plan is None:
        return math.inf, None
    return score.plan.t_batch_s, score


def _random_state(
    rng: random.Random,
    graph: ModelGraph,
    *,
    replication: list[int],
    microbatch_sizes: list[int],
    max_stages: int,
    device_cap: int,
) -> _ChainState | None:
    """Draw one strategy uniformly-ish; None when the draw is unusable."""
    d = rng.choice(replication)
    per_replica = device_cap // d
    if per_replica < 1:
        return None
    num_layers = graph.num_layers
    num_stages = rng.randint(1, min(num_layers, max_stages))
    cuts = tuple(sorted(rng.sample(range(1, num_layers), num_stages - 1)))
    bounds = (0, *cuts, num_layers)
    variants = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        menu = graph.common_variants(start, stop)
        if not menu:
            return None
        key = rng.choice(menu)
        widths = _shard_width_candidates(
            graph.layers[start].variant(key).width, per_replica
        )
        if not widths:
            return None
        variants.append((key, rng.choice(widths)))
    return _ChainState(
        cuts=cuts,
        variants=tuple(variants),
        replication=d,
        microbatch=rng.choice(microbatch_sizes),
        recompute=rng.random() < 0.5,
    )


def _propose(
    rng: random.Random,
    state: _ChainState,
    graph: ModelGraph,
    *,
    replication: list[int],
    microbatch_sizes: list[int],
    device_cap: int,
) -> _ChainState:
    """One neighbor of `state`; returns `state` itself when the drawn
    move has no room (the chain then burns the iteration in place)."""
    num_layers = graph.num_layers
    move = rng.randrange(5)
    if move == 0 and state.cuts:
        # Shift one stage boundary by one layer.
        i = rng.randrange(len(state.cuts))
        shifted = state.cuts[i] + rng.choice((-1, 1))
        lo = state.cuts[i - 1] if i > 0 else 0
        hi = state.cuts[i + 1] if i + 1 < len(state.cuts) else num_layers
        if not lo < shifted < hi:
            return state
        cuts = state.cuts[:i] + (shifted,) + state.cuts[i + 1 :]
        bounds = (0, *cuts, num_layers)
        variants = list(state.variants)
        # The two stages sharing the moved cut changed extent; keep
        # their variants when still shared by every layer, else redraw.
        for j in (i, i + 1):
            start, stop = bounds[j], bounds[j + 1]
            key, width = variants[j]
            menu = graph.common_variants(start, stop)
            if not menu:
                return state
            if key not in menu:
                key = rng.choice(menu)
                widths = _shard_width_candidates(
                    graph.layers[start].variant(key).width,
                    device_cap // state.replication,
                )
                if not widths:
                    return state
                width = rng.choice(widths)
            variants[j] = (key, width)
        return _ChainState(
            cuts=cuts,
            variants=tuple(variants),
            replication=state.replication,
            microbatch=state.microbatch,
            recompute=state.recompute,
        )
    if move == 1:
        # Redraw one stage's variant and sharding width together.
        bounds = (0, *state.cuts, num_layers)
        j = rng.randrange(len(state.variants))
        start, stop = bounds[j], bounds[j + 1]
        menu = graph.common_variants(start, stop)
        if not menu:
            return state
        key = rng.choice(menu)
        widths = _shard_width_candidates(
            graph.layers[start].variant(key).width,
            device_cap // state.replication,
        )
        if not widths:
            return state
        variants = list(state.variants)
        variants[j] = (key, rng.choice(widths))
        return _ChainState(
            cuts=state.cuts,
            variants=tuple(variants),
            replication=state.replication,
            microbatch=state.microbatch,
            recompute=state.recompute,
        )
    if move == 2:
        return _ChainState(
            cuts=state.cuts,
            variants=state.variants,
            replication=rng.choice(replication),
            microbatch=state.microbatch,
            recompute=state.recompute,
        )
    if move == 3:
        return _ChainState(
            cuts=state.cuts,
            variants=state.variants,
            replication=state.replication,
            microbatch=rng.choice(microbatch_sizes),
            recompute=state.recompute,
        )
    return _ChainState(
        cuts=state.cuts,
        variants=state.variants,
        replication=state.replication,
        microbatch=state.microbatch,
        recompute=not state.recompute,
    )


# Feasible-start attempts before a restart gives up.
_INIT_TRIES = 100


def mcmc_search(
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix | None = None,
    *,
    budget: float | None = None,
    devices: int | None = None,
    microbatch_sizes: list[int] | None = None,
    replication: list[int] | None = None,
    max_stages: int | None = None,
    allow_zero: bool = True,
    use_memory: bool = True,
    params: McmcParams | None = None,
) -> StructureScore | None:
    """Annealed local search over full strategies, best across restarts.

    Every chain starts from a random feasible strategy and walks the
    move set {shift a boundary, redraw a stage's variant or sharding
    width, change replication, change microbatch size, toggle
    recompute}, accepting a worse neighbor with probability
    exp(-delta/T) under a geometric cooling schedule. Proposals are
    scored by the same cost functions the solver uses, so its batch
    times are directly comparable; the recompute flag feeds the shared
    per-stage config pick as a tie preference, since that pick always
    deploys the cheaper recompute branch on its own. Restart r draws from
    random.Random(seed + r); the search result is a pure function of
    its arguments.

    Returns the best-scoring StructureScore, or None when no restart
    ever found a feasible state (the instance may still be solvable;
    that is the point of comparing against an exact method).
    """
    params = params or McmcParams()
    params.validate()
    if matrix is None:
        matrix = build_level_matrix(topo)
    microbatch_sizes = microbatch_sizes or [graph.micro_batch_size]
    replication = replication or [1]
    device_cap = topo.total_devices if devices is None else min(devices, topo.total_devices)
    max_stages = graph.num_layers if max_stages is None else min(max_stages, graph.num_layers)
    if max_stages < 1:
        raise ValueError(f"max_stages must be >= 1, got {max_stages}")
    mem_budget = budget if use_memory else None

    best_t = math.inf
    best: StructureScore | None = None
    for restart in range(params.restarts):
        rng = random.Random(params.seed + restart)
        state = None
        cur_t = math.inf
        cur: StructureScore | None = None
        for _ in range(_INIT_TRIES):
            cand = _random_state(
                rng,
                graph,
                replication=replication,
                microbatch_sizes=microbatch_sizes,
                max_stages=max_stages,
                device_cap=device_cap,
            )
            if cand is None:
                continue
            cand_t, cand_score = _score_state(
                graph,
                topo,
                matrix,
                cand,
                budget=mem_budget,
                device_cap=device_cap,
                allow_zero=allow_zero,
            )
            if math.isfinite(cand_t):
                state, cur_t, cur = cand, cand_t, cand_score
                break
        if state is None:
            logger.debug("restart %d: no feasible starting state", restart)
            continue
        temp = params.initial_temperature or 0.1 * cur_t
        accepted = 0
        for _ in range(params.iterations):
            proposal = _propose(
                rng,
                state,
                graph,
                replication=replication,
                microbatch_sizes=microbatch_sizes,
                device_cap=device_cap,
            )
            new_t, new_score = _score_state(
                graph,
                topo,
                matrix,
                proposal,
                budget=mem_budget,
                device_cap=device_cap,
                allow_zero=allow_zero,
            )
            if new_t <= cur_t or (
                math.isfinite(new_t) and rng.random() < math.exp(-(new_t - cur_t) / temp)
            ):
                state, cur_t, cur = proposal, new_t, new_score
                accepted += 1
                if cur_t < best_t:
                    best_t, best = cur_t, cur
            temp *= params.decay
        logger.debug(
            "restart %d: t_batch=%.6es accepted=%d/%d",
            restart,
            cur_t,
            accepted,
            params.iterations,
        )
    if best is None:
        logger.warning(
            "annealing found no feasible strategy in %d restarts", params.restarts
        )
        return None
    logger.info("annealing best t_batch=%.6es over %d restarts", best_t, params.restarts)
    return best


def eval_manual(
    graph: ModelGraph,
    topo: TopologySpec,
    matrix: LevelCostMatrix | None = None,
    *,
    strategy: Mapping[str, object],
    budget: float | None = None,
    devices: int | None = None,
    use_memory: bool = True,
) -> StructureScore:
    """Score a hand-specified strategy tuple exactly as written.

    `strategy` maps p/d/t/e/c to widths, plus optional seq (sequence
    sharding, default False), microbatch (default the profile's), and
    recompute (default False). Layers split into p contiguous stages of
    equal size with the remainder on the earliest stages, every stage
    runs the (t, e, c, seq) variant with no sharding groups, and no
    escalation is applied: a recipe that busts the budget comes back
    with reason "memory" and the offending stages listed, never a
    silently patched plan.

    Raises ValueError when the tuple is structurally impossible: more
    stages than layers, or p*d*t*e*c devices exceeding the cluster.
    """
    if matrix is None:
        matrix = build_level_matrix(topo)
    p = int(strategy.get("p", 1))
    d = int(strategy.get("d", 1))
    t = int(strategy.get("t", 1))
    e = int(strategy.get("e", 1))
    c = int(strategy.get("c", 1))
    seq = bool(strategy.get("seq", False))
    microbatch = int(strategy.get("microbatch", graph.micro_batch_size))
    recompute = bool(strategy.get("recompute", False))
    if min(p, d, t, e, c) < 1:
        raise ValueError(f"strategy widths must be >= 1, got p={p} d={d} t={t} e={e} c={c}")
    if p > graph.num_layers:
        raise ValueError(
            f"p={p} pipeline stages need at least that many layers, "
            f"model has {graph.num_layers}"
        )
    device_cap = topo.total_devices if devices is None else min(devices, topo.total_devices)
    need = p * d * t * e * c
    if need > device_cap:
        raise ValueError(f"strategy needs {need} devices, only {device_cap} available")

    base, rem = divmod(graph.num_layers, p)
    stages = []
    start = 0
    for i in range(p):
        stop = start + base + (1 if i < rem else 0)
        stages.append((start, stop, (t, e, c, seq), 1))
        start = stop
    fixed = [(ZeroConfig(ZeroStage.NONE, 1), recompute)] * p
    return score_structure(
        graph,
        topo,
        matrix,
        stages=stages,
        replication=d,
        microbatch_size=microbatch,
        budget=budget if use_memory else None,
        recompute=recompute,
        fixed_configs=fixed,
        allow_zero=False,
    )
