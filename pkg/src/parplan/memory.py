"""Per-stage memory model and optimizer-state sharding escalation.

Peak device memory of a pipeline stage is an affine function of its
position: a fixed term (weights, gradients, optimizer states, working
activations) plus one stashed-activation term per in-flight microbatch.
Sharding the optimizer state, gradients, or parameters across a group of
devices divides the corresponding fixed terms; recomputation shrinks the
stash to just the stage's input. This module computes that peak, prices
the collectives each sharding level costs, and picks the cheapest
combination that fits a device budget.

All byte quantities are plain floats holding integer byte counts, so the
arithmetic here is exact for any realistic tensor size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum

from parplan.graph import Schedule, StageProfile
from parplan.network import CollectiveKind, LevelCostMatrix

logger = logging.getLogger(__name__)


class ZeroStage(IntEnum):
    """How much optimizer/model state is sharded across the group.

    Each stage shards strictly more than the previous one: optimizer
    states first, then gradients, then the parameters themselves.
    """

    NONE = 0
    OPTIMIZER = 1
    GRADIENTS = 2
    PARAMETERS = 3


@dataclass(frozen=True)
class ZeroConfig:
    """Sharding stage plus the width of the group it shards across."""

    stage: ZeroStage
    degree: int

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ValueError(f"sharding degree must be >= 1, got {self.degree}")
        if self.stage == ZeroStage.NONE and self.degree != 1:
            raise ValueError("unsharded config must have degree 1")


NO_SHARDING = ZeroConfig(ZeroStage.NONE, 1)


@dataclass(frozen=True)
class MemoryBreakdown:
    """Peak-memory accounting for one stage at one pipeline position.

    weights_term covers parameters plus the accumulated gradient buffer
    (two copies of the sharded weight bytes before any further
    sharding). stashed_count is schedule dependent: a stage s positions
    from the pipeline end holds s-1 extra microbatches under 1F1B, and
    all m in-flight microbatches under GPipe.
    """

    weights_term: float
    opt_states: float
    activations: float
    stashed_per_microbatch: float
    stashed_count: int
    peak: float


def stage_memory(
    sp: StageProfile,
    stage_pos: int,
    schedule: Schedule,
    recompute: bool,
    zero: ZeroConfig,
    micro_batches: int,
) -> MemoryBreakdown:
    """Peak bytes per device for a stage stage_pos places from the pipeline end.

    stage_pos is 1 for the last stage. Sharding divides the parameter
    copy only at the highest stage, the gradient copy from the middle
    stage up, and optimizer states at every stage.
    """
    if stage_pos < 1:
        raise ValueError(f"stage position must be >= 1, got {stage_pos}")
    if micro_batches < 1:
        raise ValueError(f"microbatch count must be >= 1, got {micro_batches}")
    deg = zero.degree
    params = sp.weight_bytes / (deg if zero.stage >= ZeroStage.PARAMETERS else 1)
    grads = sp.weight_bytes / (deg if zero.stage >= ZeroStage.GRADIENTS else 1)
    weights_term = params + grads
    opt_states = sp.opt_bytes / (deg if zero.stage >= ZeroStage.OPTIMIZER else 1)
    if recompute:
        stashed_per_mb = sp.stash_input_bytes
    else:
        stashed_per_mb = sp.stash_input_bytes + sp.act_bytes
    if schedule == Schedule.ONE_F_ONE_B:
        stashed_count = stage_pos - 1
    else:
        stashed_count = micro_batches
    peak = weights_term + opt_states + sp.act_bytes + stashed_count * stashed_per_mb
    return MemoryBreakdown(
        weights_term=weights_term,
        opt_states=opt_states,
        activations=sp.act_bytes,
        stashed_per_microbatch=stashed_per_mb,
        stashed_count=stashed_count,
        peak=peak,
    )


def recompute_latency_penalty(sp: StageProfile) -> float:
    """Extra backward-path time when the stage recomputes its forward."""
    return sp.fwd_s


def zero_overhead(
    matrix: LevelCostMatrix,
    level: int,
    zero: ZeroConfig,
    weight_bytes: float,
    opt_bytes: float,
    micro_batches: int,
) -> float:
    """Communication cost of a sharding config, in seconds per batch.

    Optimizer-state sharding costs one ReduceScatter plus one AllGather
    of the optimizer bytes per batch. Gradient sharding adds a
    ReduceScatter of the gradient bytes per batch. Parameter sharding
    adds an AllGather of the weight bytes before the forward and before
    the backward of every microbatch; at that stage gradients are
    reduced directly into their shards during backward, so the separate
    per-batch gradient pass disappears.

    level must be the tightest level whose domains hold `degree` devices.
    """
    n = zero.degree
    if zero.stage == ZeroStage.NONE or n <= 1:
        return 0.0
    total = matrix.collective_time(CollectiveKind.REDUCE_SCATTER, level, n, opt_bytes)
    total += matrix.collective_time(CollectiveKind.ALL_GATHER, level, n, opt_bytes)
    if zero.stage == ZeroStage.GRADIENTS:
        total += matrix.collective_time(CollectiveKind.REDUCE_SCATTER, level, n, weight_bytes)
    elif zero.stage == ZeroStage.PARAMETERS:
        gather = matrix.collective_time(CollectiveKind.ALL_GATHER, level, n, weight_bytes)
        total += 2.0 * micro_batches * gather
    return total


# Escalation tries the cheap options first: every sharding stage at the
# requested recompute setting, then the same ladder with recompute
# flipped. Sharding costs a few collectives per batch while recompute
# taxes every microbatch's backward pass, so at large microbatch counts
# the sharding ladder is almost always the better first resort.
_ZERO_LADDER = (
    ZeroStage.NONE,
    ZeroStage.OPTIMIZER,
    ZeroStage.GRADIENTS,
    ZeroStage.PARAMETERS,
)


def escalation_order(recompute: bool, allow_zero: bool = True) -> list[tuple[ZeroStage, bool]]:
    """The fixed (sharding stage, recompute) order escalation walks."""
    order = []
    for rec in (recompute, not recompute):
        for zstage in _ZERO_LADDER:
            if zstage != ZeroStage.NONE and not allow_zero:
                continue
            order.append((zstage, rec))
    return order


def escalate_zero(
    sp: StageProfile,
    budget: float | None,
    stage_pos: int,
    schedule: Schedule,
    micro_batches: int,
    degree: int,
    recompute: bool,
    allow_zero: bool = True,
) -> tuple[ZeroConfig, bool] | None:
    """First (sharding, recompute) pair along the ladder that fits the budget.

    Returns None when even full sharding plus recompute exceeds the
    budget, so callers can prune the state rather than raise. A budget
    of None disables the memory constraint entirely.
    """
    if budget is None:
        return NO_SHARDING, recompute
    for zstage, rec in escalation_order(recompute, allow_zero=allow_zero):
        cfg = NO_SHARDING if zstage == ZeroStage.NONE else ZeroConfig(zstage, degree)
        mem = stage_memory(sp, stage_pos, schedule, rec, cfg, micro_batches)
        if mem.peak <= budget:
            return cfg, rec
    return None


def max_feasible_position(
    sp: StageProfile,
    budget: float,
    schedule: Schedule,
    recompute: bool,
    zero: ZeroConfig,
    micro_batches: int,
) -> int:
    """Deepest pipeline position (from the end) at which the config fits.

    Under 1F1B the peak grows by one stashed microbatch per position, so
    the threshold has a closed form. Returns 0 when even the last stage
    does not fit, and a sentinel larger than any real pipeline when the
    stash term is zero (GPipe peaks are position independent).
    """
    first = stage_memory(sp, 1, schedule, recompute, zero, micro_batches)
    if first.peak > budget:
        return 0
    if schedule != Schedule.ONE_F_ONE_B or first.stashed_per_microbatch <= 0.0:
        return 1 << 30
    slack = budget - first.peak
    return 1 + int(slack / first.stashed_per_microbatch)
