"""parplan: a planner for hybrid-parallel training placements.

Given a profiled model and a hierarchical description of a cluster, the
planner searches jointly over pipeline cuts, per-stage parallelism
variants, replica placement, optimizer sharding, and recomputation, and
returns the placement with the lowest modeled batch time that fits in
device memory.
"""

from parplan.graph import (
    ModelGraph,
    LayerProfile,
    ParallelVariant,
    VariantCost,
    Schedule,
    load_model_spec,
)
from parplan.network import (
    TopologySpec,
    LevelSpec,
    LevelCostMatrix,
    CollectiveKind,
    build_level_matrix,
    gen_topology,
    load_topology,
    save_topology,
)
from parplan.memory import ZeroStage, ZeroConfig, MemoryBreakdown, stage_memory
from parplan.costs import PlacementPlan, PlanStage, close_batch_time, rescore_plan
from parplan.solver import PlanResult, plan as solve_plan
from parplan.baselines import (  # noqa: F401
    McmcParams,
    eval_manual,
    flat_dp,
    flatten_topology,
    mcmc_search,
)
from parplan.oracle import OracleResult, brute_force_optimum  # noqa: F401

__version__ = "0.1.0"
