"""Tests for the reference planners.

The dominance checks here run a handful of seeds with short chains so
they stay fast; the acceptance suite repeats them across the full
instance corpus with the default search budget.
"""

import pytest

from parplan import solver, synth
from parplan.baselines import (
    McmcParams,
    eval_manual,
    flat_dp,
    flatten_topology,
    mcmc_search,
)
from parplan.costs import rescore_plan
from parplan.graph import (
    LayerProfile,
    ModelGraph,
    ParallelVariant,
    Schedule,
    VariantCost,
)
from parplan.network import LevelSpec, TopologySpec, build_level_matrix

FAST = McmcParams(iterations=300, restarts=2, seed=11)


def _layer(lid, weight=1e6):
    return LayerProfile(
        layer_id=lid,
        is_embedding=False,
        weight_bytes=weight,
        optimizer_state_bytes=2 * weight,
        activation_bytes=1e4,
        boundary_activation_bytes=1e3,
        variants=(
            ParallelVariant(
                t=1, e=1, c=1, seq=False,
                cost=VariantCost(1e-3, 2e-3, weight, 1e4),
            ),
        ),
    )


def _graph(n_layers):
    return ModelGraph(
        layers=tuple(_layer(i) for i in range(n_layers)),
        global_batch=8,
        micro_batch_size=1,
        schedule=Schedule.ONE_F_ONE_B,
    )


def _nested_topo():
    return TopologySpec(
        levels=[LevelSpec(4, 900e9, 1e-6), LevelSpec(8, 25e9, 5e-6)],
        total_devices=8,
    )


def _flat_topo(n):
    return TopologySpec(levels=[LevelSpec(n, 100e9, 1e-6)], total_devices=n)


def _plan_kwargs(inst):
    return dict(
        budget=inst["budget"],
        devices=None,
        microbatch_sizes=[inst["graph"].micro_batch_size],
        replication=[inst["replication"]],
        max_stages=inst["max_stages"],
    )


class TestFlattenTopology:
    def test_single_level_with_floor_costs(self):
        topo = _nested_topo()
        flat = flatten_topology(topo)
        assert flat.num_levels == 1
        assert flat.total_devices == topo.total_devices
        lvl = flat.levels[0]
        assert lvl.capacity == topo.total_devices
        assert lvl.bandwidth_bps == topo.levels[0].bandwidth_bps
        assert lvl.alpha_s == topo.levels[0].alpha_s
        assert lvl.oversubscription == topo.levels[0].oversubscription

    def test_identity_on_flat_input(self):
        graph = _graph(4)
        topo = _flat_topo(4)
        a = flat_dp(graph, topo, budget=None, devices=None,
                    microbatch_sizes=[1], replication=[1], max_stages=4)
        b = solver.plan(graph, topo, budget=None, devices=None,
                        microbatch_sizes=[1], replication=[1], max_stages=4)
        assert a.plan is not None and b.plan is not None
        assert a.plan.to_dict() == b.plan.to_dict()


class TestDominance:
    @pytest.mark.parametrize("seed", range(6))
    def test_solver_never_loses(self, seed):
        inst = synth.random_instance(seed)
        graph, topo = inst["graph"], inst["topo"]
        kw = _plan_kwargs(inst)
        res = solver.plan(graph, topo, **kw)
        best = res.plan.t_batch_s if res.plan is not None else None

        mc = mcmc_search(
            graph, topo,
            budget=kw["budget"], devices=None,
            microbatch_sizes=kw["microbatch_sizes"],
            replication=kw["replication"],
            max_stages=kw["max_stages"], params=FAST,
        )
        if mc is not None and mc.plan is not None:
            assert best is not None and best <= mc.plan.t_batch_s

        fl = flat_dp(graph, topo, **kw)
        if fl.plan is not None:
            matrix = build_level_matrix(topo)
            rescored = rescore_plan(
                fl.plan, graph, topo, matrix,
                budget=kw["budget"], keep_levels=False,
            )
            if rescored.plan is not None:
                assert best is not None and best <= rescored.plan.t_batch_s


class TestMcmc:
    def test_deterministic_for_fixed_seed(self):
        inst = synth.random_instance(3)
        graph, topo = inst["graph"], inst["topo"]

        def run():
            return mcmc_search(
                graph, topo,
                budget=inst["budget"],
                microbatch_sizes=[graph.micro_batch_size],
                replication=[inst["replication"]],
                max_stages=inst["max_stages"],
                params=FAST,
            )

        a, b = run(), run()
        assert a is not None and b is not None
        assert a.plan.to_dict() == b.plan.to_dict()

    def test_hopeless_budget_returns_none(self):
        inst = synth.random_instance(3)
        graph = inst["graph"]
        out = mcmc_search(
            graph, inst["topo"],
            budget=8,  # eight bytes: no feasible start exists
            microbatch_sizes=[graph.micro_batch_size],
            replication=[inst["replication"]],
            max_stages=inst["max_stages"],
            params=FAST,
        )
        assert out is None

    def test_param_validation(self):
        with pytest.raises(ValueError, match="iterations"):
            McmcParams(iterations=0).validate()
        with pytest.raises(ValueError, match="restarts"):
            McmcParams(restarts=0).validate()
        with pytest.raises(ValueError, match="decay"):
            McmcParams(decay=1.5).validate()


class TestManualStrategy:
    def test_more_stages_than_layers(self):
        with pytest.raises(ValueError, match="pipeline stages"):
            eval_manual(_graph(2), _flat_topo(8), strategy={"p": 3}, budget=None)

    def test_device_overflow(self):
        with pytest.raises(ValueError, match="devices"):
            eval_manual(
                _graph(4), _flat_topo(8),
                strategy={"p": 2, "d": 2, "t": 4}, budget=None,
            )

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError, match="widths"):
            eval_manual(_graph(4), _flat_topo(8), strategy={"d": 0}, budget=None)

    def test_memory_bust_is_reported_not_repaired(self):
        score = eval_manual(
            _graph(4), _flat_topo(4),
            strategy={"p": 2, "d": 1}, budget=1.0,
        )
        assert score.plan is None
        assert score.reason == "memory"
        assert score.over_budget

    def test_missing_variant_passthrough(self):
        # The fixture layers only publish the 1x1x1 variant, so a manual
        # t=2 request cannot be priced and says so.
        score = eval_manual(
            _graph(4), _flat_topo(8),
            strategy={"p": 2, "t": 2}, budget=None,
        )
        assert score.plan is None
        assert score.reason == "variant"

    def test_feasible_tuple_round_trips(self):
        score = eval_manual(
            _graph(4), _flat_topo(8),
            strategy={"p": 2, "d": 2, "microbatch": 2}, budget=None,
        )
        assert score.plan is not None
        plan = score.plan
        assert plan.num_stages == 2
        assert plan.replication == 2
        assert plan.microbatch_size == 2
        assert plan.devices_used * plan.replication <= 8
        # Remainder layers go to the earliest stages.
        sizes = [st.stop - st.start for st in plan.stages]
        assert sizes == [2, 2]
