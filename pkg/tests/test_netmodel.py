"""Tests for the hierarchical network model.

Collective costs are frozen against hand-computed ring-schedule values;
the structural checks pin down the validation rules that the planner
relies on (nesting, monotone level tables, oversubscription bounds).
"""

import json

import pytest
from hypothesis import given, strategies as st

from parplan.network import (
    MAX_LEVELS,
    CollectiveKind,
    LevelCostMatrix,
    LevelSpec,
    TopologyError,
    TopologySpec,
    build_level_matrix,
    gen_topology,
    load_topology,
    save_topology,
)


def _matrix(alphas, betas):
    return LevelCostMatrix(alphas=list(alphas), betas=list(betas))


class TestPointToPoint:
    def test_alpha_beta_sum(self):
        m = _matrix([2e-6, 5e-6], [5e-10, 2e-9])
        # 2e9 bytes at 2 GB/s-per-byte-cost: 1.0 s of bandwidth term.
        assert m.p2p_time(0, 2e9) == 2e-6 + 1.0
        assert m.p2p_time(1, 1e9) == 5e-6 + 2.0

    def test_zero_bytes_costs_latency_only(self):
        m = _matrix([3e-6], [1e-9])
        assert m.p2p_time(0, 0.0) == 3e-6


class TestCollectives:
    """Ring closed forms: (n-1) alpha rounds, (n-1)/n of the payload."""

    def test_allgather_four_ranks(self):
        m = _matrix([1e-6], [1e-9])
        t = m.collective_time(CollectiveKind.ALL_GATHER, 0, 4, 4e9)
        assert t == 3 * 1e-6 + (3 / 4) * 4e9 * 1e-9
        assert t == pytest.approx(3.000003, rel=1e-12)

    def test_allreduce_doubles_the_ring(self):
        m = _matrix([1e-6], [1e-9])
        ar = m.collective_time(CollectiveKind.ALL_REDUCE, 0, 4, 4e9)
        ag = m.collective_time(CollectiveKind.ALL_GATHER, 0, 4, 4e9)
        assert ar == pytest.approx(2 * ag, rel=1e-15)
        assert ar == pytest.approx(6.000006, rel=1e-12)

    def test_reducescatter_and_alltoall_match_allgather(self):
        m = _matrix([2e-6], [5e-10])
        args = (0, 8, 1e9)
        ag = m.collective_time(CollectiveKind.ALL_GATHER, *args)
        assert m.collective_time(CollectiveKind.REDUCE_SCATTER, *args) == ag
        assert m.collective_time(CollectiveKind.ALL_TO_ALL, *args) == ag

    def test_single_rank_is_free(self):
        m = _matrix([1e-6], [1e-9])
        for kind in CollectiveKind:
            assert m.collective_time(kind, 0, 1, 1e12) == 0.0

    def test_mismatched_tables_rejected(self):
        with pytest.raises(TopologyError):
            LevelCostMatrix(alphas=[1e-6, 2e-6], betas=[1e-9])


@st.composite
def monotone_matrices(draw):
    """A valid level table: alphas and betas non-decreasing outward."""
    n = draw(st.integers(min_value=1, max_value=4))
    alpha_steps = draw(
        st.lists(st.floats(0.0, 1e-4, allow_nan=False), min_size=n, max_size=n)
    )
    beta_steps = draw(
        st.lists(st.floats(0.0, 1e-8, allow_nan=False), min_size=n, max_size=n)
    )
    alphas, betas = [], []
    a = b = 0.0
    for da, db in zip(alpha_steps, beta_steps):
        a += da
        b += db
        alphas.append(a)
        betas.append(b + 1e-12)
    return _matrix(alphas, betas)


@given(
    monotone_matrices(),
    st.sampled_from(list(CollectiveKind)),
    st.integers(min_value=2, max_value=64),
    st.floats(min_value=0.0, max_value=1e12, allow_nan=False),
)
def test_collective_cost_monotone_in_level(m, kind, n, nbytes):
    costs = [m.collective_time(kind, lvl, n, nbytes) for lvl in range(len(m.alphas))]
    assert all(lo <= hi for lo, hi in zip(costs, costs[1:]))


class TestTopologySpec:
    def test_tightest_level(self):
        topo = gen_topology("spine_leaf")
        assert topo.capacities() == (8, 32, 64)
        assert topo.tightest_level(1) == 0
        assert topo.tightest_level(8) == 0
        assert topo.tightest_level(9) == 1
        assert topo.tightest_level(32) == 1
        assert topo.tightest_level(33) == 2
        assert topo.tightest_level(64) == 2
        with pytest.raises(TopologyError):
            topo.tightest_level(65)
        with pytest.raises(TopologyError):
            topo.tightest_level(0)

    def test_capacities_must_strictly_increase(self):
        with pytest.raises(TopologyError):
            TopologySpec(
                levels=[LevelSpec(8, 1e9, 1e-6), LevelSpec(8, 1e9, 2e-6)],
                total_devices=8,
            )

    def test_capacities_must_nest_evenly(self):
        with pytest.raises(TopologyError):
            TopologySpec(
                levels=[LevelSpec(3, 1e9, 1e-6), LevelSpec(8, 1e9, 2e-6)],
                total_devices=8,
            )

    def test_outermost_capacity_is_cluster_size(self):
        with pytest.raises(TopologyError):
            TopologySpec(levels=[LevelSpec(8, 1e9, 1e-6)], total_devices=16)

    def test_level_count_bounded(self):
        levels = [LevelSpec(2**i, 1e9, 1e-6 * (i + 1)) for i in range(1, MAX_LEVELS + 2)]
        with pytest.raises(TopologyError):
            TopologySpec(levels=levels, total_devices=2 ** (MAX_LEVELS + 1))

    def test_bad_level_fields(self):
        with pytest.raises(TopologyError):
            LevelSpec(0, 1e9, 1e-6).validate(0)
        with pytest.raises(TopologyError):
            LevelSpec(8, 0.0, 1e-6).validate(0)
        with pytest.raises(TopologyError):
            LevelSpec(8, 1e9, -1e-6).validate(0)
        with pytest.raises(TopologyError):
            LevelSpec(8, 1e9, 1e-6, oversubscription=0.5).validate(0)

    def test_round_trip(self):
        topo = gen_topology("spine_leaf", {"oversubscription": 3.0})
        again = TopologySpec.from_dict(topo.to_dict())
        assert again.levels == topo.levels
        assert again.total_devices == topo.total_devices


class TestLevelMatrixExtraction:
    def test_oversubscription_scales_beta(self):
        lvl = LevelSpec(64, 25e9, 1e-5, oversubscription=2.0)
        assert lvl.effective_beta == 2.0 / 25e9

    def test_spine_leaf_betas(self):
        m = build_level_matrix(gen_topology("spine_leaf"))
        assert m.betas == [1.0 / 900e9, 1.0 / 25e9, 2.0 / 25e9]
        assert m.alphas == [1e-6, 5e-6, 1e-5]

    def test_rejects_outer_level_faster_in_beta(self):
        topo = TopologySpec(
            levels=[LevelSpec(8, 50e9, 1e-6), LevelSpec(64, 900e9, 2e-6)],
            total_devices=64,
        )
        with pytest.raises(TopologyError):
            build_level_matrix(topo)

    def test_rejects_outer_level_faster_in_alpha(self):
        topo = TopologySpec(
            levels=[LevelSpec(8, 900e9, 5e-6), LevelSpec(64, 900e9, 1e-6)],
            total_devices=64,
        )
        with pytest.raises(TopologyError):
            build_level_matrix(topo)


class TestTemplates:
    def test_fat_tree_shape(self):
        topo = gen_topology("fat_tree", {"nodes": 4})
        assert topo.capacities() == (8, 32)
        assert topo.total_devices == 32

    def test_torus_4x4_has_three_affinity_levels(self):
        # Hop classes on a wraparound mesh: pairs, 2x2 blocks, the mesh.
        topo = gen_topology("torus", {"dims": [4, 4]})
        assert topo.num_levels == 3
        assert topo.capacities() == (2, 4, 16)
        m = build_level_matrix(topo)
        assert m.betas == [1.0 / 100e9, 2.0 / 100e9, 4.0 / 100e9]
        assert m.alphas == [1e-6, 2e-6, 4e-6]

    def test_torus_2x2_collapses_to_two_levels(self):
        topo = gen_topology("torus", {"dims": [2, 2]})
        assert topo.capacities() == (2, 4)

    def test_torus_rejects_degenerate_dims(self):
        with pytest.raises(TopologyError):
            gen_topology("torus", {"dims": [1, 4]})

    def test_unknown_template(self):
        with pytest.raises(TopologyError):
            gen_topology("dragonfly")


class TestSerialization:
    def test_save_load_round_trip(self, tmp_path):
        topo = gen_topology("spine_leaf")
        path = tmp_path / "topo.json"
        save_topology(topo, str(path))
        again = load_topology(str(path))
        assert again.levels == topo.levels

    def test_load_template_description(self, tmp_path):
        path = tmp_path / "torus.json"
        path.write_text(json.dumps({"template": "torus", "params": {"dims": [4, 4]}}))
        topo = load_topology(str(path))
        assert topo.capacities() == (2, 4, 16)

    def test_load_rejects_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(TopologyError):
            load_topology(str(path))

    def test_load_rejects_missing_fields(self, tmp_path):
        path = tmp_path / "incomplete.json"
        path.write_text(json.dumps({"levels": []}))
        with pytest.raises(TopologyError):
            load_topology(str(path))
