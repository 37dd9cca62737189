"""End-to-end tests for the command line front end.

Each test drives main() with a throwaway model/topology pair written to
tmp_path, then inspects exit codes and the files left behind. Output
bytes matter here: the determinism test compares raw file contents, not
parsed values.
"""

import csv
import json
import os

import pytest

from parplan.cli import REPORT_COLUMNS, main
from parplan.costs import PlacementPlan, rescore_plan
from parplan.graph import (
    LayerProfile,
    ModelGraph,
    ParallelVariant,
    Schedule,
    VariantCost,
    save_model_spec,
)
from parplan.network import (
    LevelSpec,
    TopologySpec,
    build_level_matrix,
    load_topology,
    save_topology,
    topology_templates,
)


def _layer(lid):
    return LayerProfile(
        layer_id=lid,
        is_embedding=False,
        weight_bytes=1e6,
        optimizer_state_bytes=2e6,
        activation_bytes=1e4,
        boundary_activation_bytes=1e3,
        variants=(
            ParallelVariant(
                t=1, e=1, c=1, seq=False,
                cost=VariantCost(1e-3, 2e-3, 1e6, 1e4),
            ),
            ParallelVariant(
                t=2, e=1, c=1, seq=False,
                cost=VariantCost(6e-4, 1.2e-3, 5e5, 6e3),
            ),
        ),
    )


@pytest.fixture
def workdir(tmp_path):
    graph = ModelGraph(
        layers=tuple(_layer(i) for i in range(4)),
        global_batch=8,
        micro_batch_size=1,
        schedule=Schedule.ONE_F_ONE_B,
    )
    topo = TopologySpec(
        levels=[LevelSpec(4, 900e9, 1e-6), LevelSpec(8, 25e9, 5e-6)],
        total_devices=8,
    )
    model_path = tmp_path / "model.json"
    topo_path = tmp_path / "topo.json"
    save_model_spec(graph, str(model_path))
    save_topology(topo, str(topo_path))
    return {
        "graph": graph,
        "topo": topo,
        "model": str(model_path),
        "topo_path": str(topo_path),
        "root": tmp_path,
    }


def _run_plan(workdir, out, extra=()):
    return main([
        "plan",
        "--model", workdir["model"],
        "--topology", workdir["topo_path"],
        "--microbatch-sizes", "1,2",
        "--out-dir", str(out),
        *extra,
    ])


class TestPlanCommand:
    def test_success_writes_outputs(self, workdir, capsys):
        out = workdir["root"] / "out"
        assert _run_plan(workdir, out) == 0
        assert sorted(os.listdir(out)) == ["plan.json", "report.csv"]
        text = capsys.readouterr().out
        assert text.startswith("{")  # strategy tuple on the first line
        assert "t_batch=" in text

    def test_plan_json_round_trips(self, workdir):
        out = workdir["root"] / "out"
        _run_plan(workdir, out)
        payload = json.loads((out / "plan.json").read_text())
        plan = PlacementPlan.from_dict(payload["best"])
        matrix = build_level_matrix(workdir["topo"])
        rescored = rescore_plan(
            plan, workdir["graph"], workdir["topo"], matrix, budget=None,
        )
        assert rescored.plan is not None
        assert rescored.plan.t_batch_s == plan.t_batch_s
        assert rescored.plan.to_dict() == payload["best"]

    def test_report_header(self, workdir):
        out = workdir["root"] / "out"
        _run_plan(workdir, out)
        with open(out / "report.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == REPORT_COLUMNS
        assert len(rows) == 3  # two microbatch sizes swept

    def test_byte_identical_reruns(self, workdir):
        out1 = workdir["root"] / "a"
        out2 = workdir["root"] / "b"
        _run_plan(workdir, out1, extra=("--seed", "7"))
        _run_plan(workdir, out2, extra=("--seed", "7", "--threads", "4"))
        for name in ("plan.json", "report.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_infeasible_returns_one(self, workdir, capsys):
        out = workdir["root"] / "out"
        rc = _run_plan(workdir, out, extra=("--budget-bytes", "64"))
        assert rc == 1
        assert "no feasible plan" in capsys.readouterr().out
        # The sweep report is still written for inspection.
        assert (out / "report.csv").exists()

    def test_missing_model_is_config_error(self, workdir, capsys):
        out = workdir["root"] / "out"
        rc = main([
            "plan",
            "--model", str(workdir["root"] / "nope.json"),
            "--topology", workdir["topo_path"],
            "--out-dir", str(out),
        ])
        assert rc == 2
        assert "error:" in capsys.readouterr().err
        assert not out.exists()  # no partial outputs

    def test_inline_topology_stanza(self, workdir):
        out = workdir["root"] / "out"
        rc = main([
            "plan",
            "--model", workdir["model"],
            "--topology", "spine_leaf:node_size=2,nodes_per_leaf=2,num_leaves=2",
            "--out-dir", str(out),
        ])
        assert rc == 0


class TestCompareCommand:
    def _run(self, workdir, out, manual="2,1,1,1,1", algos=None):
        args = [
            "compare",
            "--model", workdir["model"],
            "--topology", workdir["topo_path"],
            "--microbatch-sizes", "1",
            "--manual-strategy", manual,
            "--out-dir", str(out),
        ]
        if algos:
            args += ["--algorithms", algos]
        return main(args)

    def test_all_algorithms(self, workdir):
        out = workdir["root"] / "cmp"
        assert self._run(workdir, out) == 0
        with open(out / "compare.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["algorithm", *REPORT_COLUMNS]
        names = [r[0] for r in rows[1:]]
        assert names == ["planner", "flat", "mcmc", "manual"]

    def test_ratios_against_manual(self, workdir):
        out = workdir["root"] / "cmp"
        self._run(workdir, out)
        with open(out / "plot_data.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        by_algo = {r["algorithm"]: r for r in rows}
        assert by_algo["manual"]["ratio_vs_manual"] == "1.0"
        assert by_algo["manual"]["manual_infeasible"] == "false"
        # The exact planner is never slower than the fixed tuple.
        assert float(by_algo["planner"]["ratio_vs_manual"]) >= 1.0

    def test_infeasible_manual_flags_rows(self, workdir):
        # t=4 has no profiled variant in the fixture model.
        out = workdir["root"] / "cmp"
        assert self._run(workdir, out, manual="2,1,4,1,1") == 0
        with open(out / "plot_data.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            assert row["manual_infeasible"] == "true"
            assert row["ratio_vs_manual"] == ""

    def test_algorithm_subset(self, workdir):
        out = workdir["root"] / "cmp"
        assert self._run(workdir, out, algos="planner,flat") == 0
        with open(out / "compare.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert [r[0] for r in rows[1:]] == ["planner", "flat"]

    def test_unknown_algorithm_is_config_error(self, workdir, capsys):
        out = workdir["root"] / "cmp"
        assert self._run(workdir, out, algos="planner,magic") == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_manual_tuple_is_config_error(self, workdir):
        out = workdir["root"] / "cmp"
        assert self._run(workdir, out, manual="2,1,1") == 2


class TestTopoGen:
    @pytest.mark.parametrize("kind", topology_templates())
    def test_generates_loadable_topologies(self, kind, tmp_path, capsys):
        out = tmp_path / f"{kind}.json"
        args = ["topo-gen", "--kind", kind, "--out", str(out)]
        if kind == "torus":
            args += ["--param", "dims=4x4"]
        assert main(args) == 0
        topo = load_topology(str(out))
        assert topo.total_devices >= 2
        assert "devices" in capsys.readouterr().out

    def test_bad_param_is_config_error(self, tmp_path, capsys):
        out = tmp_path / "t.json"
        rc = main([
            "topo-gen", "--kind", "spine_leaf",
            "--param", "nonsense=1", "--out", str(out),
        ])
        assert rc == 2
        assert not out.exists()


class TestOracleCheck:
    def test_clean_suite_exits_zero(self, capsys):
        assert main(["oracle-check", "--count", "2", "--seed", "0"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_perturbed_suite_exits_nonzero(self, capsys):
        rc = main([
            "oracle-check", "--count", "2", "--seed", "0",
            "--debug-perturb", "0.25",
        ])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out
