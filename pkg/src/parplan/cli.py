"""Command-line front end: plan, compare, topo-gen, oracle-check.

Every run is a pure function of (inputs, seed): outputs are written
with sorted keys and full-precision floats so repeated runs produce
byte-identical files. All computation happens before the first byte is
written, so a failing run leaves no partial outputs behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import os
import sys
from dataclasses import dataclass

from parplan import baselines, oracle, solver
from parplan.costs import PlacementPlan, rescore_plan
from parplan.graph import ModelGraph, ProfileError, load_model_spec
from parplan.network import (
    TopologyError,
    TopologySpec,
    build_level_matrix,
    gen_topology,
    load_topology,
    save_topology,
    topology_templates,
)

logger = logging.getLogger(__name__)

_ALGORITHMS = ("planner", "flat", "mcmc", "manual")

REPORT_COLUMNS = [
    "microbatch",
    "d",
    "p",
    "t",
    "e",
    "c",
    "zero_stage",
    "recompute",
    "t_batch_s",
    "throughput_sps",
    "peak_mem_bytes",
    "feasible",
    "reason",
]


class ConfigError(ValueError):
    """A CLI input that cannot be acted on, with the reason spelled out."""


@dataclass
class RunConfig:
    """Everything a planning run needs, resolved from flags."""

    graph: ModelGraph
    topo: TopologySpec
    budget: float | None
    devices: int | None
    microbatch_sizes: list[int]
    replication: list[int]
    max_stages: int | None
    seed: int
    out_dir: str
    use_memory: bool
    allow_zero: bool
    threads: int


# ---- topology resolution ---------------------------------------------------


def _coerce(value: str):
    """Best-effort typing for key=value parameters; AxB means a dim list."""
    if re.fullmatch(r"\d+(x\d+)+", value):
        return [int(v) for v in value.split("x")]
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def _generate_topology(kind: str, params: dict) -> TopologySpec:
    try:
        return gen_topology(kind, params)
    except (TopologyError, TypeError, ValueError) as err:
        raise ConfigError(f"cannot generate topology {kind!r}: {err}") from None


def _resolve_topology(spec: str) -> TopologySpec:
    """A --topology value is a file path or a `kind:key=val,...` stanza."""
    if os.path.exists(spec):
        try:
            return load_topology(spec)
        except TopologyError as err:
            raise ConfigError(str(err)) from None
    if ":" in spec or spec in topology_templates():
        kind, _, rest = spec.partition(":")
        params = {}
        for item in rest.split(","):
            if not item:
                continue
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"bad stanza parameter {item!r}, expected key=value")
            params[key] = _coerce(val)
        return _generate_topology(kind, params)
    raise ConfigError(f"topology file not found: {spec}")


# ---- shared row shaping --------------------------------------------------


def _fmt(value) -> str:
    """Full-precision, deterministic text for one CSV cell."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _plan_row(mbs: int, plan: PlacementPlan | None, reason: str | None, d: int | None = None) -> dict:
    """One report row; empty strategy columns when the point failed."""
    if plan is None:
        return {
            "microbatch": mbs,
            "d": d,
            "p": None,
            "t": None,
            "e": None,
            "c": None,
            "zero_stage": None,
            "recompute": None,
            "t_batch_s": None,
            "throughput_sps": None,
            "peak_mem_bytes": None,
            "feasible": False,
            "reason": reason,
        }
    bott = plan.bottleneck()
    t, e, c, _seq = bott.variant
    return {
        "microbatch": plan.microbatch_size,
        "d": plan.replication,
        "p": plan.num_stages,
        "t": t,
        "e": e,
        "c": c,
        "zero_stage": max(st.zero_stage for st in plan.stages),
        "recompute": any(st.recompute for st in plan.stages),
        "t_batch_s": plan.t_batch_s,
        "throughput_sps": plan.throughput_sps,
        "peak_mem_bytes": max(st.peak_bytes for st in plan.stages),
        "feasible": True,
        "reason": None,
    }


def _write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in columns])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---- subcommands ---------------------------------------------------------


def _load_config(args) -> RunConfig:
    try:
        graph = load_model_spec(args.model)
    except FileNotFoundError:
        raise ConfigError(f"model profile not found: {args.model}") from None
    except (ProfileError, ValueError, KeyError) as err:
        raise ConfigError(f"bad model profile {args.model}: {err}") from None
    topo = _resolve_topology(args.topology)
    budget = args.budget_bytes
    if budget is not None and budget <= 0:
        raise ConfigError(f"--budget-bytes must be > 0, got {budget}")
    mbs = args.microbatch_sizes or [graph.micro_batch_size]
    reps = args.replication or [1]
    if any(v < 1 for v in mbs) or any(v < 1 for v in reps):
        raise ConfigError("microbatch sizes and replication factors must be >= 1")
    return RunConfig(
        graph=graph,
        topo=topo,
        budget=budget,
        devices=args.devices,
        microbatch_sizes=mbs,
        replication=reps,
        max_stages=args.max_stages,
        seed=args.seed,
        out_dir=args.out_dir,
        use_memory=not args.no_mem,
        allow_zero=not getattr(args, "no_zero", False),
        threads=args.threads,
    )


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    result = solver.plan(
        cfg.graph,
        cfg.topo,
        budget=cfg.budget,
        devices=cfg.devices,
        microbatch_sizes=cfg.microbatch_sizes,
        replication=cfg.replication,
        max_stages=cfg.max_stages,
        allow_zero=cfg.allow_zero,
        use_memory=cfg.use_memory,
        threads=cfg.threads,
    )
    payload = {
        "best": None if result.plan is None else result.plan.to_dict(),
        "strategy": None if result.plan is None else result.plan.strategy_tuple(),
        "candidates": [
            None if pt.plan is None else pt.plan.to_dict() for pt in result.sweep
        ],
        "search_log": result.search_log(),
        "config": {
            "seed": cfg.seed,
            "budget_bytes": cfg.budget,
            "devices": cfg.devices,
            "microbatch_sizes": sorted(set(cfg.microbatch_sizes)),
            "replication": sorted(set(cfg.replication)),
            "max_stages": cfg.max_stages,
            "use_memory": cfg.use_memory,
            "allow_zero": cfg.allow_zero,
        },
    }
    rows = [
        _plan_row(pt.microbatch_size, pt.plan, pt.reason, d=pt.replication)
        for pt in result.sweep
    ]

    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_json(os.path.join(cfg.out_dir, "plan.json"), payload)
    _write_csv(os.path.join(cfg.out_dir, "report.csv"), REPORT_COLUMNS, rows)
    if result.plan is None:
        reasons = {pt.reason for pt in result.sweep if pt.reason}
        print(f"no feasible plan (binding constraints: {sorted(reasons)})")
        return 1
    print(result.plan.strategy_tuple())
    print(
        f"t_batch={result.plan.t_batch_s:.6e}s "
        f"throughput={result.plan.throughput_sps:.3f} samples/s "
        f"devices={result.plan.devices_used * result.plan.replication}"
    )
    return 0


def _parse_manual(raw: str) -> dict:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 5:
        raise ConfigError(
            f"--manual-strategy expects 5 integers p,d,t,e,c; got {raw!r}"
        )
    try:
        p, d, t, e, c = (int(v) for v in parts)
    except ValueError:
        raise ConfigError(f"--manual-strategy parts must be integers: {raw!r}") from None
    return {"p": p, "d": d, "t": t, "e": e, "c": c}


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    algos = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    for a in algos:
        if a not in _ALGORITHMS:
            raise ConfigError(f"unknown algorithm {a!r}; choose from {_ALGORITHMS}")
    manual = _parse_manual(args.manual_strategy) if args.manual_strategy else None
    if "manual" in algos and manual is None:
        raise ConfigError("--manual-strategy is required when comparing `manual`")
    matrix = build_level_matrix(cfg.topo)
    mem_budget = cfg.budget if cfg.use_memory else None

    rows: list[dict] = []
    throughput: dict[tuple[str, int], float | None] = {}
    for mbs in sorted(set(cfg.microbatch_sizes)):
        for algo in algos:
            plan_obj: PlacementPlan | None = None
            reason: str | None = None
            fixed_d: int | None = None
            if algo == "planner":
                res = solver.plan(
                    cfg.graph, cfg.topo, matrix,
                    budget=cfg.budget, devices=cfg.devices,
                    microbatch_sizes=[mbs], replication=cfg.replication,
                    max_stages=cfg.max_stages, allow_zero=cfg.allow_zero,
                    use_memory=cfg.use_memory, threads=cfg.threads,
                )
                plan_obj = res.plan
                if plan_obj is None:
                    reasons = {pt.reason for pt in res.sweep if pt.reason}
                    reason = ",".join(sorted(reasons)) or "infeasible"
            elif algo == "flat":
                res = baselines.flat_dp(
                    cfg.graph, cfg.topo,
                    budget=cfg.budget, devices=cfg.devices,
                    microbatch_sizes=[mbs], replication=cfg.replication,
                    max_stages=cfg.max_stages, allow_zero=cfg.allow_zero,
                    use_memory=cfg.use_memory, threads=cfg.threads,
                )
                if res.plan is None:
                    reasons = {pt.reason for pt in res.sweep if pt.reason}
                    reason = ",".join(sorted(reasons)) or "infeasible"
                else:
                    rescored = rescore_plan(
                        res.plan, cfg.graph, cfg.topo, matrix,
                        budget=mem_budget, keep_levels=False,
                    )
                    plan_obj = rescored.plan
                    reason = rescored.reason
            elif algo == "mcmc":
                score = baselines.mcmc_search(
                    cfg.graph, cfg.topo, matrix,
                    budget=cfg.budget, devices=cfg.devices,
                    microbatch_sizes=[mbs], replication=cfg.replication,
                    max_stages=cfg.max_stages, allow_zero=cfg.allow_zero,
                    use_memory=cfg.use_memory,
                    params=baselines.McmcParams(seed=cfg.seed),
                )
                if score is None:
                    reason = "no feasible state"
                else:
                    plan_obj = score.plan
            else:
                fixed_d = manual["d"]
                try:
                    score = baselines.eval_manual(
                        cfg.graph, cfg.topo, matrix,
                        strategy={**manual, "microbatch": mbs},
                        budget=cfg.budget, devices=cfg.devices,
                        use_memory=cfg.use_memory,
                    )
                except ValueError as err:
                    raise ConfigError(f"manual strategy invalid: {err}") from None
                plan_obj = score.plan
                if plan_obj is None:
                    reason = score.reason
                    if score.over_budget:
                        reason += f" (stages {score.over_budget})"
            row = _plan_row(mbs, plan_obj, reason, d=fixed_d)
            row["algorithm"] = algo
            rows.append(row)
            throughput[(algo, mbs)] = None if plan_obj is None else plan_obj.throughput_sps

    ratio_rows: list[dict] = []
    for mbs in sorted(set(cfg.microbatch_sizes)):
        manual_tp = throughput.get(("manual", mbs))
        for algo in algos:
            tp = throughput[(algo, mbs)]
            ratio = None
            if manual_tp is not None and tp is not None:
                ratio = tp / manual_tp
            ratio_rows.append(
                {
                    "algorithm": algo,
                    "microbatch": mbs,
                    "throughput_sps": tp,
                    "ratio_vs_manual": ratio,
                    "manual_infeasible": ("manual" in algos) and manual_tp is None,
                }
            )

    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_csv(
        os.path.join(cfg.out_dir, "compare.csv"),
        ["algorithm", *REPORT_COLUMNS],
        rows,
    )
    _write_csv(
        os.path.join(cfg.out_dir, "plot_data.csv"),
        ["algorithm", "microbatch", "throughput_sps", "ratio_vs_manual", "manual_infeasible"],
        ratio_rows,
    )
    for row in rows:
        status = "ok" if row["feasible"] else f"X ({row['reason']})"
        print(f"{row['algorithm']:>8} mbs={row['microbatch']}: {status}")
    return 0


def cmd_topo_gen(args) -> int:
    params = {}
    for item in args.param or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"bad --param {item!r}, expected key=value")
        params[key] = _coerce(val)
    topo = _generate_topology(args.kind, params)
    save_topology(topo, args.out)
    print(
        f"wrote {args.out}: {topo.num_levels} levels, "
        f"{topo.total_devices} devices"
    )
    return 0


def cmd_oracle_check(args) -> int:
    failures = oracle.check_suite(
        count=args.count,
        seed=args.seed,
        perturb=args.debug_perturb,
        verbose=True,
    )
    if failures:
        print(f"FAIL: {failures} of {args.count} instances mismatched")
        return 1
    print(f"PASS: {args.count} instances, solver matches brute force exactly")
    return 0


# ---- argument parsing ----------------------------------------------------


def _int_list(raw: str) -> list[int]:
    try:
        return [int(v) for v in raw.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {raw!r}")


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--model", required=True, help="model profile JSON path")
    sub.add_argument(
        "--topology",
        required=True,
        help="topology JSON path, or generator stanza like spine_leaf:leaves=4",
    )
    sub.add_argument("--budget-bytes", type=float, default=None,
                     help="per-device memory budget in bytes")
    sub.add_argument("--devices", type=int, default=None,
                     help="cap on devices used (default: whole cluster)")
    sub.add_argument("--microbatch-sizes", type=_int_list, default=None,
                     help="comma-separated sweep, e.g. 1,2,4,8")
    sub.add_argument("--replication", type=_int_list, default=None,
                     help="comma-separated data-parallel candidates")
    sub.add_argument("--max-stages", type=int, default=None)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out-dir", default="out")
    sub.add_argument("--no-mem", action="store_true",
                     help="ablation: ignore the memory model")
    sub.add_argument("--no-zero", action="store_true",
                     help="debug: disable state-sharding escalation")
    sub.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parplan",
        description="Hierarchy-aware planner for hybrid-parallel training placements",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_plan = subs.add_parser("plan", help="solve one model/topology and write the plan")
    _add_run_flags(p_plan)
    p_plan.set_defaults(func=cmd_plan)

    p_cmp = subs.add_parser("compare", help="run planner and baselines side by side")
    _add_run_flags(p_cmp)
    p_cmp.add_argument("--algorithms", default="planner,flat,mcmc,manual",
                       help="comma-separated subset of planner,flat,mcmc,manual")
    p_cmp.add_argument("--manual-strategy", default=None, metavar="p,d,t,e,c",
                       help="hand-written strategy tuple for the manual baseline")
    p_cmp.set_defaults(func=cmd_compare)

    p_gen = subs.add_parser("topo-gen", help="write a generated topology file")
    p_gen.add_argument("--kind", required=True, choices=list(topology_templates()))
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--param", action="append", metavar="key=value",
                       help="generator parameter, repeatable")
    p_gen.set_defaults(func=cmd_topo_gen)

    p_orc = subs.add_parser("oracle-check",
                            help="verify the solver against brute force on small instances")
    p_orc.add_argument("--count", type=int, default=100)
    p_orc.add_argument("--seed", type=int, default=0)
    p_orc.add_argument("--debug-perturb", type=float, default=0.0,
                       help="negative control: skew the solver's cost matrix by this factor")
    p_orc.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PARPLAN_LOG", "WARNING"),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
