import sys
import time

import parplan.solver as S
from parplan.network import build_level_matrix
from parplan.oracle import brute_force_optimum, witness_for_plan
from parplan.solver import plan
from parplan.synth import random_instance

OVERFLOWS = []
_orig_run = S._Fill.run


def _run_counting(self, pool):
    t = _orig_run(self, pool)
    OVERFLOWS.append(self.overflow)
    return t


S._Fill.run = _run_counting

n = int(sys.argv[1]) if len(sys.argv) > 1 else 50
start = int(sys.argv[2]) if len(sys.argv) > 2 else 0
mismatches = []
t0 = time.time()
max_states = 0
for seed in range(start, start + n):
    inst = random_instance(seed)
    graph, topo, budget = inst["graph"], inst["topo"], inst["budget"]
    d = inst["replication"]
    matrix = build_level_matrix(topo)
    res = plan(
        graph, topo, matrix, budget=budget, microbatch_sizes=[1],
        replication=[d], max_stages=inst["max_stages"],
    )
    ora = brute_force_optimum(
        graph, topo, matrix, budget=budget, microbatch_size=1,
        replication=d, max_stages=inst["max_stages"],
    )
    max_states = max(max_states, ora.states_scored)
    s_feas = res.plan is not None
    if s_feas != ora.feasible:
        mismatches.append(
            (seed, "feasibility", s_feas, ora.feasible,
             ora.t_batch_s if ora.feasible else res.plan.t_batch_s)
        )
        continue
    if s_feas:
        if res.plan.t_batch_s != ora.t_batch_s:
            mismatches.append(
                (seed, "objective", res.plan.t_batch_s, ora.t_batch_s,
                 res.plan.t_batch_s - ora.t_batch_s)
            )
        w = witness_for_plan(res.plan, topo, matrix)
        if w is None:
            mismatches.append((seed, "witness", res.plan.to_dict(), None, None))

elapsed = time.time() - t0
print(f"{n} instances in {elapsed:.1f}s ({elapsed/n*1000:.0f} ms avg), "
      f"{len(mismatches)} mismatches, max oracle states {max_states}, "
      f"overflow events {sum(OVERFLOWS)} over {len(OVERFLOWS)} fills")
for mm in mismatches[:20]:
    print(mm)
