"""Scratch perf probe for the DP fill at acceptance-test scale."""
import time

from parplan.graph import (
    CollectiveCall, LayerProfile, ModelGraph, ParallelVariant, VariantCost,
)
from parplan.network import CollectiveKind, LevelSpec, TopologySpec
from parplan.solver import plan


def tx_layer(lid, keys):
    variants = []
    for (t, e, c, seq) in keys:
        wdt = t * e * c
        colls = (CollectiveCall(CollectiveKind.ALL_REDUCE, 2e8),) if t > 1 else ()
        variants.append(
            ParallelVariant(
                t, e, c, seq,
                VariantCost(2e-3 / wdt, 4e-3 / wdt, 1.72e9 / wdt, 1.5e9 / ((t if seq else 1) * c), colls),
            )
        )
    return LayerProfile(lid, False, 1.72e9, 5.16e9, 1.5e9, 67.108864e6, tuple(variants))


keys = [(1, 1, 1, False), (2, 1, 1, True), (4, 1, 1, True), (8, 1, 1, True)]
layers = [tx_layer(f"tx{i}", keys) for i in range(96)]
g = ModelGraph(layers, global_batch=1024, micro_batch_size=1)

topo = TopologySpec(
    levels=[LevelSpec(8, 900e9, 1e-6), LevelSpec(64, 100e9, 5e-6), LevelSpec(1024, 50e9, 1e-5)],
    total_devices=1024,
)

t0 = time.time()
res = plan(g, topo, budget=80e9, replication=[4], microbatch_sizes=[1], max_stages=32)
t1 = time.time()
p = res.plan
print(f"fill+replay took {t1-t0:.1f}s")
if p:
    print("stages", p.num_stages, "t_batch", p.t_batch_s, "used", p.devices_used,
          "d", p.replication)
    print("first stage", p.stages[0])
else:
    print("infeasible:", res.sweep[0].reason)
