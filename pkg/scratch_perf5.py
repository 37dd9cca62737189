"""Scratch perf probe: deep-model scale where sharding is forced."""
import time

from parplan.graph import LayerProfile, ModelGraph, ParallelVariant, VariantCost
from parplan.network import LevelSpec, TopologySpec
from parplan.solver import plan

K1 = (1, 1, 1, False)


def plain_layer(lid, fwd, bwd, w, opt, act, boundary, emb=False):
    v = ParallelVariant(1, 1, 1, False, VariantCost(fwd, bwd, w, act, ()))
    return LayerProfile(lid, emb, w, opt, act, boundary, (v,))


layers = [plain_layer("emb", 0.2e-3, 0.4e-3, 2.101346304e9, 1e9, 0.5e9, 67.108864e6, emb=True)]
for i in range(80):
    layers.append(plain_layer(f"tx{i}", 2e-3, 4e-3, 1.72e9, 32e9, 16e9, 67.108864e6))
layers.append(plain_layer("head", 2e-3, 4e-3, 2.1e9, 1e9, 2e9, 0.0))

g = ModelGraph(layers, global_batch=4096, micro_batch_size=1)

topo = TopologySpec(
    levels=[
        LevelSpec(16, 900e9, 1e-6),
        LevelSpec(64, 100e9, 5e-6),
        LevelSpec(1024, 100e9, 1e-5, oversubscription=2.0),
    ],
    total_devices=1024,
)

t0 = time.time()
res = plan(g, topo, budget=24e9)
t1 = time.time()
print(f"zero-allowed point took {t1-t0:.1f}s")
p = res.plan
if p:
    zs = sorted(set(st.zero_stage for st in p.stages))
    print("stages", p.num_stages, "t_batch", f"{p.t_batch_s:.6f}", "used", p.devices_used,
          "zero stages present", zs,
          "recompute", sorted(set(st.recompute for st in p.stages)))
    b = p.bottleneck()
    print("bottleneck", b.start, b.stop, "z", b.zero_stage, "deg", b.zero_degree,
          "load", f"{b.load_s*1e3:.4f}ms", "in_level", b.in_level)
    widths = sorted(set(st.devices for st in p.stages))
    print("stage widths", widths)
else:
    print("infeasible:", res.sweep[0].reason)

t0 = time.time()
res2 = plan(g, topo, budget=24e9, allow_zero=False)
t1 = time.time()
print(f"no-zero point took {t1-t0:.1f}s; feasible={res2.plan is not None}; "
      f"reason={res2.sweep[0].reason}")
