import json
import sys

from parplan.network import build_level_matrix
from parplan.oracle import brute_force_optimum
from parplan.solver import plan
from parplan.synth import random_instance

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 29
inst = random_instance(seed)
graph, topo, budget = inst["graph"], inst["topo"], inst["budget"]
d = inst["replication"]
matrix = build_level_matrix(topo)
print("layers", graph.num_layers, "devices", topo.total_devices,
      "caps", topo.capacities(), "budget", budget, "d", d,
      "B", graph.global_batch, "sched", graph.schedule,
      "max_stages", inst["max_stages"])
for layer in graph.layers:
    print(" ", layer.layer_id, "fwd", layer.variants[0].cost.fwd_latency_s,
          "bwd", layer.variants[0].cost.bwd_latency_s,
          "w", layer.weight_bytes, "opt", layer.optimizer_state_bytes,
          "act", layer.activation_bytes, "bnd", layer.boundary_activation_bytes,
          "widths", [v.width for v in layer.variants], "emb", layer.is_embedding)

res = plan(graph, topo, matrix, budget=budget, microbatch_sizes=[1],
           replication=[d], max_stages=inst["max_stages"])
ora = brute_force_optimum(graph, topo, matrix, budget=budget,
                          microbatch_size=1, replication=d,
                          max_stages=inst["max_stages"])
print("\nsolver t_batch", res.plan.t_batch_s if res.plan else None)
if res.plan:
    print(json.dumps(res.plan.to_dict(), indent=1))
print("\noracle t_batch", ora.t_batch_s)
print(json.dumps(ora.plan.to_dict(), indent=1))
print("embedding", ora.embedding)
