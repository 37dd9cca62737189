"""Synthetic model profiles and topologies for tests, demos, and suites.

Shapes are loosely modeled on public architectures (a 70B-class decoder,
a GPT-3-class decoder, BERT-Large, a Mixtral-style MoE) with round-number
costs. Byte quantities are integer-valued so that memory arithmetic is
exact in float64; latencies are simple multiples of a millisecond.

random_instance produces the small seeded instances used by the
brute-force equivalence suite: few layers, few devices, few levels, at
most two variants per layer, and integer bytes throughout.
"""

from __future__ import annotations

import random

from parplan.graph import (
    CollectiveCall,
    LayerProfile,
    ModelGraph,
    ParallelVariant,
    Schedule,
    VariantCost,
)
from parplan.network import CollectiveKind, LevelSpec, TopologySpec

MiB = float(2**20)
GiB = float(2**30)
GB = 1e9


def _variant(
    t: int,
    e: int,
    c: int,
    seq: bool,
    fwd_s: float,
    bwd_s: float,
    weight_bytes: float,
    act_bytes: float,
    collectives: tuple[CollectiveCall, ...] = (),
) -> ParallelVariant:
    """Variant with costs derived from the unsharded layer numbers."""
    width = t * e * c
    act_width = (t if seq else 1) * c
    return ParallelVariant(
        t, e, c, seq,
        VariantCost(
            fwd_latency_s=fwd_s / width,
            bwd_latency_s=bwd_s / width,
            sharded_weight_bytes=weight_bytes / width,
            sharded_activation_bytes=act_bytes / act_width,
            collectives=collectives,
        ),
    )


def _dense_layer(
    lid: str,
    fwd_s: float,
    bwd_s: float,
    weight_bytes: float,
    opt_bytes: float,
    act_bytes: float,
    boundary_bytes: float,
    tensor_widths: tuple[int, ...] = (1,),
    is_embedding: bool = False,
) -> LayerProfile:
    """Dense layer offering tensor-parallel variants at the given widths.

    Tensor variants over width 1 shard the sequence dimension too and
    issue one AllReduce of the full boundary tensor per microbatch.
    """
    variants = []
    for t in tensor_widths:
        colls = ()
        if t > 1:
            colls = (CollectiveCall(CollectiveKind.ALL_REDUCE, boundary_bytes),)
        variants.append(
            _variant(t, 1, 1, t > 1, fwd_s, bwd_s, weight_bytes, act_bytes, colls)
        )
    return LayerProfile(
        layer_id=lid,
        is_embedding=is_embedding,
        weight_bytes=weight_bytes,
        optimizer_state_bytes=opt_bytes,
        activation_bytes=act_bytes,
        boundary_activation_bytes=boundary_bytes,
        variants=tuple(variants),
    )


# ---------------------------------------------------------------------------
# named scenario profiles
# ---------------------------------------------------------------------------


def llama70b_profile() -> tuple[ModelGraph, TopologySpec, float]:
    """A 70B-class decoder that cannot train without heavy state sharding.

    80 transformer blocks between an embedding and a head. Optimizer
    state is fp32 master weights plus two moments; activations are
    sized so that even a single block busts a 24 GB device without
    recomputation, and the full optimizer state busts it without
    sharding. Returns (graph, topology, budget_bytes).
    """
    boundary = 64 * MiB  # 67108864
    layers = [
        _dense_layer(
            "embed", 0.2e-3, 0.4e-3,
            weight_bytes=2101346304.0, opt_bytes=1 * GB,
            act_bytes=0.5 * GB, boundary_bytes=boundary,
            is_embedding=True,
        )
    ]
    for i in range(80):
        layers.append(
            _dense_layer(
                f"block{i:02d}", 2e-3, 4e-3,
                weight_bytes=1.72 * GB, opt_bytes=32 * GB,
                act_bytes=16 * GB, boundary_bytes=boundary,
            )
        )
    layers.append(
        _dense_layer(
            "head", 2e-3, 4e-3,
            weight_bytes=2.1 * GB, opt_bytes=1 * GB,
            act_bytes=2 * GB, boundary_bytes=0.0,
        )
    )
    graph = ModelGraph(layers, global_batch=4096, micro_batch_size=1)
    topo = TopologySpec(
        levels=[
            LevelSpec(16, 900e9, 1e-6),
            LevelSpec(64, 100e9, 5e-6),
            LevelSpec(1024, 100e9, 1e-5, oversubscription=2.0),
        ],
        total_devices=1024,
    )
    return graph, topo, 24 * GB


def balanced_stack_profile() -> tuple[ModelGraph, TopologySpec, float]:
    """A compute-homogeneous stack on an oversubscribed spine-leaf fabric.

    24 identical blocks, 8-device nodes, and a leaf/spine fabric slow
    enough that any stage boundary leaving a node dominates the stage
    load. An 8-stage intra-node pipeline with 3 layers per stage is
    compute-balanced by construction.
    """
    layers = [
        _dense_layer(
            f"block{i:02d}", 3e-3, 6e-3,
            weight_bytes=2 * GB, opt_bytes=2 * GB,
            act_bytes=1 * GB, boundary_bytes=400e6,
        )
        for i in range(24)
    ]
    graph = ModelGraph(layers, global_batch=256, micro_batch_size=1)
    topo = TopologySpec(
        levels=[
            LevelSpec(8, 900e9, 1e-6),
            LevelSpec(32, 12.5e9, 5e-6),
            LevelSpec(64, 12.5e9, 1e-5, oversubscription=2.0),
        ],
        total_devices=64,
    )
    return graph, topo, 1e15


def gpt3_profile() -> tuple[ModelGraph, TopologySpec, float]:
    """A GPT-3-class decoder: 96 blocks with tensor widths up to 8.

    Per-block numbers follow a 12288-hidden transformer at fp16 compute
    with fp32 optimizer state; the boundary tensor is one microbatch of
    2048 tokens. Returns (graph, topology, budget_bytes) on a 1,024
    device, 3-level cluster with an 80 GB budget.
    """
    boundary = 48 * MiB  # 2048 tokens x 12288 hidden x 2 bytes
    layers = [
        _dense_layer(
            f"block{i:02d}", 2e-3, 4e-3,
            weight_bytes=3.6 * GB, opt_bytes=21.6 * GB,
            act_bytes=4.8 * GB, boundary_bytes=boundary,
            tensor_widths=(1, 2, 4, 8),
        )
        for i in range(96)
    ]
    graph = ModelGraph(layers, global_batch=1024, micro_batch_size=1)
    topo = TopologySpec(
        levels=[
            LevelSpec(8, 900e9, 1e-6),
            LevelSpec(64, 100e9, 5e-6),
            LevelSpec(1024, 50e9, 1e-5),
        ],
        total_devices=1024,
    )
    return graph, topo, 80 * GB


def bert_large_profile() -> tuple[ModelGraph, TopologySpec, float]:
    """A BERT-Large-shaped encoder: small enough that pure data
    parallelism wins on a uniform network."""
    layers = [
        _dense_layer(
            f"enc{i:02d}", 0.4e-3, 0.8e-3,
            weight_bytes=25 * MiB, opt_bytes=150 * MiB,
            act_bytes=64 * MiB, boundary_bytes=2 * MiB,
        )
        for i in range(24)
    ]
    graph = ModelGraph(layers, global_batch=2048, micro_batch_size=1)
    topo = TopologySpec(
        levels=[LevelSpec(512, 400e9, 1e-6)],
        total_devices=512,
    )
    return graph, topo, 16 * GB


def moe_profile() -> tuple[ModelGraph, TopologySpec, float]:
    """A Mixtral-style stack alternating dense and mixture-of-experts
    blocks; MoE blocks offer expert-parallel variants that issue
    AllToAll dispatch/combine traffic."""
    boundary = 32 * MiB
    layers: list[LayerProfile] = []
    for i in range(16):
        if i % 2 == 0:
            layers.append(
                _dense_layer(
                    f"attn{i:02d}", 1e-3, 2e-3,
                    weight_bytes=512 * MiB, opt_bytes=3 * GB,
                    act_bytes=1 * GB, boundary_bytes=boundary,
                    tensor_widths=(1, 2),
                )
            )
        else:
            w, opt, act = 4 * GB, 24 * GB, 1 * GB
            dispatch = (CollectiveCall(CollectiveKind.ALL_TO_ALL, 2 * boundary),)
            moe = LayerProfile(
                layer_id=f"moe{i:02d}",
                is_embedding=False,
                weight_bytes=w,
                optimizer_state_bytes=opt,
                activation_bytes=act,
                boundary_activation_bytes=boundary,
                variants=(
                    _variant(1, 1, 1, False, 4e-3, 8e-3, w, act),
                    _variant(1, 4, 1, False, 4e-3, 8e-3, w, act, dispatch),
                    _variant(1, 8, 1, False, 4e-3, 8e-3, w, act, dispatch),
                ),
            )
            layers.append(moe)
    graph = ModelGraph(layers, global_batch=512, micro_batch_size=1)
    topo = TopologySpec(
        levels=[
            LevelSpec(8, 900e9, 1e-6),
            LevelSpec(64, 200e9, 5e-6),
        ],
        total_devices=64,
    )
    return graph, topo, 40 * GB


# ---------------------------------------------------------------------------
# seeded instance generator for the equivalence suite
# ---------------------------------------------------------------------------

# Topology families for the suite. With at most 5 layers a pipeline has at
# most 5 stages, few enough that the per-level run counters coincide with
# exact device packing on any of these shapes (see the oracle module), so
# equivalence failures point at cost arithmetic, not packing.
_SUITE_TOPOLOGIES: list[tuple[tuple[int, ...], str]] = [
    ((4,), "flat4"),
    ((8,), "flat8"),
    ((2, 4), "pair"),
    ((2, 8), "node2"),
    ((4, 8), "node4"),
    ((1, 2, 8), "deep"),
    ((2, 4, 8), "tree"),
]


def _suite_topology(rng: random.Random) -> TopologySpec:
    caps, _name = rng.choice(_SUITE_TOPOLOGIES)
    alpha = rng.choice([1e-6, 2e-6, 5e-6])
    bw = rng.choice([1e11, 2e11, 4e11])
    levels = []
    for cap in caps:
        levels.append(LevelSpec(cap, bw, alpha))
        alpha *= rng.choice([2.0, 4.0, 5.0])
        bw /= rng.choice([2.0, 4.0, 8.0])
    return TopologySpec(levels=levels, total_devices=caps[-1])


def _suite_layer(rng: random.Random, lid: str, allow_wide: bool) -> LayerProfile:
    fwd = rng.randrange(1, 9) * 1e-3
    bwd = rng.randrange(1, 9) * 1e-3
    weight = float(rng.randrange(1, 65) * int(16 * MiB))
    opt = float(rng.randrange(1, 9) * weight)  # integer multiple keeps shards exact
    act = float(rng.randrange(1, 65) * int(16 * MiB))
    boundary = float(rng.randrange(0, 17) * int(4 * MiB))
    widths: tuple[int, ...] = (1,)
    if allow_wide and rng.random() < 0.6:
        widths = (1, 2)
    return _dense_layer(
        lid, fwd, bwd, weight, opt, act, boundary,
        tensor_widths=widths,
        is_embedding=(rng.random() < 0.1),
    )


def random_instance(seed: int) -> dict:
    """One seeded small instance for the equivalence suite.

    Returns a dict with graph, topo, budget (None for roughly a third of
    instances), replication d, and the instance's max_stages. All byte
    quantities are integers and all shard divisors are powers of two, so
    escalation thresholds are exact in float64.
    """
    rng = random.Random(seed)
    topo = _suite_topology(rng)
    total = topo.total_devices
    num_layers = rng.randrange(1, 6)
    allow_wide = total >= 2
    layers = [_suite_layer(rng, f"l{i}", allow_wide) for i in range(num_layers)]
    schedule = Schedule.GPIPE if rng.random() < 0.25 else Schedule.ONE_F_ONE_B
    global_batch = rng.choice([2, 4, 8])
    graph = ModelGraph(
        layers, global_batch=global_batch, micro_batch_size=1, schedule=schedule
    )

    budget: float | None = None
    if rng.random() < 0.7:
        # Anchor the budget to the heaviest layer so instances straddle
        # the feasibility boundary instead of being uniformly trivial.
        heaviest = max(
            layer.weight_bytes + layer.optimizer_state_bytes + layer.activation_bytes
            for layer in layers
        )
        budget = float(int(heaviest * rng.choice([0.5, 0.75, 1.0, 1.5, 2.0])))

    d = 1
    if total % 2 == 0 and rng.random() < 0.25:
        d = 2
    return {
        "seed": seed,
        "graph": graph,
        "topo": topo,
        "budget": budget,
        "replication": d,
        "max_stages": min(num_layers, total),
    }
