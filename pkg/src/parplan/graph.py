"""Profiled model representation.

The planner never sees framework code. Its whole view of a model is a
chain of profiled layers, each offering a menu of parallelism variants
measured offline: how long forward and backward take at that sharding,
how many bytes of weights and activations land on each device, and which
collectives the variant issues per microbatch. This module defines that
representation, loads it from JSON, and aggregates contiguous layer
ranges into stage-level cost summaries.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum

from parplan.network import CollectiveKind

logger = logging.getLogger(__name__)


class ProfileError(ValueError):
    """Raised when a model profile is malformed or inconsistent."""


class Schedule(str, Enum):
    ONE_F_ONE_B = "1F1B"
    GPIPE = "gpipe"


@dataclass(frozen=True)
class CollectiveCall:
    """One collective issued by a variant, once per microbatch."""

    kind: CollectiveKind
    nbytes: float


@dataclass(frozen=True)
class VariantCost:
    """Measured per-device costs of running one layer under one variant.

    fwd_latency_s: forward compute time for one microbatch.
    bwd_latency_s: backward compute time for one microbatch.
    sharded_weight_bytes: parameter bytes held per device.
    sharded_activation_bytes: working activation bytes per device
        for one microbatch.
    collectives: communication the variant issues per microbatch,
        excluding pipeline transfers and gradient sync, which the
        planner prices itself.
    """

    fwd_latency_s: float
    bwd_latency_s: float
    sharded_weight_bytes: float
    sharded_activation_bytes: float
    collectives: tuple[CollectiveCall, ...] = ()


@dataclass(frozen=True)
class ParallelVariant:
    """A (tensor, expert, context) sharding choice for a layer.

    t: tensor-parallel width.
    e: expert-parallel width.
    c: context-parallel width.
    seq: whether tensor ranks also shard the sequence dimension, which
        makes activations scale down with t as well as c.
    """

    t: int
    e: int
    c: int
    seq: bool
    cost: VariantCost

    @property
    def key(self) -> tuple[int, int, int, bool]:
        return (self.t, self.e, self.c, self.seq)

    @property
    def width(self) -> int:
        """Devices one replica of this variant occupies."""
        return self.t * self.e * self.c

    @property
    def activation_shard_width(self) -> int:
        """How many ways boundary activations are split across devices."""
        return (self.t if self.seq else 1) * self.c


@dataclass(frozen=True)
class LayerProfile:
    """One layer of the model with its variant menu.

    boundary_activation_bytes is the full (unsharded) size of the tensor
    handed to the next layer for one microbatch at the profiled
    microbatch size.
    """

    layer_id: str
    is_embedding: bool
    weight_bytes: float
    optimizer_state_bytes: float
    activation_bytes: float
    boundary_activation_bytes: float
    variants: tuple[ParallelVariant, ...]

    def variant(self, key: tuple[int, int, int, bool]) -> ParallelVariant:
        for v in self.variants:
            if v.key == key:
                return v
        raise ProfileError(f"layer {self.layer_id}: no variant {key}")


@dataclass
class ModelGraph:
    """A profiled model: an ordered chain of layers plus batch settings."""

    layers: list[LayerProfile]
    global_batch: int
    micro_batch_size: int
    schedule: Schedule = Schedule.ONE_F_ONE_B

    def __post_init__(self) -> None:
        if not self.layers:
            raise ProfileError("model needs at least one layer")
        seen: set[str] = set()
        for layer in self.layers:
            if layer.layer_id in seen:
                raise ProfileError(f"duplicate layer id {layer.layer_id!r}")
            seen.add(layer.layer_id)
            if not layer.variants:
                raise ProfileError(f"layer {layer.layer_id}: needs at least one variant")
            keys = [v.key for v in layer.variants]
            if len(keys) != len(set(keys)):
                raise ProfileError(f"layer {layer.layer_id}: duplicate variant keys")
            for v in layer.variants:
                if v.t < 1 or v.e < 1 or v.c < 1:
                    raise ProfileError(
                        f"layer {layer.layer_id}: variant widths must be >= 1, got {v.key}"
                    )
                if v.cost.fwd_latency_s < 0 or v.cost.bwd_latency_s < 0:
                    raise ProfileError(
                        f"layer {layer.layer_id}: variant {v.key} has negative latency"
                    )
        if self.global_batch < 1 or self.micro_batch_size < 1:
            raise ProfileError("batch sizes must be >= 1")
        if self.global_batch % self.micro_batch_size != 0:
            raise ProfileError(
                f"global batch {self.global_batch} is not a multiple of "
                f"microbatch size {self.micro_batch_size}"
            )
        self._common_cache: dict[tuple[int, int], tuple[tuple[int, int, int, bool], ...]] = {}

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def common_variants(self, start: int, stop: int) -> tuple[tuple[int, int, int, bool], ...]:
        """Variant keys offered by every layer in [start, stop), sorted."""
        cached = self._common_cache.get((start, stop))
        if cached is not None:
            return cached
        keys = set(v.key for v in self.layers[start].variants)
        for layer in self.layers[start + 1 : stop]:
            keys &= set(v.key for v in layer.variants)
        result = tuple(sorted(keys))
        self._common_cache[(start, stop)] = result
        return result

    def to_dict(self) -> dict:
        return {
            "global_batch": self.global_batch,
            "micro_batch_size": self.micro_batch_size,
            "schedule": self.schedule.value,
            "layers": [
                {
                    "id": layer.layer_id,
                    "is_embedding": layer.is_embedding,
                    "weight_bytes": layer.weight_bytes,
                    "optimizer_state_bytes": layer.optimizer_state_bytes,
                    "activation_bytes": layer.activation_bytes,
                    "boundary_activation_bytes": layer.boundary_activation_bytes,
                    "variants": [
                        {
                            "t": v.t,
                            "e": v.e,
                            "c": v.c,
                            "seq": v.seq,
                            "fwd_latency_s": v.cost.fwd_latency_s,
                            "bwd_latency_s": v.cost.bwd_latency_s,
                            "sharded_weight_bytes": v.cost.sharded_weight_bytes,
                            "sharded_activation_bytes": v.cost.sharded_activation_bytes,
                            "collectives": [
                                {"kind": call.kind.value, "bytes": call.nbytes}
                                for call in v.cost.collectives
                            ],
                        }
                        for v in layer.variants
                    ],
                }
                for layer in self.layers
            ],
        }


# Downsets of a chain-structured model are exactly its suffixes; keeping
# the notion explicit leaves room for richer graph shapes later without
# touching solver iteration code.
@dataclass(frozen=True)
class Downset:
    """A closed-under-successors set of layers: the suffix [start, L)."""

    start: int

    def members(self, num_layers: int) -> range:
        return range(self.start, num_layers)


def enumerate_downsets(num_layers: int) -> list[Downset]:
    """All downsets of a chain, smallest first (empty suffix included)."""
    return [Downset(start) for start in range(num_layers, -1, -1)]


@dataclass(frozen=True)
class StageProfile:
    """Aggregate per-device costs of layers [start, stop) under one variant.

    All microbatch-proportional quantities (latencies, activations,
    boundary transfers, collective payloads) are already scaled to the
    requested microbatch size. Weight and optimizer bytes are not, since
    they do not depend on it.
    """

    start: int
    stop: int
    key: tuple[int, int, int, bool]
    width: int
    # summed compute latencies for one microbatch
    fwd_s: float
    bwd_s: float
    # per-device parameter bytes after variant sharding
    weight_bytes: float
    # per-device optimizer state, assumed to shard like the weights
    opt_bytes: float
    # per-device working activations for one microbatch in flight
    act_bytes: float
    # per-device stashed input needed to recompute the stage
    stash_input_bytes: float
    # per-device payload handed to the next stage per microbatch
    p2p_out_bytes: float
    # (kind, call count, total payload bytes) in fixed kind order
    collectives: tuple[tuple[CollectiveKind, int, float], ...]


def stage_aggregate(
    graph: ModelGraph,
    start: int,
    stop: int,
    key: tuple[int, int, int, bool],
    micro_batch_size: int | None = None,
) -> StageProfile:
    """Fold layers [start, stop) into one stage summary under a variant.

    Latencies and activation-sized payloads scale linearly with the ratio
    of the requested microbatch size to the profiled one. That is an
    approximation: real kernels have sublinear regions, but profiles are
    taken near the operating point so the error stays small.
    """
    if not (0 <= start < stop <= graph.num_layers):
        raise ProfileError(f"bad stage range [{start}, {stop})")
    mbs = graph.micro_batch_size if micro_batch_size is None else micro_batch_size
    scale = mbs / graph.micro_batch_size

    first_variant = graph.layers[start].variant(key)
    width = first_variant.width
    act_width = first_variant.activation_shard_width

    fwd_s = 0.0
    bwd_s = 0.0
    weight_bytes = 0.0
    opt_bytes = 0.0
    act_bytes = 0.0
    counts = {kind: 0 for kind in CollectiveKind}
    coll_bytes = {kind: 0.0 for kind in CollectiveKind}
    for layer in graph.layers[start:stop]:
        v = layer.variant(key)
        fwd_s += v.cost.fwd_latency_s * scale
        bwd_s += v.cost.bwd_latency_s * scale
        weight_bytes += v.cost.sharded_weight_bytes
        if layer.weight_bytes > 0:
            shard_ratio = v.cost.sharded_weight_bytes / layer.weight_bytes
        else:
            shard_ratio = 1.0
        opt_bytes += layer.optimizer_state_bytes * shard_ratio
        act_bytes += v.cost.sharded_activation_bytes * scale
        for call in v.cost.collectives:
            counts[call.kind] += 1
            coll_bytes[call.kind] += call.nbytes * scale

    if start > 0:
        stash_input = graph.layers[start - 1].boundary_activation_bytes * scale / act_width
    else:
        stash_input = 0.0
    p2p_out = graph.layers[stop - 1].boundary_activation_bytes * scale / act_width

    collectives = tuple(
        (kind, counts[kind], coll_bytes[kind]) for kind in CollectiveKind if counts[kind] > 0
    )
    return StageProfile(
        start=start,
        stop=stop,
        key=key,
        width=width,
        fwd_s=fwd_s,
        bwd_s=bwd_s,
        weight_bytes=weight_bytes,
        opt_bytes=opt_bytes,
        act_bytes=act_bytes,
        stash_input_bytes=stash_input,
        p2p_out_bytes=p2p_out,
        collectives=collectives,
    )


def _parse_variant(raw: dict, where: str) -> ParallelVariant:
    try:
        calls = []
        for c_idx, call in enumerate(raw.get("collectives", [])):
            try:
                kind = CollectiveKind(call["kind"])
            except ValueError as exc:
                raise ProfileError(f"{where} collective {c_idx}: {exc}") from exc
            calls.append(CollectiveCall(kind=kind, nbytes=float(call["bytes"])))
        return ParallelVariant(
            t=int(raw["t"]),
            e=int(raw.get("e", 1)),
            c=int(raw.get("c", 1)),
            seq=bool(raw.get("seq", False)),
            cost=VariantCost(
                fwd_latency_s=float(raw["fwd_latency_s"]),
                bwd_latency_s=float(raw["bwd_latency_s"]),
                sharded_weight_bytes=float(raw["sharded_weight_bytes"]),
                sharded_activation_bytes=float(raw["sharded_activation_bytes"]),
                collectives=tuple(calls),
            ),
        )
    except (KeyError, TypeError) as exc:
        raise ProfileError(f"{where}: missing or bad field {exc}") from exc


def model_from_dict(data: dict, where: str = "profile") -> ModelGraph:
    try:
        raw_layers = data["layers"]
        global_batch = int(data["global_batch"])
        mbs = int(data["micro_batch_size"])
    except (KeyError, TypeError) as exc:
        raise ProfileError(f"{where}: missing or bad field {exc}") from exc
    try:
        schedule = Schedule(data.get("schedule", "1F1B"))
    except ValueError as exc:
        raise ProfileError(f"{where}: {exc}") from exc
    layers = []
    for idx, raw in enumerate(raw_layers):
        tag = f"{where}: layer {idx}"
        try:
            variants = tuple(
                _parse_variant(v, f"{tag} variant {v_idx}")
                for v_idx, v in enumerate(raw["variants"])
            )
            layers.append(
                LayerProfile(
                    layer_id=str(raw["id"]),
                    is_embedding=bool(raw.get("is_embedding", False)),
                    weight_bytes=float(raw["weight_bytes"]),
                    optimizer_state_bytes=float(raw["optimizer_state_bytes"]),
                    activation_bytes=float(raw["activation_bytes"]),
                    boundary_activation_bytes=float(raw["boundary_activation_bytes"]),
                    variants=variants,
                )
            )
        except (KeyError, TypeError) as exc:
            raise ProfileError(f"{tag}: missing or bad field {exc}") from exc
    try:
        return ModelGraph(
            layers=layers,
            global_batch=global_batch,
            micro_batch_size=mbs,
            schedule=schedule,
        )
    except ProfileError as exc:
        raise ProfileError(f"{where}: {exc}") from exc


def load_model_spec(path: str) -> ModelGraph:
    """Read a profiled model from JSON, tagging errors with the path."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ProfileError(f"{path}: invalid JSON: {exc}") from exc
    return model_from_dict(data, where=path)


def save_model_spec(graph: ModelGraph, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(graph.to_dict(), fh, indent=2)
        fh.write("\n")
