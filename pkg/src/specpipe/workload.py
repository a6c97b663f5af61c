"""Synthetic workload traces and the replayable trace file format.

Traces are line-delimited JSON: a single header line (schema version, model
profile, generator parameters, block table) followed by one event per line.
Times are integer nanoseconds and non-decreasing; every swap-in names a
previously swapped-out block; swap-in batches are terminated by a sync.
A ``.gz`` suffix selects gzip framing.

Three generators cover the workload shapes that matter here: layer-by-layer
model offloading (a repetitive swap-in cycle), KV-cache swapping under a
LIFO or FIFO eviction policy with token-sized transfers interleaved, and an
adversarial mutator that scrambles swap-in order and injects writes over
ranges a speculative encrypt would guard.
"""

from __future__ import annotations

import copy
import gzip
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

from .memory import BlockKind, KvCache, ModelLayer, SmallIo
from .predictor import ModelProfile

SCHEMA_VERSION = 1

MIB = 1024 * 1024
DEFAULT_LAYER_BYTES = 4 * MIB
DEFAULT_KV_BLOCK_BYTES = 1 * MIB


class TraceFormatError(Exception):
    pass


@dataclass(frozen=True)
class SwapOut:
    t: int
    block: int


@dataclass(frozen=True)
class SwapInRequest:
    t: int
    block: int


@dataclass(frozen=True)
class SmallIoEvent:
    t: int
    direction: str  # "h2d" | "d2h"
    size: int


@dataclass(frozen=True)
class ComputeEvent:
    t: int
    duration: int  # ns


@dataclass(frozen=True)
class SyncEvent:
    t: int


@dataclass(frozen=True)
class AppWriteEvent:
    t: int
    block: int
    offset: int
    size: int
    data_seed: int


TraceEvent = Union[SwapOut, SwapInRequest, SmallIoEvent, ComputeEvent, SyncEvent, AppWriteEvent]


@dataclass(frozen=True)
class BlockSpec:
    id: int
    kind: BlockKind
    nbytes: int
    resident: str  # "cpu" | "gpu"
    content_seed: int


@dataclass(frozen=True)
class TraceHeader:
    schema_version: int
    profile: ModelProfile
    params: dict
    blocks: tuple[BlockSpec, ...]


@dataclass
class Trace:
    header: TraceHeader
    events: list[TraceEvent] = field(default_factory=list)

    def swap_bytes(self) -> int:
        sizes = {b.id: b.nbytes for b in self.header.blocks}
        return sum(
            sizes[ev.block]
            for ev in self.events
            if isinstance(ev, (SwapOut, SwapInRequest))
        )

    def payload_bytes(self) -> int:
        return self.swap_bytes() + sum(
            ev.size for ev in self.events if isinstance(ev, SmallIoEvent)
        )

    def token_count(self) -> int:
        n = sum(
            1 for ev in self.events
            if isinstance(ev, SmallIoEvent) and ev.direction == "d2h"
        )
        return n or sum(1 for ev in self.events if isinstance(ev, SwapInRequest)) or 1


# -- serialization ------------------------------------------------------------


def _kind_to_json(kind: BlockKind) -> dict:
    if isinstance(kind, ModelLayer):
        return {"type": "model_layer", "layer": kind.layer_index}
    if isinstance(kind, KvCache):
        return {"type": "kv_cache", "owner": kind.owner_id, "layer": kind.layer_index}
    return {"type": "small_io"}


def _kind_from_json(obj: dict) -> BlockKind:
    t = obj["type"]
    if t == "model_layer":
        return ModelLayer(obj["layer"])
    if t == "kv_cache":
        return KvCache(obj["owner"], obj["layer"])
    if t == "small_io":
        return SmallIo()
    raise TraceFormatError(f"unknown block kind {t!r}")


def _event_to_json(ev: TraceEvent) -> dict:
    if isinstance(ev, SwapOut):
        return {"t": ev.t, "kind": "swap_out", "block": ev.block}
    if isinstance(ev, SwapInRequest):
        return {"t": ev.t, "kind": "swap_in", "block": ev.block}
    if isinstance(ev, SmallIoEvent):
        return {"t": ev.t, "kind": "small_io", "direction": ev.direction, "size": ev.size}
    if isinstance(ev, ComputeEvent):
        return {"t": ev.t, "kind": "compute", "duration": ev.duration}
    if isinstance(ev, SyncEvent):
        return {"t": ev.t, "kind": "sync"}
    if isinstance(ev, AppWriteEvent):
        return {
            "t": ev.t, "kind": "app_write", "block": ev.block,
            "offset": ev.offset, "size": ev.size, "data_seed": ev.data_seed,
        }
    raise TraceFormatError(f"unknown event {ev!r}")


def _event_from_json(obj: dict) -> TraceEvent:
    kind = obj.get("kind")
    t = obj["t"]
    if kind == "swap_out":
        return SwapOut(t, obj["block"])
    if kind == "swap_in":
        return SwapInRequest(t, obj["block"])
    if kind == "small_io":
        return SmallIoEvent(t, obj["direction"], obj["size"])
    if kind == "compute":
        return ComputeEvent(t, obj["duration"])
    if kind == "sync":
        return SyncEvent(t)
    if kind == "app_write":
        return AppWriteEvent(t, obj["block"], obj["offset"], obj["size"], obj["data_seed"])
    raise TraceFormatError(f"unknown event kind {kind!r}")


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def trace_to_lines(trace: Trace) -> Iterator[str]:
    h = trace.header
    yield _dumps(
        {
            "schema_version": h.schema_version,
            "profile": {
                "name": h.profile.name,
                "layer_param_bytes": h.profile.layer_param_bytes,
                "kv_block_bytes": h.profile.kv_block_bytes,
            },
            "params": h.params,
            "blocks": [
                {
                    "id": b.id, "kind": _kind_to_json(b.kind), "bytes": b.nbytes,
                    "resident": b.resident, "content_seed": b.content_seed,
                }
                for b in h.blocks
            ],
        }
    )
    for ev in trace.events:
        yield _dumps(_event_to_json(ev))


def save_trace(trace: Trace, path: str | Path) -> Path:
    path = Path(path)
    text = "\n".join(trace_to_lines(trace)) + "\n"
    if path.suffix == ".gz":
        with gzip.open(path, "wt", encoding="utf-8") as fh:
            fh.write(text)
    else:
        path.write_text(text, encoding="utf-8")
    return path


def load_trace(path: str | Path) -> Trace:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rt", encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        else:
            lines = path.read_text(encoding="utf-8").splitlines()
        return parse_trace_lines(lines)
    except (OSError, UnicodeDecodeError) as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc}") from exc


def parse_trace_lines(lines: list[str]) -> Trace:
    if not lines:
        raise TraceFormatError("empty trace file")
    try:
        head = json.loads(lines[0])
        version = head["schema_version"]
        if version != SCHEMA_VERSION:
            raise TraceFormatError(f"unsupported schema_version {version}")
        profile = ModelProfile(
            name=head["profile"]["name"],
            layer_param_bytes=head["profile"]["layer_param_bytes"],
            kv_block_bytes=head["profile"]["kv_block_bytes"],
        )
        blocks = tuple(
            BlockSpec(
                id=b["id"], kind=_kind_from_json(b["kind"]), nbytes=b["bytes"],
                resident=b["resident"], content_seed=b["content_seed"],
            )
            for b in head["blocks"]
        )
        header = TraceHeader(version, profile, head["params"], blocks)
        events = [_event_from_json(json.loads(ln)) for ln in lines[1:] if ln.strip()]
    except (KeyError, ValueError, TypeError) as exc:
        raise TraceFormatError(f"malformed trace: {exc}") from exc
    return Trace(header, events)


def validate_trace(trace: Trace) -> None:
    """Well-formedness: monotone times, swap-ins only of outstanding blocks,
    swap-in batches terminated by a sync, in-bounds writes."""
    known = {b.id: b for b in trace.header.blocks}
    outstanding = {b.id for b in trace.header.blocks if b.resident == "cpu"}
    on_gpu = {b.id for b in trace.header.blocks if b.resident == "gpu"}
    last_t = 0
    open_batch = False
    for i, ev in enumerate(trace.events):
        if ev.t < last_t:
            raise TraceFormatError(f"event {i}: time goes backwards")
        last_t = ev.t
        if isinstance(ev, SwapOut):
            if ev.block not in known:
                raise TraceFormatError(f"event {i}: unknown block {ev.block}")
            if ev.block not in on_gpu:
                raise TraceFormatError(f"event {i}: swap-out of block {ev.block} not on device")
            on_gpu.discard(ev.block)
            outstanding.add(ev.block)
        elif isinstance(ev, SwapInRequest):
            if ev.block not in outstanding:
                raise TraceFormatError(
                    f"event {i}: swap-in of block {ev.block} never swapped out"
                )
            outstanding.discard(ev.block)
            on_gpu.add(ev.block)
            open_batch = True
        elif isinstance(ev, SyncEvent):
            open_batch = False
        elif isinstance(ev, ComputeEvent):
            if open_batch:
                raise TraceFormatError(f"event {i}: compute inside an unsynced swap-in batch")
        elif isinstance(ev, AppWriteEvent):
            spec = known.get(ev.block)
            if spec is None or ev.offset + ev.size > spec.nbytes:
                raise TraceFormatError(f"event {i}: write outside block {ev.block}")
    if open_batch:
        raise TraceFormatError("trace ends inside an unsynced swap-in batch")


# -- generators -----------------------------------------------------------------


def gen_offload_trace(
    layers: int,
    offload_set: set[int] | list[int],
    iterations: int,
    layer_bytes: int = DEFAULT_LAYER_BYTES,
    compute_per_layer: int = 200_000,
    seed: int = 0,
) -> Trace:
    """Layer-by-layer offloading: per iteration, each offloaded layer is
    reloaded in index order (request, sync, compute, swap back out), which
    yields the repetitive swap-in cycle."""
    offload = sorted(set(offload_set))
    if any(l < 1 or l > layers for l in offload):
        raise ValueError("offload_set must name layers in 1..layers")
    rng = random.Random(seed)
    profile = ModelProfile("offload", layer_bytes, max(1, layer_bytes // 4))
    blocks = tuple(
        BlockSpec(
            id=i + 1, kind=ModelLayer(l), nbytes=layer_bytes,
            resident="cpu", content_seed=rng.randrange(1 << 30),
        )
        for i, l in enumerate(offload)
    )
    by_layer = {l: b.id for l, b in zip(offload, blocks)}
    # event times are ordering ticks; pacing comes from the replay's
    # resource model, not from the trace
    events: list[TraceEvent] = []
    t = 0
    for _ in range(iterations):
        for l in range(1, layers + 1):
            if l in by_layer:
                events.append(SwapInRequest(t, by_layer[l]))
                events.append(SyncEvent(t))
                t += 1
            events.append(ComputeEvent(t, compute_per_layer))
            t += 1
            if l in by_layer:
                events.append(SwapOut(t, by_layer[l]))
                t += 1
    trace = Trace(
        TraceHeader(
            SCHEMA_VERSION,
            profile,
            {
                "generator": "offload", "layers": layers, "offload": offload,
                "iterations": iterations, "layer_bytes": layer_bytes,
                "compute_per_layer": compute_per_layer, "seed": seed,
            },
            blocks,
        ),
        events,
    )
    validate_trace(trace)
    return trace


def gen_kvswap_trace(
    requests: int,
    policy: str,
    kv_block_bytes: int = DEFAULT_KV_BLOCK_BYTES,
    request_rate: float = 100.0,
    parallel_size: int = 2,
    small_io_size: int = 2048,
    seed: int = 0,
    victims_per_episode: int = 3,
    steps_per_phase: int = 2,
    compute_per_step: int = 300_000,
    small_io_per_step: int = 2,
) -> Trace:
    """KV-cache swapping under memory pressure.

    Each request owns ``parallel_size`` KV blocks born on the device.  An
    episode evicts a group of requests (all their blocks swap out) and later
    reloads them, last-evicted first under LIFO or in eviction order under
    FIFO.  Token transfers interleave between swaps and consume channel
    counters without being speculated.
    """
    if policy not in ("lifo", "fifo"):
        raise ValueError("policy must be 'lifo' or 'fifo'")
    if requests < 1 or parallel_size < 1:
        raise ValueError("counts must be positive")
    rng = random.Random(seed)
    profile = ModelProfile("kvswap", 8 * kv_block_bytes, kv_block_bytes)
    blocks = []
    owned: dict[int, list[int]] = {}
    next_id = 1
    for r in range(requests):
        owned[r] = []
        for j in range(parallel_size):
            blocks.append(
                BlockSpec(
                    id=next_id, kind=KvCache(r, j), nbytes=kv_block_bytes,
                    resident="gpu", content_seed=rng.randrange(1 << 30),
                )
            )
            owned[r].append(next_id)
            next_id += 1

    events: list[TraceEvent] = []
    t = 0
    interarrival = int(round(1e9 / request_rate)) if request_rate > 0 else 0

    def tokens(direction: str) -> None:
        if small_io_size > 0:
            for _ in range(small_io_per_step):
                events.append(SmallIoEvent(t, direction, small_io_size))

    def decode_steps(n: int) -> None:
        nonlocal t
        for _ in range(n):
            tokens("h2d")
            events.append(ComputeEvent(t, compute_per_step))
            t += 1
            tokens("d2h")

    k = max(1, min(victims_per_episode, requests))
    episodes = max(1, requests // k)
    arrived = 0
    for ep in range(episodes):
        victims = [(ep * k + i) % requests for i in range(k)]
        while arrived < min(requests, (ep + 1) * k):
            events.append(SmallIoEvent(t, "h2d", max(small_io_size, 1)))
            arrived += 1
            t += interarrival
        decode_steps(steps_per_phase)
        # one memory-pressure decision evicts the whole victim group
        for v in victims:
            for b in owned[v]:
                events.append(SwapOut(t, b))
        events.append(SyncEvent(t))
        decode_steps(steps_per_phase)
        reload = list(reversed(victims)) if policy == "lifo" else list(victims)
        for v in reload:
            order = list(owned[v])
            rng.shuffle(order)  # no order is promised within a batch
            for b in order:
                events.append(SwapInRequest(t, b))
            events.append(SyncEvent(t))
            events.append(ComputeEvent(t, compute_per_step))
            t += 1
        t += 1
    trace = Trace(
        TraceHeader(
            SCHEMA_VERSION,
            profile,
            {
                "generator": "kvswap", "requests": requests, "policy": policy,
                "kv_block_bytes": kv_block_bytes, "request_rate": request_rate,
                "parallel_size": parallel_size, "small_io_size": small_io_size,
                "seed": seed, "victims_per_episode": victims_per_episode,
                "steps_per_phase": steps_per_phase,
                "compute_per_step": compute_per_step,
                "small_io_per_step": small_io_per_step,
            },
            tuple(blocks),
        ),
        events,
    )
    validate_trace(trace)
    return trace


def _interchangeable(a: BlockSpec, b: BlockSpec) -> bool:
    if type(a.kind) is not type(b.kind) or a.nbytes != b.nbytes:
        return False
    if isinstance(a.kind, KvCache) and isinstance(b.kind, KvCache):
        # same-owner blocks travel in one batch, where order is free anyway
        return a.kind.owner_id != b.kind.owner_id
    return True


def gen_adversarial_trace(base: Trace, mutation_rate: float, seed: int = 0) -> Trace:
    """Derange a trace against sequence prediction while keeping it valid.

    Before each swap-in batch, with probability ``mutation_rate``, the
    identities of two interchangeable blocks in the same residency state are
    transposed across the rest of the trace, and a write is injected over a
    swapped-out block (a range a speculative encrypt would be guarding).
    At rate 1 every batch boundary is scrambled, which defeats sequence
    prediction entirely; at rate 0 the trace is returned unchanged.
    """
    if not 0.0 <= mutation_rate <= 1.0:
        raise ValueError("mutation_rate must be in [0, 1]")
    if mutation_rate == 0.0:
        return copy.deepcopy(base)
    rng = random.Random(seed)
    specs = {b.id: b for b in base.header.blocks}
    # insertion order tracks swap-out order: first entry is the oldest
    outstanding: dict[int, None] = {
        b.id: None for b in base.header.blocks if b.resident == "cpu"
    }
    on_gpu = {b.id for b in base.header.blocks if b.resident == "gpu"}
    relabel: dict[int, int] = {}

    def mapped(block: int) -> int:
        return relabel.get(block, block)

    def transpose() -> None:
        # Swap the block a LIFO reload would fetch next with the one a FIFO
        # reload would fetch next, so the coming batch mismatches under any
        # queue policy.
        order = list(outstanding)
        for a in reversed(order):
            for b in order:
                if a != b and _interchangeable(specs[a], specs[b]):
                    swap = {a: b, b: a}
                    # compose onto the running relabeling
                    for src, dst in list(relabel.items()):
                        if dst in swap:
                            relabel[src] = swap.pop(dst)
                    relabel.update(swap)
                    return

    out_events: list[TraceEvent] = []
    prev_kind: type | None = None
    for ev in base.events:
        if isinstance(ev, SwapInRequest) and prev_kind is not SwapInRequest:
            # batch boundary
            if rng.random() < mutation_rate:
                transpose()
            if rng.random() < mutation_rate and outstanding:
                victim = rng.choice(list(outstanding))
                size = min(64, specs[victim].nbytes)
                out_events.append(
                    AppWriteEvent(ev.t, victim, 0, size, rng.randrange(1 << 30))
                )
        prev_kind = type(ev)
        if isinstance(ev, SwapOut):
            b = mapped(ev.block)
            on_gpu.discard(b)
            outstanding[b] = None
            out_events.append(SwapOut(ev.t, b))
        elif isinstance(ev, SwapInRequest):
            b = mapped(ev.block)
            outstanding.pop(b, None)
            on_gpu.add(b)
            out_events.append(SwapInRequest(ev.t, b))
        elif isinstance(ev, AppWriteEvent):
            out_events.append(
                AppWriteEvent(ev.t, mapped(ev.block), ev.offset, ev.size, ev.data_seed)
            )
        else:
            out_events.append(ev)
    params = dict(base.header.params)
    params.update({"mutated_from": params.get("generator"), "mutation_rate": mutation_rate,
                   "mutation_seed": seed, "generator": "adversarial"})
    trace = Trace(
        TraceHeader(SCHEMA_VERSION, base.header.profile, params, base.header.blocks),
        out_events,
    )
    validate_trace(trace)
    return trace
