"""Swap-pattern prediction.

Classifies transfers by size, keeps the swap history (batches of swapped-in
blocks plus the outstanding swapped-out set), recognizes the three
patterns seen in LLM serving stacks (repetitive layer offloading, FIFO
layer-wise reloads, LIFO request-wise reloads), and emits (block, counter)
predictions for the pre-encryption pipeline.

``recognize`` and ``predict_next`` are pure functions of the history so a
replay of the same trace always yields the same decisions.  The stateful
``Predictor`` facade wraps them for the runtime.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .channel import MAX_MESSAGE_BYTES

logger = logging.getLogger(__name__)

KIB = 1024


class AmbiguousProfile(Exception):
    """Layer and KV unit sizes coincide; classification is impossible."""


class UnknownBlock(Exception):
    """A swap-in named a block that was never swapped out."""


class TransferClass(Enum):
    MODEL_WEIGHTS = "model_weights"
    KV_CACHE = "kv_cache"
    SMALL_IO = "small_io"


@dataclass(frozen=True)
class ModelProfile:
    """Per-model transfer-size fingerprint, computable from the model alone."""

    name: str
    layer_param_bytes: int
    kv_block_bytes: int


@dataclass(frozen=True)
class PredictorConfig:
    small_io_threshold: int = 8 * KIB
    swap_min: int = 128 * KIB
    chunk_bytes: int = MAX_MESSAGE_BYTES
    warmup_matches: int = 2  # consistent swap-ins before a FIFO/LIFO lock
    history_cap: int = 128  # batches scanned for cycle detection


DEFAULT_CONFIG = PredictorConfig()


def _chunked_sizes(total: int, chunk: int) -> set[int]:
    """Message sizes produced when one logical transfer is split at the
    channel limit."""
    if total <= chunk:
        return {total}
    sizes = {chunk}
    if total % chunk:
        sizes.add(total % chunk)
    return sizes


def classify(
    size: int, profile: ModelProfile, config: PredictorConfig = DEFAULT_CONFIG
) -> TransferClass:
    """Classify a transfer purely by its size against the model profile."""
    if size < 1:
        raise ValueError("transfer size must be positive")
    if profile.layer_param_bytes == profile.kv_block_bytes:
        raise AmbiguousProfile(
            f"profile {profile.name!r}: layer and KV unit sizes are both "
            f"{profile.layer_param_bytes} bytes"
        )
    if size in _chunked_sizes(profile.layer_param_bytes, config.chunk_bytes):
        return TransferClass.MODEL_WEIGHTS
    if size in _chunked_sizes(profile.kv_block_bytes, config.chunk_bytes):
        return TransferClass.KV_CACHE
    if size >= config.small_io_threshold:
        logger.warning(
            "transfer of %d bytes matches no profile unit; treating as small I/O",
            size,
        )
    return TransferClass.SMALL_IO


@dataclass(frozen=True)
class SwapBatch:
    blocks: frozenset[int]
    seq: int


class PatternKind(Enum):
    REPETITIVE = "repetitive"
    LIFO = "lifo"
    FIFO = "fifo"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class PatternHypothesis:
    kind: PatternKind
    confidence: int = 0
    cycle: tuple[tuple[int, ...], ...] = ()  # repetitive only
    phase: int = 0  # index into cycle of the next expected batch


UNKNOWN = PatternHypothesis(PatternKind.UNKNOWN)


@dataclass(frozen=True)
class Prediction:
    block: int
    predicted_iv: int
    leeway: int


@dataclass
class SwapHistory:
    """Ordered record of swap traffic feeding pattern recognition."""

    events: list[tuple] = field(default_factory=list)
    in_batches: list[tuple[int, ...]] = field(default_factory=list)  # canonical
    _outstanding: dict[int, None] = field(default_factory=dict)  # out-order

    def observe_swap_out(self, block: int) -> None:
        if block in self._outstanding:
            raise UnknownBlock(f"block {block} is already swapped out")
        self.events.append(("out", block))
        self._outstanding[block] = None

    def observe_swap_in(self, blocks: Iterable[int]) -> None:
        batch = frozenset(blocks)
        if not batch:
            raise ValueError("swap-in batch must be non-empty")
        missing = [b for b in batch if b not in self._outstanding]
        if missing:
            raise UnknownBlock(f"swap-in names blocks never swapped out: {missing}")
        self.events.append(("in", batch))
        self.in_batches.append(tuple(sorted(batch)))
        for b in batch:
            del self._outstanding[b]

    def observe_sync(self) -> None:
        self.events.append(("sync",))

    @property
    def outstanding(self) -> frozenset[int]:
        return frozenset(self._outstanding)

    def outstanding_in_out_order(self) -> list[int]:
        return list(self._outstanding)


def outstanding_groups(history: SwapHistory) -> list[list[int]]:
    """Outstanding blocks grouped as they were swapped out (groups close at a
    sync or at the next swap-in), oldest group first."""
    groups: list[list[int]] = []
    open_group: list[int] = []
    for ev in history.events:
        if ev[0] == "out":
            open_group.append(ev[1])
        else:
            if open_group:
                groups.append(open_group)
                open_group = []
            if ev[0] == "in":
                gone = ev[1]
                groups = [[b for b in g if b not in gone] for g in groups]
                groups = [g for g in groups if g]
    if open_group:
        groups.append(open_group)
    return groups


def _smallest_period(seq: Sequence[tuple[int, ...]]) -> int:
    """Smallest p with seq[i] == seq[i-p] for all i >= p (KMP border)."""
    n = len(seq)
    fail = [0] * n
    k = 0
    for i in range(1, n):
        while k and seq[i] != seq[k]:
            k = fail[k - 1]
        if seq[i] == seq[k]:
            k += 1
        fail[i] = k
    return n - fail[n - 1] if n else 0


def _find_cycle(
    batches: Sequence[tuple[int, ...]], cap: int
) -> tuple[tuple[tuple[int, ...], ...], int, int] | None:
    """Longest suffix of the batch sequence that repeats a full cycle at
    least once. Returns (cycle, confidence, phase) or None."""
    n = len(batches)
    start = max(0, n - cap)
    for k in range(start, n - 1):
        seq = batches[k:]
        p = _smallest_period(seq)
        if len(seq) >= p + 1:
            cycle = tuple(seq[:p])
            confidence = len(seq) - p
            phase = len(seq) % p
            return cycle, confidence, phase
    return None


def recognize(
    history: SwapHistory, config: PredictorConfig = DEFAULT_CONFIG
) -> PatternHypothesis:
    """Classify the swap-in history as repetitive, LIFO, FIFO, or unknown.

    A contradiction with a policy resets that policy's streak, so after
    inconsistent traffic the warmup starts over.  When several policies fit,
    repetitive wins over LIFO over FIFO: a short cycle is indistinguishable
    from either queue policy and the repetitive case dominates offloading.
    """
    stack: list[int] = []
    lifo_streak = 0
    fifo_streak = 0
    for ev in history.events:
        if ev[0] == "out":
            stack.append(ev[1])
        elif ev[0] == "in":
            batch = ev[1]
            k = len(batch)
            lifo_streak = lifo_streak + 1 if set(stack[-k:]) == batch else 0
            fifo_streak = fifo_streak + 1 if set(stack[:k]) == batch else 0
            stack = [b for b in stack if b not in batch]

    found = _find_cycle(history.in_batches, config.history_cap)
    if found is not None:
        cycle, confidence, phase = found
        return PatternHypothesis(PatternKind.REPETITIVE, confidence, cycle, phase)
    if lifo_streak >= config.warmup_matches:
        return PatternHypothesis(PatternKind.LIFO, lifo_streak)
    if fifo_streak >= config.warmup_matches:
        return PatternHypothesis(PatternKind.FIFO, fifo_streak)
    return UNKNOWN


def predict_batches(
    history: SwapHistory,
    outstanding: frozenset[int],
    current_iv: int,
    leeway: int,
    depth: int,
    config: PredictorConfig = DEFAULT_CONFIG,
) -> list[list[Prediction]]:
    """Predict up to ``depth`` future swap-in batches with their counters.

    Counters are assigned consecutively from ``current_iv + leeway``; the
    leeway reserves room for small transfers that will consume counters
    before the predicted swaps arrive.  Only outstanding blocks are ever
    predicted; an empty list means no hypothesis is locked.
    """
    hypothesis = recognize(history, config)
    batches: list[list[int]] = []
    if hypothesis.kind is PatternKind.REPETITIVE:
        cycle, phase = hypothesis.cycle, hypothesis.phase
        for i in range(depth):
            nxt = cycle[(phase + i) % len(cycle)]
            if not set(nxt) <= outstanding:
                break
            batches.append(list(nxt))
    elif hypothesis.kind is PatternKind.LIFO:
        groups = outstanding_groups(history)
        for g in list(reversed(groups))[:depth]:
            batches.append(list(reversed(g)))
    elif hypothesis.kind is PatternKind.FIFO:
        groups = outstanding_groups(history)
        for g in groups[:depth]:
            batches.append(list(g))
    else:
        return []

    out: list[list[Prediction]] = []
    iv = current_iv + leeway
    for blocks in batches:
        preds = []
        for b in blocks:
            if b not in outstanding:
                return out
            preds.append(Prediction(block=b, predicted_iv=iv, leeway=leeway))
            iv += 1
        out.append(preds)
    return out


def predict_next(
    history: SwapHistory,
    outstanding: frozenset[int],
    current_iv: int,
    leeway: int,
    depth: int,
    config: PredictorConfig = DEFAULT_CONFIG,
) -> list[Prediction]:
    """Flattened form of ``predict_batches``, ordered by expected request order."""
    return [
        p
        for batch in predict_batches(history, outstanding, current_iv, leeway, depth, config)
        for p in batch
    ]


class Predictor:
    """Stateful facade over the pure recognition and prediction functions."""

    def __init__(
        self,
        profile: ModelProfile | None = None,
        config: PredictorConfig = DEFAULT_CONFIG,
    ) -> None:
        self.profile = profile
        self.config = config
        self.history = SwapHistory()
        self.decision_log: list[dict] = []
        self._last_kind = PatternKind.UNKNOWN

    def classify(self, size: int) -> TransferClass:
        if self.profile is None:
            raise ValueError("no model profile configured")
        return classify(size, self.profile, self.config)

    def observe_swap_out(self, block: int) -> None:
        self.history.observe_swap_out(block)

    def observe_swap_in(self, blocks: Iterable[int]) -> None:
        self.history.observe_swap_in(blocks)
        self._log_transitions()

    def observe_sync(self) -> None:
        self.history.observe_sync()

    def _log_transitions(self) -> None:
        hyp = recognize(self.history, self.config)
        if hyp.kind is not self._last_kind:
            self.decision_log.append(
                {
                    "event": "lock" if hyp.kind is not PatternKind.UNKNOWN else "drop",
                    "pattern": hyp.kind.value,
                    "confidence": hyp.confidence,
                    "after_batches": len(self.history.in_batches),
                }
            )
            self._last_kind = hyp.kind

    @property
    def outstanding(self) -> frozenset[int]:
        return self.history.outstanding

    def recognize(self) -> PatternHypothesis:
        return recognize(self.history, self.config)

    def predict_batches(
        self, current_iv: int, leeway: int, depth: int = 1
    ) -> list[list[Prediction]]:
        return predict_batches(
            self.history, self.history.outstanding, current_iv, leeway, depth, self.config
        )

    def predict_next(self, current_iv: int, leeway: int, depth: int = 1) -> list[Prediction]:
        return predict_next(
            self.history, self.history.outstanding, current_iv, leeway, depth, self.config
        )
