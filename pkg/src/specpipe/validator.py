"""Speculative-ciphertext validation.

Each pre-encrypted payload is stored as a record labeled with the exact
plaintext address range and the counter it was encrypted under, and a write
guard is installed over the range.  A write fault invalidates the record
eagerly.  On the request critical path, ``validate`` is a single exact-match
lookup keyed on (base, len): a sub-range of a labeled range is a miss, and
the counter comparison decides between a hit, a recoverable
counter-ahead suspension, and an unrecoverable counter-behind.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .channel import CiphertextMsg
from .memory import FaultEvent, HostMemory, WriteFault


class OverlapError(Exception):
    """Two live speculative encryptions would cover intersecting ranges."""


class StateError(Exception):
    """Illegal record state transition."""


class RecordState(Enum):
    PENDING = "pending"
    COMMITTED = "committed"
    INVALIDATED = "invalidated"


class VerdictKind(Enum):
    HIT = "hit"
    IV_AHEAD = "iv_ahead"
    IV_BEHIND = "iv_behind"
    STALE = "stale"
    MISS = "miss"


@dataclass
class CiphertextRecord:
    id: int
    base: int
    len: int
    iv: int
    chunks: tuple[CiphertextMsg, ...]
    state: RecordState = RecordState.PENDING
    block_id: int | None = None

    @property
    def ct(self) -> CiphertextMsg:
        return self.chunks[0]

    @property
    def iv_span(self) -> int:
        """Number of consecutive counters this record occupies."""
        return len(self.chunks)


@dataclass(frozen=True)
class ValidationVerdict:
    kind: VerdictKind
    record: CiphertextRecord | None = None
    gap: int = 0


class Validator:
    """Pending-record window with O(1) request-path lookups."""

    def __init__(self, memory: HostMemory, window: int = 64) -> None:
        self.memory = memory
        self.window = window
        self.records: dict[int, CiphertextRecord] = {}
        self._next_id = 1
        self._pending_by_range: dict[tuple[int, int], int] = {}
        self._pending_by_iv: dict[int, int] = {}
        self._stale_by_range: dict[tuple[int, int], int] = {}
        self._pending_order: OrderedDict[int, None] = OrderedDict()
        self._pending_bases: list[tuple[int, int]] = []  # (base, record id), sorted
        self.counters = {k.value: 0 for k in VerdictKind}
        self.counters["evicted"] = 0
        self.validate_probes = 0
        memory.add_fault_listener(self._on_fault)

    # -- labeling ---------------------------------------------------------------

    def _overlapping_pending(self, base: int, length: int) -> int | None:
        # Pending ranges are pairwise disjoint, so only the one with the
        # largest start below base+length can intersect.
        i = bisect_left(self._pending_bases, (base + length, -1))
        if i > 0:
            prev_base, rid = self._pending_bases[i - 1]
            rec = self.records[rid]
            if prev_base + rec.len > base:
                return rid
        return None

    def label(
        self,
        chunks: Sequence[CiphertextMsg] | CiphertextMsg,
        base: int,
        length: int,
        iv: int,
        block_id: int | None = None,
    ) -> int:
        """Store a pre-encrypted payload and guard its plaintext range.

        Multi-chunk payloads occupy consecutive counters starting at ``iv``.
        """
        if isinstance(chunks, CiphertextMsg):
            chunks = (chunks,)
        rid = self._overlapping_pending(base, length)
        if rid is not None:
            raise OverlapError(
                f"range ({base:#x}, {length}) overlaps pending record {rid}"
            )
        span = len(chunks)
        for v in range(iv, iv + span):
            if v in self._pending_by_iv:
                raise OverlapError(f"counter {v} already claimed by a pending record")
        if len(self._pending_order) >= self.window:
            oldest = next(iter(self._pending_order))
            self.invalidate(oldest)
            self.counters["evicted"] += 1
        record = CiphertextRecord(
            self._next_id, base, length, iv, tuple(chunks), block_id=block_id
        )
        self._next_id += 1
        self.records[record.id] = record
        self._pending_by_range[(base, length)] = record.id
        for v in range(iv, iv + span):
            self._pending_by_iv[v] = record.id
        self._pending_order[record.id] = None
        insort(self._pending_bases, (base, record.id))
        self._stale_by_range.pop((base, length), None)
        self.memory.install_write_guard(base, length, record.id)
        return record.id

    # -- the critical path --------------------------------------------------------

    def validate(self, base: int, length: int, current_iv: int) -> ValidationVerdict:
        """Constant-time disposition of a copy request against the window.

        Does not mutate any record; the caller commits or discards.
        """
        self.validate_probes += 1
        rid = self._pending_by_range.get((base, length))
        if rid is not None:
            rec = self.records[rid]
            if rec.iv == current_iv:
                verdict = ValidationVerdict(VerdictKind.HIT, rec)
            elif rec.iv > current_iv:
                verdict = ValidationVerdict(VerdictKind.IV_AHEAD, rec, gap=rec.iv - current_iv)
            else:
                verdict = ValidationVerdict(VerdictKind.IV_BEHIND, rec)
        else:
            self.validate_probes += 1
            stale = self._stale_by_range.get((base, length))
            if stale is not None:
                verdict = ValidationVerdict(VerdictKind.STALE, self.records[stale])
            else:
                verdict = ValidationVerdict(VerdictKind.MISS)
        self.counters[verdict.kind.value] += 1
        return verdict

    # -- state transitions ----------------------------------------------------------

    def _drop_pending(self, rec: CiphertextRecord) -> None:
        del self._pending_by_range[(rec.base, rec.len)]
        for v in range(rec.iv, rec.iv + rec.iv_span):
            self._pending_by_iv.pop(v, None)
        self._pending_order.pop(rec.id, None)
        i = bisect_left(self._pending_bases, (rec.base, rec.id))
        if i < len(self._pending_bases) and self._pending_bases[i] == (rec.base, rec.id):
            del self._pending_bases[i]
        self.memory.release_write_guard(rec.id)

    def commit(self, record_id: int) -> None:
        rec = self.records[record_id]
        if rec.state is not RecordState.PENDING:
            raise StateError(f"record {record_id} is {rec.state.value}, not pending")
        self._drop_pending(rec)
        rec.state = RecordState.COMMITTED

    def invalidate(self, record_id: int) -> None:
        rec = self.records[record_id]
        if rec.state is not RecordState.PENDING:
            raise StateError(f"record {record_id} is {rec.state.value}, not pending")
        self._drop_pending(rec)
        rec.state = RecordState.INVALIDATED
        self._stale_by_range[(rec.base, rec.len)] = rec.id

    def _on_fault(self, fault: FaultEvent) -> None:
        if isinstance(fault, WriteFault) and fault.owner in self.records:
            rec = self.records[fault.owner]
            if rec.state is RecordState.PENDING:
                self.invalidate(fault.owner)

    # -- window queries (off the critical path) --------------------------------------

    def pending_records(self) -> list[CiphertextRecord]:
        return [self.records[rid] for rid in self._pending_order]

    def pending_count(self) -> int:
        return len(self._pending_order)

    def pending_record_at_iv(self, iv: int) -> CiphertextRecord | None:
        rid = self._pending_by_iv.get(iv)
        return self.records[rid] if rid is not None else None

    def has_pending_range(self, base: int, length: int) -> bool:
        return (base, length) in self._pending_by_range

    def invalidate_pending_below(self, iv: int) -> int:
        """Discard records whose counters have already been passed; they can
        never be sent."""
        doomed = [
            rec.id
            for rec in self.pending_records()
            if rec.iv + rec.iv_span - 1 < iv
        ]
        for rid in doomed:
            self.invalidate(rid)
        return len(doomed)

    def guard_ranges_disjoint(self) -> bool:
        spans = sorted(
            (g.base, g.end) for g in self.memory.active_write_guards()
        )
        return all(a_end <= b_base for (_, a_end), (b_base, _) in zip(spans, spans[1:]))
