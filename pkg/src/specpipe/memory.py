"""Simulated CPU-side memory: block allocation, byte-precise access guards,
and fault events.

Write guards stand in for revoked write permission on the pages backing a
speculatively encrypted range: an application write that touches a guarded
range emits a fault (and deactivates the guard) before the write lands, so
the write itself always succeeds.  Read guards mark ranges whose decryption
is still outstanding.

Addresses come from a flat bump allocator; blocks are never freed or reused
within a run.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union


class AllocError(Exception):
    """Simulated address space exhausted."""


class BoundsError(Exception):
    """Access outside the block's byte range."""


class GuardOverlapError(Exception):
    """Two active guards of the same kind would cover a common byte."""


@dataclass(frozen=True)
class ModelLayer:
    layer_index: int


@dataclass(frozen=True)
class KvCache:
    owner_id: int
    layer_index: int


@dataclass(frozen=True)
class SmallIo:
    pass


BlockKind = Union[ModelLayer, KvCache, SmallIo]


@dataclass
class MemoryBlock:
    id: int
    base: int
    len: int
    kind: BlockKind
    data: bytearray

    @property
    def end(self) -> int:
        return self.base + self.len


@dataclass
class WriteGuard:
    base: int
    len: int
    owner: int  # ciphertext record id
    active: bool = True

    @property
    def end(self) -> int:
        return self.base + self.len


@dataclass
class ReadGuard:
    base: int
    len: int
    task_id: int  # pending decryption task

    @property
    def end(self) -> int:
        return self.base + self.len


@dataclass(frozen=True)
class WriteFault:
    owner: int
    base: int
    len: int


@dataclass(frozen=True)
class ReadFault:
    task_id: int
    base: int
    len: int


FaultEvent = Union[WriteFault, ReadFault]
FillSource = Union[bytes, bytearray, Callable[[int], bytes], None]


def prng_fill(seed: int) -> Callable[[int], bytes]:
    """Deterministic pseudo-random payload source for a given seed."""
    def fill(n: int) -> bytes:
        return random.Random(seed).randbytes(n)
    return fill


def _overlaps(a_base: int, a_len: int, b_base: int, b_len: int) -> bool:
    return a_base < b_base + b_len and b_base < a_base + a_len


class HostMemory:
    """Flat simulated address space holding non-overlapping blocks."""

    def __init__(self, capacity: int = 1 << 40, base: int = 0x1000) -> None:
        self.capacity = capacity
        self._next_base = base
        self._origin = base
        self._blocks: dict[int, MemoryBlock] = {}
        self._next_id = 1
        self._write_guards: dict[int, WriteGuard] = {}  # by owner
        self._read_guards: dict[int, ReadGuard] = {}  # by task id
        self.fault_log: list[FaultEvent] = []
        self._listeners: list[Callable[[FaultEvent], None]] = []

    # -- allocation -----------------------------------------------------------

    def alloc(self, kind: BlockKind, length: int, fill: FillSource = None) -> MemoryBlock:
        if length <= 0:
            raise ValueError("block length must be positive")
        if self._next_base + length - self._origin > self.capacity:
            raise AllocError(
                f"cannot allocate {length} bytes: capacity {self.capacity} exhausted"
            )
        if fill is None:
            data = bytearray(length)
        elif callable(fill):
            data = bytearray(fill(length))
        else:
            data = bytearray(fill)
        if len(data) != length:
            raise ValueError("fill produced a payload of the wrong length")
        block = MemoryBlock(self._next_id, self._next_base, length, kind, data)
        self._blocks[block.id] = block
        self._next_id += 1
        self._next_base += length
        return block

    def block(self, block_id: int) -> MemoryBlock:
        return self._blocks[block_id]

    def blocks(self) -> Iterable[MemoryBlock]:
        return self._blocks.values()

    def block_at(self, base: int, length: int) -> tuple[MemoryBlock, int]:
        """Resolve an absolute range to (block, offset). The range must sit
        inside one block."""
        for blk in self._blocks.values():
            if blk.base <= base and base + length <= blk.end:
                return blk, base - blk.base
        raise BoundsError(f"range ({base:#x}, {length}) is not inside any block")

    # -- fault listeners ------------------------------------------------------

    def add_fault_listener(self, fn: Callable[[FaultEvent], None]) -> None:
        self._listeners.append(fn)

    def _emit(self, fault: FaultEvent) -> None:
        self.fault_log.append(fault)
        for fn in self._listeners:
            fn(fault)

    # -- application access ---------------------------------------------------

    def _check_range(self, block: MemoryBlock, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > block.len:
            raise BoundsError(
                f"access ({offset}, {length}) outside block {block.id} of {block.len} bytes"
            )

    def write(self, block_id: int, offset: int, data: bytes) -> list[FaultEvent]:
        """Apply an application write. Guards intersecting the range fault
        first (and deactivate); the write then always lands."""
        block = self._blocks[block_id]
        self._check_range(block, offset, len(data))
        base = block.base + offset
        faults: list[FaultEvent] = []
        for guard in list(self._write_guards.values()):
            if guard.active and _overlaps(base, len(data), guard.base, guard.len):
                guard.active = False
                del self._write_guards[guard.owner]
                fault = WriteFault(guard.owner, guard.base, guard.len)
                faults.append(fault)
                self._emit(fault)
        block.data[offset : offset + len(data)] = data
        return faults

    def read(self, block_id: int, offset: int, length: int) -> tuple[bytes, list[FaultEvent]]:
        """Application read. A range under a pending decryption emits a read
        fault; the caller must resolve the decryption before the bytes mean
        anything."""
        block = self._blocks[block_id]
        self._check_range(block, offset, length)
        base = block.base + offset
        faults: list[FaultEvent] = []
        for guard in self._read_guards.values():
            if _overlaps(base, length, guard.base, guard.len):
                fault = ReadFault(guard.task_id, guard.base, guard.len)
                faults.append(fault)
                self._emit(fault)
        return bytes(block.data[offset : offset + length]), faults

    def system_write(self, block_id: int, offset: int, data: bytes) -> None:
        """Runtime-internal write (e.g. landing a finished decryption).
        Bypasses guard checks."""
        block = self._blocks[block_id]
        self._check_range(block, offset, len(data))
        block.data[offset : offset + len(data)] = data

    # -- guard management (driven by the validator / runtime) ------------------

    def install_write_guard(self, base: int, length: int, owner: int) -> None:
        for guard in self._write_guards.values():
            if guard.active and _overlaps(base, length, guard.base, guard.len):
                raise GuardOverlapError(
                    f"write guard ({base:#x}, {length}) overlaps guard of record {guard.owner}"
                )
        self._write_guards[owner] = WriteGuard(base, length, owner)

    def release_write_guard(self, owner: int) -> None:
        self._write_guards.pop(owner, None)

    def write_guard_for(self, owner: int) -> WriteGuard | None:
        return self._write_guards.get(owner)

    def active_write_guards(self) -> list[WriteGuard]:
        return list(self._write_guards.values())

    def install_read_guard(self, base: int, length: int, task_id: int) -> None:
        for guard in self._read_guards.values():
            if _overlaps(base, length, guard.base, guard.len):
                raise GuardOverlapError(
                    f"read guard ({base:#x}, {length}) overlaps task {guard.task_id}"
                )
        self._read_guards[task_id] = ReadGuard(base, length, task_id)

    def release_read_guard(self, task_id: int) -> None:
        self._read_guards.pop(task_id, None)

    def read_guards_over(self, base: int, length: int) -> list[ReadGuard]:
        return [
            g for g in self._read_guards.values()
            if _overlaps(base, length, g.base, g.len)
        ]
