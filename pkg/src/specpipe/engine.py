"""Speculative pipelined encryption runtime.

Intercepts host-to-device and device-to-host copy requests, runs the
pre-encryption pipeline against the predictor's output, validates each
request against the speculative-ciphertext window, and handles mismatches:

* counter ahead of the channel: suspend the request and re-order it within
  its batch, closing the gap with NOP padding at the synchronization point;
* counter behind the channel: relinquish the whole pipeline (every pending
  record is burned) and encrypt on the fly;
* stale or unknown range: encrypt on the fly.

Device-to-host swaps complete before decryption; the destination carries a
read guard until the deferred decryption lands, and a faulting access forces
it synchronously.

Pre-encrypted payloads stay in a private staging pool until their record is
committed; only then do they enter the shared ring for transfer.  Every ring
insertion is checked and violations are counted, never silently allowed.

The engine is untimed and fully deterministic: encryption work is queued and
applied in issue order at the next engine entry point.  The simulator charges
worker and wire time to the recorded action log.
"""

from __future__ import annotations

import hashlib
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from .channel import ChannelEndpoint, CiphertextMsg, encrypt_at
from .memory import HostMemory, ReadFault
from .predictor import Predictor, TransferClass
from .validator import (
    CiphertextRecord,
    RecordState,
    ValidationVerdict,
    Validator,
    VerdictKind,
)

logger = logging.getLogger(__name__)


class EngineError(Exception):
    pass


class HandleState(Enum):
    PENDING = "pending"
    DONE = "done"


@dataclass(frozen=True)
class CopyRequest:
    direction: str  # "h2d" | "d2h"
    base: int
    len: int
    transfer_class: TransferClass
    block_id: int | None = None
    submit_time: int = 0


@dataclass
class CopyHandle:
    seq: int
    state: HandleState = HandleState.PENDING
    verdict: VerdictKind | None = None

    @property
    def done(self) -> bool:
        return self.state is HandleState.DONE


@dataclass
class EngineConfig:
    window: int = 64
    leeway: int = 8
    depth: int = 1  # predicted batches ahead
    workers: int = 2
    chunk_bytes: int = 32 * 1024 * 1024
    nop_bytes: int = 1
    ring_slots: int = 16
    speculate: bool = True
    defer_swap_decrypt: bool = True
    record_stream: bool = True


class ActionKind(Enum):
    SPEC_ENCRYPT = "spec_encrypt"
    H2D_DATA = "h2d_data"
    NOP = "nop"
    D2H_DATA = "d2h_data"
    RESOLVE_DECRYPT = "resolve_decrypt"
    RELINQUISH = "relinquish"
    SYNC_POINT = "sync_point"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    iv: int = -1
    nbytes: int = 0
    record_id: int | None = None
    task_id: int | None = None
    committed: bool = False
    otf: bool = False
    count: int = 0
    seq: int | None = None


@dataclass
class _SpecTask:
    block_id: int
    base: int
    len: int
    iv: int
    cancelled: bool = False


@dataclass
class _Suspended:
    req: CopyRequest
    record: CiphertextRecord
    handle: CopyHandle


@dataclass
class DeferredDecrypt:
    task_id: int
    block_id: int
    base: int
    len: int
    chunks: list[tuple[CiphertextMsg, int, int]]  # (msg, iv, offset)
    state: str = "queued"  # queued | done


class SharedRing:
    """Fixed-size staging slots standing in for DMA-visible shared memory.

    Ciphertext may only enter after its record is committed; on-the-fly
    payloads (encrypted at the live counter) are committed by construction.
    """

    def __init__(self, slots: int) -> None:
        self.slots = slots
        self.occupied = 0
        self.high_water = 0
        self.insertions = 0
        self.violations = 0

    def insert(self, msg: CiphertextMsg, record: CiphertextRecord | None) -> None:
        self.insertions += 1
        if record is not None and record.state is not RecordState.COMMITTED:
            self.violations += 1
            logger.error("uncommitted ciphertext pushed toward shared memory")
        self.occupied += 1
        self.high_water = max(self.high_water, self.occupied)

    def release(self) -> None:
        self.occupied -= 1


def _chunk_spans(length: int, chunk: int) -> list[tuple[int, int]]:
    return [(off, min(chunk, length - off)) for off in range(0, length, chunk)]


class Engine:
    def __init__(
        self,
        memory: HostMemory,
        cpu: ChannelEndpoint,
        gpu: ChannelEndpoint,
        predictor: Predictor,
        config: EngineConfig | None = None,
    ) -> None:
        self.memory = memory
        self.cpu = cpu
        self.gpu = gpu
        self.predictor = predictor
        self.config = config or EngineConfig()
        self.validator = Validator(memory, window=self.config.window)
        self.ring = SharedRing(self.config.ring_slots)
        self.actions: list[Action] = []
        self.device_mem: dict[int, bytearray] = {}
        self.counters: dict[str, int] = {
            "hit": 0, "iv_ahead": 0, "iv_behind": 0, "stale": 0, "miss": 0,
            "committed_sends": 0, "on_the_fly": 0, "data_msgs": 0, "nops": 0,
            "relinquishes": 0, "relinquished_records": 0, "nop_burned_records": 0,
            "expired_records": 0, "deferred_decrypts": 0, "sync_decrypts": 0,
            "write_faults": 0, "read_faults": 0, "spec_encrypts": 0,
            "replans": 0, "replanned_records": 0,
            "spec_skipped": 0, "spec_cancelled": 0, "small_io_h2d": 0,
            "small_io_d2h": 0, "syncs": 0, "seq_batches": 0, "seq_hits": 0,
            "suspended": 0, "suspended_fallback": 0, "final_discarded": 0,
        }
        self._initial_send_iv = cpu.send_iv
        self._spec_queue: deque[_SpecTask] = deque()
        self._suspended: list[_Suspended] = []
        self._batch_ins: list[int] = []
        self._predicted_queue: list[int] = []
        self._deferred: dict[int, DeferredDecrypt] = {}
        self._next_task_id = 1
        self._next_seq = 0
        self._next_label_iv = 0
        # metadata rides alongside the FIFO so the device model can attribute
        # each delivered message without putting addresses on the wire
        self._h2d_meta: deque[tuple] = deque()
        self.delivered: list[tuple[int, int, int, str]] = []  # (seq, base, len, sha256)
        self.d2h_stream: list[tuple[int, int, str]] = []  # (seq, len, sha256)
        self._rng = random.Random(0xC0DE)

    # -- helpers ------------------------------------------------------------------

    def _seq(self) -> int:
        self._next_seq += 1
        return self._next_seq

    def _act(self, kind: ActionKind, **kw) -> None:
        self.actions.append(Action(kind, **kw))

    def _resolve_decrypts_over(self, base: int, length: int, blocking: bool) -> None:
        for guard in self.memory.read_guards_over(base, length):
            task = self._deferred.get(guard.task_id)
            if task is not None:
                self._apply_decrypt(task, blocking=blocking)

    def _apply_decrypt(self, task: DeferredDecrypt, blocking: bool) -> None:
        if task.state == "done":
            return
        block = self.memory.block(task.block_id)
        inner = task.base - block.base
        for msg, iv, offset in task.chunks:
            plaintext = self.cpu.deferred_decrypt(msg, iv)
            self.memory.system_write(task.block_id, inner + offset, plaintext)
        self.memory.release_read_guard(task.task_id)
        task.state = "done"
        del self._deferred[task.task_id]
        if blocking:
            self.counters["sync_decrypts"] += 1
            self._act(ActionKind.RESOLVE_DECRYPT, task_id=task.task_id, nbytes=task.len)

    def _read_source(self, base: int, length: int) -> bytes:
        self._resolve_decrypts_over(base, length, blocking=True)
        block, offset = self.memory.block_at(base, length)
        return bytes(block.data[offset : offset + length])

    def _drain_gpu(self) -> None:
        while self.gpu.pending():
            got = self.gpu.recv_msg()
            meta = self._h2d_meta.popleft()
            if got.nop:
                continue
            kind, seq, block_id, base, offset, nbytes = meta
            digest = hashlib.sha256(got.plaintext).hexdigest()
            if self.config.record_stream:
                self.delivered.append((seq, base + offset, nbytes, digest))
            if block_id is not None:
                buf = self.device_mem.setdefault(
                    block_id, bytearray(self.memory.block(block_id).len)
                )
                block = self.memory.block(block_id)
                inner = base - block.base + offset
                buf[inner : inner + nbytes] = got.plaintext

    def _send_h2d_msg(
        self,
        msg: CiphertextMsg,
        record: CiphertextRecord | None,
        meta: tuple,
        seq: int,
    ) -> None:
        self.ring.insert(msg, record)
        iv = self.cpu.send_iv
        self.cpu.send(msg)
        self._h2d_meta.append(meta)
        self.ring.release()
        self.counters["data_msgs"] += 1
        self._act(
            ActionKind.H2D_DATA,
            iv=iv,
            nbytes=msg.declared_len,
            record_id=record.id if record else None,
            committed=record is not None,
            otf=record is None,
            seq=seq,
        )
        self._drain_gpu()

    # -- host-to-device -----------------------------------------------------------

    def copy_h2d(self, req: CopyRequest) -> CopyHandle:
        if req.direction != "h2d":
            raise ValueError("copy_h2d takes a host-to-device request")
        self._complete_spec_tasks()
        seq = self._seq()
        handle = CopyHandle(seq)
        if req.transfer_class is TransferClass.SMALL_IO:
            self.counters["small_io_h2d"] += 1
            self._send_on_the_fly(req, handle, seq)
            return handle

        verdict = self.validator.validate(req.base, req.len, self.cpu.send_iv)
        handle.verdict = verdict.kind
        self.counters[verdict.kind.value] += 1
        self._batch_ins.append(req.block_id)
        if verdict.kind is VerdictKind.HIT:
            self._commit_and_send(verdict.record, handle, seq)
        elif verdict.kind is VerdictKind.IV_AHEAD:
            self.counters["suspended"] += 1
            self._suspended.append(_Suspended(req, verdict.record, handle))
        elif verdict.kind is VerdictKind.IV_BEHIND:
            self.relinquish()
            self._send_on_the_fly(req, handle, seq)
        else:  # STALE or MISS
            self._send_on_the_fly(req, handle, seq)
        return handle

    def _send_on_the_fly(self, req: CopyRequest, handle: CopyHandle, seq: int) -> None:
        for task in self._spec_queue:
            if not task.cancelled and task.base == req.base and task.len == req.len:
                task.cancelled = True
                self.counters["spec_cancelled"] += 1
        data = self._read_source(req.base, req.len)
        for offset, n in _chunk_spans(req.len, self.config.chunk_bytes):
            msg = self.cpu.encrypt_next(data[offset : offset + n])
            meta = ("data", seq, req.block_id, req.base, offset, n)
            self._send_h2d_msg(msg, None, meta, seq=seq)
        self.counters["on_the_fly"] += 1
        handle.state = HandleState.DONE

    def _commit_and_send(
        self, record: CiphertextRecord, handle: CopyHandle, seq: int
    ) -> None:
        if record.iv != self.cpu.send_iv:
            raise EngineError(
                f"commit at counter {self.cpu.send_iv} for record at {record.iv}"
            )
        self.validator.commit(record.id)
        offset = 0
        for msg in record.chunks:
            meta = ("data", seq, record.block_id, record.base, offset, msg.declared_len)
            self._send_h2d_msg(msg, record, meta, seq=seq)
            offset += msg.declared_len
        self.counters["committed_sends"] += 1
        handle.state = HandleState.DONE

    # -- device-to-host -----------------------------------------------------------

    def copy_d2h(self, req: CopyRequest) -> CopyHandle:
        if req.direction != "d2h":
            raise ValueError("copy_d2h takes a device-to-host request")
        self._complete_spec_tasks()
        seq = self._seq()
        handle = CopyHandle(seq)
        buf = self.device_mem.get(req.block_id)
        if buf is None:
            raise EngineError(f"device does not hold block {req.block_id}")
        block = self.memory.block(req.block_id)
        inner = req.base - block.base
        data = bytes(buf[inner : inner + req.len])

        swap = req.transfer_class in (TransferClass.MODEL_WEIGHTS, TransferClass.KV_CACHE)
        spans = _chunk_spans(req.len, self.config.chunk_bytes)
        for offset, n in spans:
            self.gpu.send(self.gpu.encrypt_next(data[offset : offset + n]))
        if inner == 0 and req.len == block.len:
            del self.device_mem[req.block_id]

        if swap and self.config.defer_swap_decrypt:
            task_id = self._next_task_id
            self._next_task_id += 1
            chunks = []
            for offset, n in spans:
                msg, iv = self.cpu.take_ciphertext()
                chunks.append((msg, iv, offset))
            task = DeferredDecrypt(task_id, req.block_id, req.base, req.len, chunks)
            self._deferred[task_id] = task
            self.memory.install_read_guard(req.base, req.len, task_id)
            self.counters["deferred_decrypts"] += 1
            self._act(ActionKind.D2H_DATA, nbytes=req.len, task_id=task_id, seq=seq)
        else:
            for offset, n in spans:
                plaintext = self.cpu.recv()
                self.memory.system_write(req.block_id, inner + offset, plaintext)
            self._act(ActionKind.D2H_DATA, nbytes=req.len, committed=True, seq=seq)
        if swap:
            self.predictor.observe_swap_out(req.block_id)
        handle.state = HandleState.DONE
        return handle

    # -- small transfers outside the block space ------------------------------------

    def small_io(self, direction: str, size: int, payload: bytes | None = None) -> None:
        """Token-sized transfer with no backing block. Never speculated."""
        self._complete_spec_tasks()
        if payload is None:
            payload = self._rng.randbytes(size)
        seq = self._seq()
        if direction == "h2d":
            self.counters["small_io_h2d"] += 1
            msg = self.cpu.encrypt_next(payload)
            meta = ("small_io", seq, None, 0, 0, size)
            self._send_h2d_msg(msg, None, meta, seq=seq)
        elif direction == "d2h":
            self.counters["small_io_d2h"] += 1
            self.gpu.send(self.gpu.encrypt_next(payload))
            plaintext = self.cpu.recv()
            self.d2h_stream.append((seq, size, hashlib.sha256(plaintext).hexdigest()))
            self.counters["sync_decrypts"] += 1
            self._act(ActionKind.D2H_DATA, nbytes=size, committed=True, seq=seq)
        else:
            raise ValueError(f"unknown direction {direction!r}")

    # -- application access (trace AppWrite events, reads) ---------------------------

    def app_write(self, block_id: int, offset: int, data: bytes) -> None:
        self._complete_spec_tasks()
        block = self.memory.block(block_id)
        self._resolve_decrypts_over(block.base + offset, len(data), blocking=True)
        faults = self.memory.write(block_id, offset, data)
        self.counters["write_faults"] += len(faults)

    def app_read(self, block_id: int, offset: int, length: int) -> bytes:
        self._complete_spec_tasks()
        data, faults = self.memory.read(block_id, offset, length)
        read_faults = [f for f in faults if isinstance(f, ReadFault)]
        if read_faults:
            self.counters["read_faults"] += len(read_faults)
            for fault in read_faults:
                task = self._deferred.get(fault.task_id)
                if task is not None:
                    self._apply_decrypt(task, blocking=True)
            data, _ = self.memory.read(block_id, offset, length)
        return data

    # -- pipeline control --------------------------------------------------------------

    def speculate_tick(self) -> None:
        """Pull predictions and queue encryption work up to window capacity.

        When the predicted request order no longer matches the order already
        labeled (the hypothesis re-ranked the outstanding blocks), the stale
        pipeline is discarded and rebuilt off the critical path, so the
        counters assigned to staged ciphertext always follow the expected
        arrival order.
        """
        self._complete_spec_tasks()
        if not self.config.speculate:
            return
        batches = self.predictor.predict_batches(
            current_iv=self.cpu.send_iv,
            leeway=self.config.leeway,
            depth=self.config.depth,
        )
        flat = [p for batch in batches for p in batch]
        self._predicted_queue = [p.block for p in flat]
        planned = [
            rec.block_id
            for rec in sorted(self.validator.pending_records(), key=lambda r: r.iv)
        ] + [t.block_id for t in self._spec_queue if not t.cancelled]
        if any(have != pred.block for have, pred in zip(planned, flat)):
            n = self._discard_pipeline()
            self.counters["replans"] += 1
            self.counters["replanned_records"] += n
            self._act(ActionKind.RELINQUISH, count=n)
        capacity = self.config.window - self.validator.pending_count() - len(self._spec_queue)
        queued_blocks = {t.block_id for t in self._spec_queue if not t.cancelled}
        for pred in flat:
            if capacity <= 0:
                break
            block = self.memory.block(pred.block)
            if pred.block in queued_blocks or self.validator.has_pending_range(
                block.base, block.len
            ):
                continue
            span = len(_chunk_spans(block.len, self.config.chunk_bytes))
            iv = max(pred.predicted_iv, self._next_label_iv)
            self._next_label_iv = iv + span
            self._spec_queue.append(_SpecTask(pred.block, block.base, block.len, iv))
            queued_blocks.add(pred.block)
            capacity -= 1

    def _complete_spec_tasks(self) -> None:
        """Run queued encryption work in issue order and label the results."""
        while self._spec_queue:
            task = self._spec_queue.popleft()
            if (
                task.cancelled
                or task.block_id not in self.predictor.outstanding
                or self.validator.has_pending_range(task.base, task.len)
            ):
                self.counters["spec_skipped"] += 1
                continue
            self._resolve_decrypts_over(task.base, task.len, blocking=False)
            block = self.memory.block(task.block_id)
            inner = task.base - block.base
            data = bytes(block.data[inner : inner + task.len])
            chunks = [
                encrypt_at(
                    self.cpu.key, task.iv + i, data[off : off + n],
                    self.cpu.send_direction,
                )
                for i, (off, n) in enumerate(_chunk_spans(task.len, self.config.chunk_bytes))
            ]
            rid = self.validator.label(
                chunks, task.base, task.len, task.iv, block_id=task.block_id
            )
            self.counters["spec_encrypts"] += 1
            self._act(ActionKind.SPEC_ENCRYPT, record_id=rid, nbytes=task.len, iv=task.iv)

    def _discard_pipeline(self) -> int:
        discarded = 0
        for rec in self.validator.pending_records():
            self.validator.invalidate(rec.id)
            discarded += 1
        for task in self._spec_queue:
            if not task.cancelled:
                task.cancelled = True
                self.counters["spec_cancelled"] += 1
        self._next_label_iv = 0
        return discarded

    def relinquish(self) -> int:
        """Discard every pending speculative record; their counters can no
        longer align with the channel.  The pattern hypothesis survives, only
        counter assignments restart."""
        discarded = self._discard_pipeline()
        self.counters["relinquishes"] += 1
        self.counters["relinquished_records"] += discarded
        self._act(ActionKind.RELINQUISH, count=discarded)
        return discarded

    def sync(self) -> None:
        """Batch boundary: re-order suspended requests by their record's
        counter, pad NOPs up to each one, commit, and leave nothing pending."""
        self._complete_spec_tasks()
        for susp in sorted(self._suspended, key=lambda s: s.record.iv):
            if susp.record.state is not RecordState.PENDING:
                self.counters["suspended_fallback"] += 1
                self._send_on_the_fly(susp.req, susp.handle, susp.handle.seq)
                continue
            while self.cpu.send_iv < susp.record.iv:
                burned = self.validator.pending_record_at_iv(self.cpu.send_iv)
                if burned is not None and burned.id != susp.record.id:
                    self.validator.invalidate(burned.id)
                    self.counters["nop_burned_records"] += 1
                iv = self.cpu.send_iv
                self.cpu.nop(self.config.nop_bytes)
                self._h2d_meta.append(("nop", None, None, 0, 0, self.config.nop_bytes))
                self.counters["nops"] += 1
                self._act(ActionKind.NOP, iv=iv, nbytes=self.config.nop_bytes)
                self._drain_gpu()
            self._commit_and_send(susp.record, susp.handle, susp.handle.seq)
        self._suspended.clear()
        self.counters["expired_records"] += self.validator.invalidate_pending_below(
            self.cpu.send_iv
        )
        self.drain_decrypts()
        if self._batch_ins:
            batch = list(self._batch_ins)
            self._batch_ins.clear()
            self.counters["seq_batches"] += 1
            k = len(batch)
            if len(self._predicted_queue) >= k and set(self._predicted_queue[:k]) == set(batch):
                self.counters["seq_hits"] += 1
                del self._predicted_queue[:k]
            else:
                self._predicted_queue.clear()
            self.predictor.observe_swap_in(batch)
        self.predictor.observe_sync()
        self._act(ActionKind.SYNC_POINT)
        self.counters["syncs"] += 1
        self.speculate_tick()

    def drain_decrypts(self) -> None:
        for task in list(self._deferred.values()):
            self._apply_decrypt(task, blocking=False)

    def finish(self) -> None:
        """End of run: settle suspensions, land decryptions, discard leftover
        speculative state, and check the counter ledger."""
        if self._suspended or self._batch_ins:
            self.sync()
        self.drain_decrypts()
        for rec in self.validator.pending_records():
            self.validator.invalidate(rec.id)
            self.counters["final_discarded"] += 1
        self._spec_queue.clear()
        self.audit()

    def audit(self) -> None:
        expect = self._initial_send_iv + self.counters["data_msgs"] + self.counters["nops"]
        if self.cpu.send_iv != expect:
            raise EngineError(
                f"counter ledger violated: send counter {self.cpu.send_iv}, "
                f"expected {expect}"
            )
        if self.ring.violations:
            raise EngineError(
                f"{self.ring.violations} uncommitted payloads reached the shared ring"
            )

    # -- reporting -----------------------------------------------------------------

    def seed_device(self, block_id: int, data: bytes) -> None:
        """Install device-resident content (state born on the GPU)."""
        self.device_mem[block_id] = bytearray(data)

    def sequence_hit_rate(self) -> float:
        total = self.counters["seq_batches"]
        return self.counters["seq_hits"] / total if total else 0.0

    def report(self) -> dict:
        out = dict(self.counters)
        out["sequence_hit_rate"] = self.sequence_hit_rate()
        out["ring_violations"] = self.ring.violations
        out["ring_high_water"] = self.ring.high_water
        out["send_iv"] = self.cpu.send_iv
        out["gpu_send_iv"] = self.gpu.send_iv
        return out
