"""Counter-synchronized authenticated channel between a CPU and a GPU endpoint.

Every message on a direction is encrypted with AES-256-GCM under a nonce
derived from a per-direction counter that advances by exactly one per
message.  The counter value itself never travels on the wire: both sides
track it independently, so any replayed, reordered, duplicated, or tampered
message fails authentication at the receiver.

A NOP is a 1-byte dummy message whose only purpose is to advance the
counters on one direction.  The payload is a constant, so a NOP leaks
nothing beyond its own existence.
"""

from __future__ import annotations

import os
import random
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_BYTES = 32
TAG_BYTES = 16
NONCE_BYTES = 12
MAX_MESSAGE_BYTES = 32 * 1024 * 1024
NOP_FILL = 0x00

_IV_LIMIT = 1 << 64


class AuthError(Exception):
    """Authentication failed: counter desynchronization or tampering."""


class ChannelEmpty(Exception):
    """recv was called with no message queued."""


class IvReuseError(Exception):
    """A counter value was consumed twice on one direction (sender bug)."""


class Direction(Enum):
    HOST_TO_DEVICE = 0
    DEVICE_TO_HOST = 1


@dataclass(frozen=True)
class ChannelKey:
    key_bytes: bytes

    def __post_init__(self) -> None:
        if len(self.key_bytes) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes")


@dataclass(frozen=True)
class CiphertextMsg:
    """One encrypted message. The counter value is deliberately not a field."""

    payload: bytes
    auth_tag: bytes
    declared_len: int
    nop: bool = False


@dataclass(frozen=True)
class Delivery:
    plaintext: bytes
    nop: bool
    iv: int


def _nonce(direction: Direction, iv: int) -> bytes:
    # 32-bit direction tag || 64-bit counter: unique across both directions
    # under a single session key.
    if not 0 <= iv < _IV_LIMIT:
        raise ValueError("counter out of range")
    return direction.value.to_bytes(4, "big") + iv.to_bytes(8, "big")


def encrypt_at(
    key: ChannelKey,
    iv: int,
    plaintext: bytes,
    direction: Direction = Direction.HOST_TO_DEVICE,
) -> CiphertextMsg:
    """Deterministically encrypt ``plaintext`` at a specific counter value."""
    if len(plaintext) < 1:
        raise ValueError("plaintext must be at least 1 byte")
    if len(plaintext) > MAX_MESSAGE_BYTES:
        raise ValueError("message exceeds the 32 MiB channel limit; chunk it")
    sealed = AESGCM(key.key_bytes).encrypt(_nonce(direction, iv), plaintext, None)
    return CiphertextMsg(
        payload=sealed[:-TAG_BYTES],
        auth_tag=sealed[-TAG_BYTES:],
        declared_len=len(plaintext),
    )


def decrypt_at(
    key: ChannelKey,
    iv: int,
    msg: CiphertextMsg,
    direction: Direction = Direction.HOST_TO_DEVICE,
) -> bytes:
    try:
        return AESGCM(key.key_bytes).decrypt(
            _nonce(direction, iv), msg.payload + msg.auth_tag, None
        )
    except InvalidTag as exc:
        raise AuthError(f"authentication failed at counter {iv}") from exc


@dataclass
class _Lane:
    """One direction of the wire: a FIFO plus a transmitted-counter audit."""

    queue: deque[CiphertextMsg] = field(default_factory=deque)
    sent_ivs: set[int] = field(default_factory=set)
    sent_log: list[tuple[int, bool, int]] = field(default_factory=list)  # (iv, nop, size)


class ChannelEndpoint:
    """One side of the channel. Owns a send counter and a receive counter."""

    def __init__(self, side: str, channel: "Channel", send_dir: Direction) -> None:
        self.side = side
        self._channel = channel
        self._send_dir = send_dir
        self._recv_dir = (
            Direction.DEVICE_TO_HOST
            if send_dir is Direction.HOST_TO_DEVICE
            else Direction.HOST_TO_DEVICE
        )
        self.send_iv = 0
        self.recv_iv = 0

    @property
    def key(self) -> ChannelKey:
        return self._channel.key

    @property
    def channel(self) -> "Channel":
        return self._channel

    @property
    def send_direction(self) -> Direction:
        return self._send_dir

    def encrypt_next(self, plaintext: bytes) -> CiphertextMsg:
        """Encrypt at the current send counter (the counter does not advance)."""
        return encrypt_at(self.key, self.send_iv, plaintext, self._send_dir)

    def send(self, msg: CiphertextMsg) -> None:
        """Queue ``msg`` for the peer and advance the send counter by one.

        The caller must have encrypted ``msg`` at the current send counter;
        the transmitted-counter audit rejects double use of a value.
        """
        lane = self._channel.lane(self._send_dir)
        if self.send_iv in lane.sent_ivs:
            raise IvReuseError(
                f"counter {self.send_iv} already consumed on {self._send_dir.name}"
            )
        lane.sent_ivs.add(self.send_iv)
        lane.sent_log.append((self.send_iv, msg.nop, msg.declared_len))
        lane.queue.append(msg)
        self.send_iv += 1

    def nop(self, size: int = 1) -> None:
        """Send a dummy message that only advances the counters."""
        msg = replace(self.encrypt_next(bytes([NOP_FILL]) * size), nop=True)
        self.send(msg)

    def pending(self) -> int:
        return len(self._channel.lane(self._recv_dir).queue)

    def recv_msg(self) -> Delivery:
        """Decrypt and consume the next queued message (NOP or data)."""
        lane = self._channel.lane(self._recv_dir)
        if not lane.queue:
            raise ChannelEmpty(f"{self.side}: nothing queued")
        msg = lane.queue.popleft()
        plaintext = decrypt_at(self.key, self.recv_iv, msg, self._recv_dir)
        iv = self.recv_iv
        self.recv_iv += 1
        return Delivery(plaintext=plaintext, nop=msg.nop, iv=iv)

    def recv(self) -> bytes:
        """Return the next data plaintext, transparently discarding NOPs."""
        while True:
            got = self.recv_msg()
            if not got.nop:
                return got.plaintext

    def take_ciphertext(self) -> tuple[CiphertextMsg, int]:
        """Consume the next message without decrypting it.

        The receive counter advances now; the returned counter value must be
        used for the deferred decryption.
        """
        lane = self._channel.lane(self._recv_dir)
        if not lane.queue:
            raise ChannelEmpty(f"{self.side}: nothing queued")
        msg = lane.queue.popleft()
        iv = self.recv_iv
        self.recv_iv += 1
        return msg, iv

    def deferred_decrypt(self, msg: CiphertextMsg, iv: int) -> bytes:
        return decrypt_at(self.key, iv, msg, self._recv_dir)


class Channel:
    """Shared state for both endpoints: key, the two lanes, test hooks."""

    def __init__(self, key: ChannelKey, test_hooks: bool = False) -> None:
        self.key = key
        self._lanes = {d: _Lane() for d in Direction}
        self._test_hooks = test_hooks

    def lane(self, direction: Direction) -> _Lane:
        return self._lanes[direction]

    def sent_log(self, direction: Direction) -> list[tuple[int, bool, int]]:
        return list(self._lanes[direction].sent_log)

    def audit_no_iv_reuse(self) -> None:
        for direction, lane in self._lanes.items():
            if len(lane.sent_ivs) != len(lane.sent_log):
                raise IvReuseError(f"duplicate counters on {direction.name}")

    # -- fault-injection hooks, only under a test configuration --------------

    def _require_hooks(self) -> None:
        if not self._test_hooks:
            raise RuntimeError("test hooks are disabled on this channel")

    def hook_swap_in_flight(self, direction: Direction, i: int, j: int) -> None:
        self._require_hooks()
        q = self._lanes[direction].queue
        q[i], q[j] = q[j], q[i]

    def hook_duplicate_in_flight(self, direction: Direction, index: int = -1) -> None:
        self._require_hooks()
        q = self._lanes[direction].queue
        q.append(q[index])

    def hook_resend_raw(self, direction: Direction, msg: CiphertextMsg) -> None:
        """Enqueue a message bypassing counter advance and the audit."""
        self._require_hooks()
        self._lanes[direction].queue.append(msg)

    def hook_corrupt_in_flight(
        self, direction: Direction, index: int = -1, byte_index: int = 0, bit: int = 0,
        in_tag: bool = False,
    ) -> None:
        self._require_hooks()
        q = self._lanes[direction].queue
        msg = q[index]
        if in_tag:
            raw = bytearray(msg.auth_tag)
            raw[byte_index % len(raw)] ^= 1 << (bit % 8)
            q[index] = replace(msg, auth_tag=bytes(raw))
        else:
            raw = bytearray(msg.payload)
            raw[byte_index % len(raw)] ^= 1 << (bit % 8)
            q[index] = replace(msg, payload=bytes(raw))


def new_channel(
    seed: int | None = None,
    initial_iv_h2d: int = 0,
    initial_iv_d2h: int = 0,
    test_hooks: bool = False,
) -> tuple[ChannelEndpoint, ChannelEndpoint]:
    """Create both endpoints of a fresh channel.

    Both sides share the key and both directional counters, as established
    once at session setup.  A seed gives a reproducible key for simulation;
    ``None`` draws from the OS.
    """
    if seed is None:
        key = ChannelKey(os.urandom(KEY_BYTES))
    else:
        key = ChannelKey(random.Random(seed).randbytes(KEY_BYTES))
    chan = Channel(key, test_hooks=test_hooks)
    cpu = ChannelEndpoint("cpu", chan, Direction.HOST_TO_DEVICE)
    gpu = ChannelEndpoint("gpu", chan, Direction.DEVICE_TO_HOST)
    cpu.send_iv = initial_iv_h2d
    gpu.recv_iv = initial_iv_h2d
    gpu.send_iv = initial_iv_d2h
    cpu.recv_iv = initial_iv_d2h
    return cpu, gpu
