"""Transcript authentication with one-time polynomial MACs over GF(2^128).

Every frame exchanged in a stage is absorbed into an :class:`AuthContext`.
At the stage boundary the context is finalized with 32 fresh bytes from the
shared :class:`SecretStore` (16 bytes evaluation point, 16 bytes mask) and
the resulting tags are compared between the parties.
"""
from __future__ import annotations

import hmac
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

TAG_BYTES = 16
KEY_QUOTA = 32
HANDLE_BYTES = 8
DEFAULT_LOW_WATERMARK = 256

# x^128 = x^7 + x^2 + x + 1
_REDUCTION = 0x87
_MASK64 = (1 << 64) - 1


class AuthError(Exception):
    """Tag mismatch or an inconsistent key-store operation."""


class ReplenishNeeded(Exception):
    """The secret pool cannot cover the next tag."""


def gf128_mul(a: int, b: int) -> int:
    """Reference multiply; bit i of an integer is the coefficient of x^i."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a >> 128:
            a = (a & ((1 << 128) - 1)) ^ _REDUCTION
    return r


@numba.njit(cache=True)
def _mul(ah, al, bh, bl):
    rh = np.uint64(0)
    rl = np.uint64(0)
    one = np.uint64(1)
    red = np.uint64(0x87)
    for i in range(128):
        if i < 64:
            bit = (bl >> np.uint64(i)) & one
        else:
            bit = (bh >> np.uint64(i - 64)) & one
        if bit:
            rh ^= ah
            rl ^= al
        carry = ah >> np.uint64(63)
        ah = (ah << one) | (al >> np.uint64(63))
        al = al << one
        if carry:
            al ^= red
    return rh, rl


@numba.njit(cache=True)
def _horner(words, hh, hl):
    acc_h = np.uint64(0)
    acc_l = np.uint64(0)
    for i in range(words.shape[0] // 2):
        acc_h ^= words[2 * i]
        acc_l ^= words[2 * i + 1]
        acc_h, acc_l = _mul(acc_h, acc_l, hh, hl)
    return acc_h, acc_l


def poly_hash(blocks: bytes, point: bytes) -> bytes:
    """sum_i B_i * H^(L-i+1) over 16-byte big-endian blocks."""
    if len(blocks) % 16:
        raise ValueError("block stream must be a multiple of 16 bytes")
    h = int.from_bytes(point, "big")
    words = np.frombuffer(blocks, dtype=">u8").astype(np.uint64)
    rh, rl = _horner(words, np.uint64(h >> 64), np.uint64(h & _MASK64))
    return (int(rh) << 64 | int(rl)).to_bytes(16, "big")


def frame_messages(messages) -> bytes:
    """Length-delimited block encoding; the marker bit keeps every length block non-zero."""
    parts = []
    for m in messages:
        parts.append(struct.pack(">QQ", 1 << 63, len(m)))
        parts.append(m)
        if len(m) % 16:
            parts.append(bytes(16 - len(m) % 16))
    return b"".join(parts)


def one_time_tag(messages, key: bytes) -> bytes:
    if len(key) != KEY_QUOTA:
        raise ValueError(f"tag key must be {KEY_QUOTA} bytes")
    digest = int.from_bytes(poly_hash(frame_messages(messages), key[:16]), "big")
    return (digest ^ int.from_bytes(key[16:], "big")).to_bytes(TAG_BYTES, "big")


@dataclass
class SecretStore:
    pool: bytearray = field(default_factory=bytearray)
    low_watermark: int = DEFAULT_LOW_WATERMARK
    consumed_offset: int = 0
    consumption_log: list = field(default_factory=list)
    replenish_log: list = field(default_factory=list)

    @classmethod
    def from_hex(cls, text: str, **kw) -> "SecretStore":
        return cls(bytearray(bytes.fromhex("".join(text.split()))), **kw)

    @property
    def remaining(self) -> int:
        return len(self.pool) - self.consumed_offset

    @property
    def needs_replenish(self) -> bool:
        return self.remaining < self.low_watermark

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise ReplenishNeeded(f"need {n} secret bytes, {self.remaining} left")
        start = self.consumed_offset
        self.consumed_offset += n
        self.consumption_log.append((start, n))
        return bytes(self.pool[start:start + n])

    def replenish(self, key: bytes, handle: bytes, peer_handle: bytes | None = None) -> None:
        if peer_handle is not None and peer_handle != handle:
            raise AuthError("replenishment handle mismatch between parties")
        self.pool.extend(key)
        self.replenish_log.append((bytes(handle), len(key)))


@dataclass
class AuthContext:
    key_handle: bytes
    messages: list = field(default_factory=list)
    finalized: bool = False

    @property
    def message_count(self) -> int:
        return len(self.messages)

    def absorb(self, message: bytes) -> "AuthContext":
        if self.finalized:
            raise AuthError("context already finalized")
        self.messages.append(message if isinstance(message, bytes) else bytes(message))
        return self

    def digest_state(self) -> bytes:
        """Encoded transcript still waiting for its one-time key."""
        return frame_messages(self.messages)


def absorb(ctx: AuthContext, message: bytes) -> AuthContext:
    return ctx.absorb(message)


def finalize_tag(ctx: AuthContext, store: SecretStore) -> bytes:
    if ctx.finalized:
        raise AuthError("context already finalized")
    key = store.take(KEY_QUOTA)
    ctx.finalized = True
    return one_time_tag(ctx.messages, key)


def verify_exchange(local_tag: bytes, remote_tag: bytes) -> bool:
    if len(local_tag) != TAG_BYTES or not hmac.compare_digest(local_tag, remote_tag):
        raise AuthError("authentication tag mismatch")
    return True


def encode_tag(handle: bytes, tag: bytes) -> bytes:
    return handle + tag


def decode_tag(payload: bytes) -> tuple[bytes, bytes]:
    if len(payload) != HANDLE_BYTES + TAG_BYTES:
        raise AuthError("malformed tag message")
    return payload[:HANDLE_BYTES], payload[HANDLE_BYTES:]
