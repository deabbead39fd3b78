"""Two-bit extension of Naor's commitment with AES-256-CTR as the PRG.

Strings are 768-bit big-endian byte strings (byte 0 holds the most
significant bits).  ``r2`` is ``r1`` shifted one position towards the
least significant end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aes import aes256_encrypt_blocks
from .rng import Drbg

SEED_BYTES = 32
STRING_BYTES = 96
OPENING_BYTES = SEED_BYTES + 1
COUNTER_BLOCKS = np.frombuffer(b"".join(i.to_bytes(16, "big") for i in range(6)), dtype=np.uint8).reshape(6, 16)

_ZERO = bytes(STRING_BYTES)
_ONES = b"\xff" * STRING_BYTES


def shift_right(r: bytes) -> bytes:
    return (int.from_bytes(r, "big") >> 1).to_bytes(len(r), "big")


@dataclass(frozen=True)
class PublicString:
    r1: bytes

    def __post_init__(self):
        if len(self.r1) != STRING_BYTES:
            raise ValueError(f"r1 must be {STRING_BYTES} bytes")
        if self.r1 in (_ZERO, _ONES):
            raise ValueError("r1 must not be all-zeros or all-ones")

    @property
    def r2(self) -> bytes:
        return shift_right(self.r1)

    def masks(self) -> np.ndarray:
        """Mask table indexed by ``2*b1 + b2``: 0, r2, r1, r1^r2."""
        r1 = np.frombuffer(self.r1, dtype=np.uint8)
        r2 = np.frombuffer(self.r2, dtype=np.uint8)
        return np.stack([np.zeros_like(r1), r2, r1, r1 ^ r2])


@dataclass(frozen=True)
class Commitment:
    c: bytes

    def to_bytes(self) -> bytes:
        return self.c

    @classmethod
    def from_bytes(cls, data: bytes) -> "Commitment":
        if len(data) != STRING_BYTES:
            raise ValueError(f"commitment record must be {STRING_BYTES} bytes")
        return cls(bytes(data))


@dataclass(frozen=True)
class Opening:
    x: bytes
    b1: int
    b2: int

    def to_bytes(self) -> bytes:
        return self.x + bytes([(self.b1 & 1) << 1 | (self.b2 & 1)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Opening":
        if len(data) != OPENING_BYTES:
            raise ValueError(f"opening record must be {OPENING_BYTES} bytes")
        flags = data[SEED_BYTES]
        if flags & ~0x03:
            raise ValueError("opening flag byte uses reserved bits")
        return cls(bytes(data[:SEED_BYTES]), flags >> 1 & 1, flags & 1)


def sample_public(rng: Drbg) -> PublicString:
    while True:
        r1 = rng.bytes(STRING_BYTES)
        if r1 not in (_ZERO, _ONES):
            return PublicString(r1)


def expand_seed(x: bytes) -> bytes:
    """G(x): AES-256 encryptions of the counters 0..5 under key ``x``."""
    if len(x) != SEED_BYTES:
        raise ValueError(f"seed must be {SEED_BYTES} bytes")
    return expand_seeds(np.frombuffer(x, dtype=np.uint8).reshape(1, SEED_BYTES))[0].tobytes()


def expand_seeds(xs: np.ndarray) -> np.ndarray:
    """Row-wise G over an (N, 32) seed array; returns (N, 96)."""
    return aes256_encrypt_blocks(xs, COUNTER_BLOCKS).reshape(-1, STRING_BYTES)


def commit(pub: PublicString, opening: Opening) -> Commitment:
    g = int.from_bytes(expand_seed(opening.x), "big")
    mask = (int.from_bytes(pub.r1, "big") if opening.b1 else 0) ^ (int.from_bytes(pub.r2, "big") if opening.b2 else 0)
    return Commitment((g ^ mask).to_bytes(STRING_BYTES, "big"))


def verify_open(pub: PublicString, c: Commitment, opening: Opening) -> bool:
    try:
        return commit(pub, opening).c == c.c
    except ValueError:
        return False


def commit_batch(pub: PublicString, xs: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Commitments for many events at once; returns an (N, 96) uint8 array in event order."""
    g = expand_seeds(xs)
    sel = (np.asarray(b1, dtype=np.uint8) << 1) | np.asarray(b2, dtype=np.uint8)
    return g ^ pub.masks()[sel]


def verify_batch(pub: PublicString, commitments: np.ndarray, xs: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Boolean acceptance per record."""
    return np.all(commit_batch(pub, xs, b1, b2) == commitments, axis=1)


def encode_openings(xs: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> bytes:
    rec = np.empty((len(xs), OPENING_BYTES), dtype=np.uint8)
    rec[:, :SEED_BYTES] = xs
    rec[:, SEED_BYTES] = (np.asarray(b1, dtype=np.uint8) << 1) | np.asarray(b2, dtype=np.uint8)
    return rec.tobytes()


def decode_openings(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(data) % OPENING_BYTES:
        raise ValueError("opening batch length is not a multiple of the record size")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, OPENING_BYTES)
    flags = rec[:, SEED_BYTES]
    if np.any(flags & 0xFC):
        raise ValueError("opening flag byte uses reserved bits")
    return rec[:, :SEED_BYTES].copy(), (flags >> 1) & 1, flags & 1


# Preprocessing variant: commit to random pairs offline, publish m ^ b online.

@dataclass(frozen=True)
class Precommitment:
    commitment: Commitment
    opening: Opening

    @property
    def hidden_pair(self) -> tuple[int, int]:
        return self.opening.b1, self.opening.b2


def precommit(rng: Drbg, pub: PublicString) -> Precommitment:
    x = rng.bytes(SEED_BYTES)
    m1, m2 = rng.bits(2)
    opening = Opening(x, int(m1), int(m2))
    return Precommitment(commit(pub, opening), opening)


def online_commit(hidden: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    return hidden[0] ^ b[0], hidden[1] ^ b[1]


def open_chain(pub: PublicString, c: Commitment, opening: Opening, masked: tuple[int, int]) -> tuple[int, int] | None:
    """Recovered pair if the preprocessing commitment verifies, else ``None``."""
    if not verify_open(pub, c, opening):
        return None
    return opening.b1 ^ masked[0], opening.b2 ^ masked[1]


# -- scaled-down binding testbed -------------------------------------------------
# Not used by the protocol.  Seed 8 bits, output 24 bits built from three
# blocks of a toy 8-bit Feistel cipher, so every r1 can be enumerated.

TOY_N = 8


def _toy_cipher(key: int, block: int) -> int:
    """Four-round Feistel on 4-bit halves; a permutation of 0..255 for every key."""
    from .aes import SBOX
    left, right = block >> 4, block & 0xF
    for rnd in range(4):
        rk = int(SBOX[(key + 17 * rnd) & 0xFF])
        left, right = right, left ^ (int(SBOX[(right << 4 | rnd) ^ rk]) & 0xF)
    return left << 4 | right


def toy_expand(x: int) -> int:
    """G(x) = E_x(0) || E_x(1) || E_x(2) as a 24-bit integer."""
    return _toy_cipher(x, 0) << 16 | _toy_cipher(x, 1) << 8 | _toy_cipher(x, 2)


def toy_commit(r1: int, x: int, b1: int, b2: int) -> int:
    return toy_expand(x) ^ (r1 if b1 else 0) ^ ((r1 >> 1) if b2 else 0)


@dataclass(frozen=True)
class BindingStats:
    n: int
    r1_count: int
    expected_equivocations: float  # mean number of colliding opening pairs per r1
    p_equivocable: float           # fraction of r1 admitting at least one collision

    @property
    def bound(self) -> float:
        return 2.0 ** -(self.n - 3)


def exhaustive_binding(n: int = TOY_N) -> BindingStats:
    """Enumerate every admissible r1 of the toy scheme and count equivocations.

    Two openings (x, b) != (x', b') collide iff G(x) ^ G(x') equals r1, r2
    or r1 ^ r2 for b ^ b' = 10, 01, 11.  x = x' never collides once r1 is
    neither all-zero nor 1, so only seed pairs matter.
    """
    if n != TOY_N:
        raise ValueError("the toy cipher is fixed at 8-bit seeds")
    m = 3 * n
    g = np.array([toy_expand(x) for x in range(1 << n)], dtype=np.int64)
    diffs = (g[:, None] ^ g[None, :])[~np.eye(1 << n, dtype=bool)]
    cnt = np.bincount(diffs, minlength=1 << m)  # ordered seed pairs per difference
    r1 = np.arange(1 << m, dtype=np.int64)
    r1 = r1[(r1 != 0) & (r1 != (1 << m) - 1)]
    r2 = r1 >> 1
    hits = cnt[r1] + cnt[r2] + cnt[r1 ^ r2]
    # Each difference class is reached by 4 ordered (b, b') choices; halve for unordered pairs.
    expected = float(np.mean(hits) * 4 / 2)
    exists = float(np.mean(hits > 0))
    return BindingStats(n, len(r1), expected, exists)


def random_binding_search(pub: PublicString, rng: Drbg, trials: int, batch: int = 1 << 17) -> int:
    """Random (x, x', b, b') search for a double opening of one commitment; returns hits."""
    masks = {bytes(m) for m in pub.masks()[1:]}  # r2, r1, r1^r2
    hits = 0
    done = 0
    while done < trials:
        k = min(batch, trials - done)
        xs = np.frombuffer(rng.bytes(SEED_BYTES * k), dtype=np.uint8).reshape(k, SEED_BYTES)
        ys = np.frombuffer(rng.bytes(SEED_BYTES * k), dtype=np.uint8).reshape(k, SEED_BYTES)
        d = expand_seeds(xs) ^ expand_seeds(ys)
        hits += sum(1 for row in d if row.tobytes() in masks)
        done += k
    return hits
