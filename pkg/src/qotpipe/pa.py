"""Privacy amplification by Toeplitz hashing over GF(2)."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ProtocolAbort
from .rng import Drbg

# Keeps every partial convolution below 2**15, far inside float64's exact range.
_CHUNK = 1 << 15


@dataclass(frozen=True)
class ToeplitzSeed:
    bits: np.ndarray
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("Toeplitz dimensions must be positive")
        if len(self.bits) != self.n_in + self.n_out - 1:
            raise ValueError(f"seed needs {self.n_in + self.n_out - 1} bits, got {len(self.bits)}")

    def matrix(self) -> np.ndarray:
        """Dense (n_out, n_in) matrix with entry [i, j] = bits[i - j + n_in - 1]."""
        i = np.arange(self.n_out)[:, None]
        j = np.arange(self.n_in)[None, :]
        return np.asarray(self.bits, dtype=np.uint8)[i - j + self.n_in - 1]

    def encode(self) -> bytes:
        return struct.pack(">II", self.n_in, self.n_out) + np.packbits(self.bits).tobytes()

    @classmethod
    def decode(cls, payload: bytes) -> "ToeplitzSeed":
        if len(payload) < 8:
            raise ValueError("truncated PA seed")
        n_in, n_out = struct.unpack_from(">II", payload)
        nbits = n_in + n_out - 1
        body = payload[8:]
        if len(body) != (nbits + 7) // 8:
            raise ValueError("PA seed length does not match its dimensions")
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8))[:nbits]
        return cls(bits, n_in, n_out)


def random_seed(rng: Drbg, n_in: int, n_out: int) -> ToeplitzSeed:
    return ToeplitzSeed(rng.bits(n_in + n_out - 1), n_in, n_out)


def toeplitz_hash(key: np.ndarray, seed: ToeplitzSeed) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint8)
    if key.ndim != 1 or len(key) != seed.n_in:
        raise ValueError(f"key must have {seed.n_in} bits, got {key.shape}")
    s = np.asarray(seed.bits, dtype=np.float64)
    n_in, n_out = seed.n_in, seed.n_out
    acc = np.zeros(n_out, dtype=np.int64)
    for j0 in range(0, n_in, _CHUNK):
        piece = key[j0:j0 + _CHUNK]
        if not piece.any():
            continue
        ln = len(piece)
        start = n_in - j0 - ln
        seg = s[start:start + ln + n_out - 1]
        conv = fftconvolve(seg, piece.astype(np.float64))
        acc += np.rint(conv[ln - 1:ln - 1 + n_out]).astype(np.int64)
    return (acc & 1).astype(np.uint8)


def amplify(blocks, seed: ToeplitzSeed, n_out: int, bound: int) -> list[np.ndarray]:
    """Hash every block under the same seed; abort if ``n_out`` exceeds the secure bound."""
    if n_out > bound:
        raise ProtocolAbort("pa_bound", f"requested {n_out} bits, secure bound {bound}")
    if seed.n_out != n_out:
        raise ProtocolAbort("protocol_violation", "seed output length differs from negotiated n_out")
    return [toeplitz_hash(b, seed) for b in blocks]
