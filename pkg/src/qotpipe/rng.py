"""Seedable cryptographic randomness (AES-256-CTR keystream)."""
from __future__ import annotations

import hashlib
import os

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes


class Drbg:
    """Deterministic random bit generator keyed by a 256-bit seed.

    Without a seed it draws one from the OS, so deployments stay
    unpredictable while tests pin everything.
    """

    def __init__(self, seed: bytes | int | str | None = None):
        if seed is None:
            seed = os.urandom(32)
        self.seed = _seed_bytes(seed)
        self._enc = Cipher(algorithms.AES(self.seed), modes.CTR(b"\x00" * 16)).encryptor()

    def child(self, label: str) -> "Drbg":
        """Independent stream derived from this seed and a label."""
        return Drbg(hashlib.sha256(self.seed + b"/" + label.encode()).digest())

    def bytes(self, n: int) -> bytes:
        return self._enc.update(b"\x00" * n)

    def u64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.bytes(8 * n), dtype=">u8").astype(np.uint64)

    def bits(self, n: int) -> np.ndarray:
        raw = np.frombuffer(self.bytes((n + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw)[:n]

    def bit(self) -> int:
        return int(self.bits(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        """Floats in [0, 1) with 53 random bits each."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def bernoulli(self, p, n: int) -> np.ndarray:
        return (self.uniform(n) < p).astype(np.uint8)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n > 0")
        k = n.bit_length()
        while True:
            v = int.from_bytes(self.bytes((k + 7) // 8), "big") >> ((8 - k % 8) % 8)
            if v < n:
                return v

    def permutation(self, n: int) -> np.ndarray:
        # Sorting 64-bit random keys; ties occur with probability ~n^2/2^65.
        return np.argsort(self.u64(n), kind="stable")

    def subset(self, population: int | np.ndarray, k: int) -> np.ndarray:
        """Uniform k-subset, returned sorted ascending."""
        pool = np.arange(population) if np.isscalar(population) else np.asarray(population)
        if not 0 <= k <= len(pool):
            raise ValueError(f"cannot draw {k} items from {len(pool)}")
        keys = self.u64(len(pool))
        if k == len(pool):
            return np.sort(pool)
        chosen = np.argpartition(keys, k)[:k] if k else np.empty(0, dtype=np.int64)
        return np.sort(pool[chosen])


def _seed_bytes(seed) -> bytes:
    if isinstance(seed, bytes):
        if len(seed) == 32:
            return seed
        return hashlib.sha256(seed).digest()
    if isinstance(seed, int):
        return hashlib.sha256(seed.to_bytes(32, "big", signed=False)).digest()
    if isinstance(seed, str):
        return hashlib.sha256(seed.encode()).digest()
    raise TypeError(f"unsupported seed type {type(seed).__name__}")
