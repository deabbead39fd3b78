"""Batched AES-256 block encryption, one key per row.

The commitment layer runs a fresh key schedule for every event, which a
per-call cipher object handles poorly; this kernel expands and encrypts
thousands of keys in one compiled loop.
"""
from __future__ import annotations

import numba
import numpy as np


def _build_sbox() -> np.ndarray:
    sbox = np.zeros(256, dtype=np.uint8)
    p = q = 1
    while True:
        # p runs over the multiplicative group via x3, q over inverses via /3.
        p = p ^ ((p << 1) & 0xFF) ^ (0x1B if p & 0x80 else 0)
        q ^= q << 1
        q ^= q << 2
        q ^= q << 4
        q &= 0xFF
        if q & 0x80:
            q ^= 0x09
        rot = lambda v, s: ((v << s) | (v >> (8 - s))) & 0xFF
        sbox[p] = q ^ rot(q, 1) ^ rot(q, 2) ^ rot(q, 3) ^ rot(q, 4) ^ 0x63
        if p == 1:
            break
    sbox[0] = 0x63
    return sbox


SBOX = _build_sbox()
RCON = np.array([0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40], dtype=np.uint8)


@numba.njit(cache=True)
def _expand_key(key, sbox, rcon, w):
    # w: (60, 4) round-key words for AES-256.
    for i in range(8):
        for j in range(4):
            w[i, j] = key[4 * i + j]
    t = np.empty(4, dtype=np.uint8)
    for i in range(8, 60):
        for j in range(4):
            t[j] = w[i - 1, j]
        if i % 8 == 0:
            t0 = t[0]
            t[0] = sbox[t[1]] ^ rcon[i // 8 - 1]
            t[1] = sbox[t[2]]
            t[2] = sbox[t[3]]
            t[3] = sbox[t0]
        elif i % 8 == 4:
            for j in range(4):
                t[j] = sbox[t[j]]
        for j in range(4):
            w[i, j] = w[i - 8, j] ^ t[j]


@numba.njit(cache=True)
def _xtime(b):
    return ((b << 1) ^ (0x1B if b & 0x80 else 0)) & 0xFF


@numba.njit(cache=True)
def _encrypt_block(block, w, sbox, out):
    s = np.empty(16, dtype=np.uint8)
    tmp = np.empty(16, dtype=np.uint8)
    for i in range(16):
        s[i] = block[i] ^ w[i // 4, i % 4]
    for rnd in range(1, 15):
        # SubBytes + ShiftRows (column-major state: index = 4*col + row).
        for c in range(4):
            for r in range(4):
                tmp[4 * c + r] = sbox[s[4 * ((c + r) % 4) + r]]
        if rnd < 14:
            for c in range(4):
                a0 = tmp[4 * c]
                a1 = tmp[4 * c + 1]
                a2 = tmp[4 * c + 2]
                a3 = tmp[4 * c + 3]
                x = a0 ^ a1 ^ a2 ^ a3
                s[4 * c] = a0 ^ x ^ _xtime(a0 ^ a1)
                s[4 * c + 1] = a1 ^ x ^ _xtime(a1 ^ a2)
                s[4 * c + 2] = a2 ^ x ^ _xtime(a2 ^ a3)
                s[4 * c + 3] = a3 ^ x ^ _xtime(a3 ^ a0)
        else:
            for i in range(16):
                s[i] = tmp[i]
        for i in range(16):
            s[i] ^= w[4 * rnd + i // 4, i % 4]
    for i in range(16):
        out[i] = s[i]


@numba.njit(cache=True)
def _encrypt_many(keys, blocks, sbox, rcon, out):
    w = np.empty((60, 4), dtype=np.uint8)
    for k in range(keys.shape[0]):
        _expand_key(keys[k], sbox, rcon, w)
        for b in range(blocks.shape[0]):
            _encrypt_block(blocks[b], w, sbox, out[k, b])


def aes256_encrypt_blocks(keys: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """Encrypt every block in ``blocks`` (B, 16) under every key in ``keys`` (N, 32).

    Returns an array of shape (N, B, 16).
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint8).reshape(-1, 32)
    blocks = np.ascontiguousarray(blocks, dtype=np.uint8).reshape(-1, 16)
    out = np.empty((keys.shape[0], blocks.shape[0], 16), dtype=np.uint8)
    _encrypt_many(keys, blocks, SBOX, RCON, out)
    return out
