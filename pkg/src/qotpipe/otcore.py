"""Commit/open parameter estimation, index separation and raw-key extraction."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import commitment as cm
from .errors import ProtocolAbort
from .params import ProtocolParams, derived_counts
from .rng import Drbg


@dataclass
class TestSelection:
    i_t: np.ndarray
    openings: tuple | None = None  # (xs, b1, b2) arrays aligned with i_t

    def __post_init__(self):
        self.i_t = np.asarray(self.i_t, dtype=np.int64)


@dataclass
class EstimationResult:
    i_s: np.ndarray
    p_hat: float
    errors: int
    verdict: str = "continue"
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.verdict == "continue"


@dataclass
class IndexSplit:
    i0: np.ndarray
    i1: np.ndarray
    c: int

    @property
    def ordered_pair(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.i0, self.i1) if self.c == 0 else (self.i1, self.i0)


def choose_test_set(rng: Drbg, n0: int, params: ProtocolParams) -> np.ndarray:
    k = derived_counts(params, n0).n_test
    if k < 1 or k >= n0:
        raise ValueError(f"test set size floor({params.alpha}*{n0}) = {k} is degenerate")
    return rng.subset(n0, k)


def complement(n0: int, idx: np.ndarray) -> np.ndarray:
    mask = np.ones(n0, dtype=bool)
    mask[idx] = False
    return np.flatnonzero(mask)


def estimate(test: TestSelection, theta_a, x_a, pub: cm.PublicString, commitments: np.ndarray,
             params: ProtocolParams, n0: int | None = None) -> EstimationResult:
    """Sender-side check of the opened test events.

    ``commitments`` is the (N0, 96) array received before the test set was
    announced; ``test.openings`` holds the receiver's openings for ``test.i_t``.
    """
    counts = derived_counts(params, n0)
    i_t = test.i_t
    xs, b1, b2 = test.openings
    if len(xs) != len(i_t):
        raise ProtocolAbort("protocol_violation", "opening count differs from the test set size")
    ok = cm.verify_batch(pub, commitments[i_t], xs, b1, b2)
    if not ok.all():
        raise ProtocolAbort("commitment", f"{int((~ok).sum())} openings failed verification")
    theta_a = np.asarray(theta_a)
    x_a = np.asarray(x_a)
    match = theta_a[i_t] == b1
    i_s = i_t[match]
    errors = int(np.count_nonzero(x_a[i_s] != b2[match]))
    p_hat = errors / len(i_s) if len(i_s) else 1.0
    if len(i_s) < counts.n_check:
        return EstimationResult(i_s, p_hat, errors, "abort", "check_size")
    if p_hat > params.p_max:
        return EstimationResult(i_s, p_hat, errors, "abort", "p_exceeded")
    return EstimationResult(i_s, p_hat, errors)


def build_split(rest: np.ndarray, theta_a_rest, theta_b_rest, n_raw: int, rng: Drbg, c: int | None = None) -> IndexSplit:
    """Receiver-side separation of the untested events into I0 (same basis) and I1."""
    theta_a_rest = np.asarray(theta_a_rest)
    theta_b_rest = np.asarray(theta_b_rest)
    if not len(rest) == len(theta_a_rest) == len(theta_b_rest):
        raise ProtocolAbort("protocol_violation", "basis announcement length differs from the untested set")
    same = theta_a_rest == theta_b_rest
    pool0, pool1 = rest[same], rest[~same]
    if len(pool0) < n_raw or len(pool1) < n_raw:
        raise ProtocolAbort("insufficient_raw", f"have {len(pool0)}/{len(pool1)} events, need {n_raw} each")
    i0 = rng.subset(pool0, n_raw)
    i1 = rng.subset(pool1, n_raw)
    if c is None:
        c = rng.bit()
    return IndexSplit(i0, i1, int(c))


def extract_raw(x, index_set) -> np.ndarray:
    idx = np.asarray(index_set, dtype=np.int64)
    x = np.asarray(x, dtype=np.uint8)
    if len(idx) and (idx.min() < 0 or idx.max() >= len(x)):
        raise ProtocolAbort("protocol_violation", "index outside the raw block")
    return x[np.sort(idx)]


def extract_sender(x_a, ordered_pair) -> list[np.ndarray]:
    return [extract_raw(x_a, s) for s in ordered_pair]


def extract_receiver(x_b, split: IndexSplit) -> tuple[np.ndarray, int]:
    return extract_raw(x_b, split.i0), split.c


# Wire encoding: count u32, then u32 gaps from the previous index (the first from 0).

def encode_index_set(idx) -> bytes:
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= 2**32):
        raise ValueError("index set must be strictly ascending u32 values")
    gaps = np.diff(idx, prepend=0)
    return struct.pack(">I", len(idx)) + gaps.astype(">u4").tobytes()


def decode_index_set(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Returns the indices and the offset just past them."""
    if len(data) - offset < 4:
        raise ProtocolAbort("protocol_violation", "truncated index set")
    (count,) = struct.unpack_from(">I", data, offset)
    end = offset + 4 + 4 * count
    if end > len(data):
        raise ProtocolAbort("protocol_violation", "index set longer than its message")
    gaps = np.frombuffer(data, dtype=">u4", count=count, offset=offset + 4).astype(np.int64)
    idx = np.cumsum(gaps)
    if count > 1 and np.any(gaps[1:] == 0):
        raise ProtocolAbort("protocol_violation", "index set is not strictly ascending")
    return idx, end


def encode_bits(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack(">I", len(bits)) + np.packbits(bits).tobytes()


def decode_bits(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if len(data) - offset < 4:
        raise ProtocolAbort("protocol_violation", "truncated bit string")
    (n,) = struct.unpack_from(">I", data, offset)
    nbytes = (n + 7) // 8
    end = offset + 4 + nbytes
    if end > len(data):
        raise ProtocolAbort("protocol_violation", "bit string longer than its message")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset + 4))[:n]
    return bits, end
