"""Entanglement-based QKD post-processing used to refill the authentication pool.

Sifting keeps matching-basis events, a disclosed sample estimates the QBER,
single-block Cascade corrects the receiver, and Toeplitz hashing compresses
to the extractable length.  The length rule is an engineering margin, not a
finite-key security claim.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import cascade, pa
from .errors import ProtocolAbort
from .qsim import RawEventBlock
from .rng import Drbg

SAMPLE_FRACTION = 0.10
QBER_THRESHOLD = 0.11
SAFETY_MARGIN_BITS = 128


@dataclass
class SiftResult:
    kept: np.ndarray  # event indices kept as key after the sample is removed
    sample: np.ndarray
    key_a: np.ndarray
    key_b: np.ndarray
    q_est: float
    sample_errors: int


def matching_indices(bases_a, bases_b) -> np.ndarray:
    return np.flatnonzero(np.asarray(bases_a) == np.asarray(bases_b))


def choose_sample(rng: Drbg, sifted: np.ndarray, fraction: float = SAMPLE_FRACTION) -> np.ndarray:
    k = int(round(fraction * len(sifted)))
    return rng.subset(sifted, k) if len(sifted) else np.empty(0, dtype=np.int64)


def sample_qber(bits_a, bits_b) -> tuple[float, int]:
    bits_a = np.asarray(bits_a)
    errors = int(np.count_nonzero(bits_a != np.asarray(bits_b)))
    return (errors / len(bits_a) if len(bits_a) else 0.0), errors


def check_qber(q_est: float, n_sifted: int, threshold: float = QBER_THRESHOLD) -> None:
    if n_sifted == 0:
        raise ProtocolAbort("qkd_qber", "no matching-basis events")
    if q_est > threshold:
        raise ProtocolAbort("qkd_qber", f"estimated QBER {q_est:.4f} above {threshold}")


def sift_qkd(block_a: RawEventBlock, block_b: RawEventBlock, rng: Drbg,
             fraction: float = SAMPLE_FRACTION, threshold: float = QBER_THRESHOLD) -> SiftResult:
    sifted = matching_indices(block_a.bases, block_b.bases)
    if len(sifted) == 0:
        raise ProtocolAbort("qkd_qber", "no matching-basis events")
    sample = choose_sample(rng, sifted, fraction)
    q_est, errs = sample_qber(block_a.outcomes[sample], block_b.outcomes[sample])
    check_qber(q_est, len(sifted), threshold)
    kept = np.setdiff1d(sifted, sample, assume_unique=True)
    return SiftResult(kept, sample, block_a.outcomes[kept], block_b.outcomes[kept], q_est, errs)


def extractable_bits(n_sift: int, leak_bits: int, margin: int = SAFETY_MARGIN_BITS) -> int:
    """n_sift * (1 - f h(q)) - margin, written with the measured leakage f h(q) n_sift."""
    return max(0, n_sift - leak_bits - margin)


def key_handle(session_id: int) -> bytes:
    """8-byte handle both parties derive from the session id; never from key bytes."""
    return hashlib.sha256(b"qkd-key" + session_id.to_bytes(8, "big")).digest()[:8]


@dataclass
class AuthKey:
    key_a: bytes
    key_b: bytes
    handle: bytes
    q_est: float
    leak_bits: int
    extractable: int


def produce_auth_key(block_a: RawEventBlock, block_b: RawEventBlock, length_request: int, rng: Drbg,
                     config: cascade.CascadeConfig | None = None, session_id: int = 0) -> AuthKey:
    """Both parties' view of one QKD round, run in-process.

    ``length_request`` is in bytes.  Raises ``insufficient_material`` when the
    block cannot yield that many bytes; the caller should feed a larger block.
    """
    s = sift_qkd(block_a, block_b, rng.child("sample"))
    seed = rng.child("cascade").bytes(32)
    out = cascade.reconcile([s.key_a], s.key_b, 0, s.q_est, config, seed=seed, rng=rng.child("verify"))
    leak = out.leak_bits_per_position[0]
    room = extractable_bits(len(s.key_a), leak)
    n_out = 8 * length_request
    if n_out > room:
        raise ProtocolAbort("insufficient_material", f"{room} extractable bits, {n_out} requested")
    tseed = pa.random_seed(rng.child("pa"), len(s.key_a), n_out)
    ka = np.packbits(pa.toeplitz_hash(s.key_a, tseed)).tobytes()
    kb = np.packbits(pa.toeplitz_hash(out.corrected_receiver_block, tseed)).tobytes()
    return AuthKey(ka, kb, key_handle(session_id), s.q_est, leak, room)
