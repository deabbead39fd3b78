"""Statistical stand-in for the entangled-photon layer and the raw file format.

The loss model mixes true coincidences, which fall with the two-photon
link transmittance ``10**(-loss_db/10)``, with a loss-independent
accidental floor whose outcomes are uniformly random.  The floor and the
intrinsic per-basis error rates are calibrated so that the mean QBER is
0.85 % at 0 dB and reaches ``p_max`` at 8.47 dB.
"""
from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .rng import Drbg

SENDER, RECEIVER = "sender", "receiver"
PARTY_CODES = {SENDER: 0, RECEIVER: 1}

RAW_MAGIC = b"QOTRAW1\x00"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct(">8sHBBI")

# Back-to-back figures of the measured source.
BASE_COINCIDENCE_HZ = 28_300.0
QBER_HV_0 = 0.005
QBER_DA_0 = 0.012
MAX_LOSS_DB = 8.47
MAX_LOSS_FIBER_KM = 25.8


class RawFormatError(ValueError):
    pass


def qber_from_visibility(v: float) -> float:
    if not 0 <= v <= 1:
        raise ValueError(f"visibility must lie in [0, 1], got {v}")
    return (1 - v) / 2


def calibrate_accidental_floor(qber_hv_0: float, qber_da_0: float, loss_db: float, target_qber: float) -> float:
    """Accidental floor putting the mean QBER at ``target_qber`` when the loss is ``loss_db``."""
    mean0 = (qber_hv_0 + qber_da_0) / 2
    if not mean0 < target_qber < 0.5:
        raise ValueError("target QBER must lie between the 0 dB mean and 1/2")

    def gap(a):
        m = ChannelModel(qber_hv_0=qber_hv_0, qber_da_0=qber_da_0, accidental_floor=a)
        _, hv, da = channel_at(m, loss_db)
        return (hv + da) / 2 - target_qber

    return float(brentq(gap, 1e-12, 1.0, xtol=1e-15))


@dataclass(frozen=True)
class ChannelModel:
    base_coincidence_hz: float = BASE_COINCIDENCE_HZ
    qber_hv_0: float = QBER_HV_0
    qber_da_0: float = QBER_DA_0
    accidental_floor: float | None = None
    loss_db: float = 0.0
    fiber_db_per_km: float = MAX_LOSS_DB / MAX_LOSS_FIBER_KM

    def __post_init__(self):
        if self.base_coincidence_hz < 0 or self.loss_db < 0 or self.fiber_db_per_km <= 0:
            raise ValueError("rates, loss and attenuation must be non-negative")
        for q in (self.qber_hv_0, self.qber_da_0):
            if not 0 <= q <= 0.5:
                raise ValueError(f"QBER {q} outside [0, 0.5]")
        if self.accidental_floor is None:
            floor = calibrate_accidental_floor(self.qber_hv_0, self.qber_da_0, MAX_LOSS_DB, 0.014) \
                if (self.qber_hv_0 + self.qber_da_0) / 2 < 0.014 else 0.0
            object.__setattr__(self, "accidental_floor", floor)
        if self.accidental_floor < 0:
            raise ValueError("accidental_floor must be non-negative")

    @classmethod
    def flat(cls, qber: float, **kw) -> "ChannelModel":
        """Model with the same QBER in both bases at the configured loss."""
        kw.setdefault("accidental_floor", 0.0)
        return cls(qber_hv_0=qber, qber_da_0=qber, **kw)

    def intrinsic_qber(self) -> tuple[float, float]:
        """Per-basis error rate of true coincidences, before accidentals."""
        a = self.accidental_floor
        return tuple(q * (1 + a) - 0.5 * a for q in (self.qber_hv_0, self.qber_da_0))

    def at_loss(self, loss_db: float) -> "ChannelModel":
        from dataclasses import replace
        return replace(self, loss_db=loss_db)


def channel_at(model: ChannelModel, loss_db: float | None = None) -> tuple[float, float, float]:
    """(coincidence rate in Hz, QBER in HV, QBER in DA) at the given loss."""
    loss_db = model.loss_db if loss_db is None else loss_db
    if loss_db < 0:
        raise ValueError("loss must be non-negative")
    a = model.accidental_floor
    t = 10.0 ** (-loss_db / 10.0)
    true0 = model.base_coincidence_hz / (1 + a)
    true, acc = true0 * t, true0 * a
    total = true + acc
    q_hv, q_da = model.intrinsic_qber()
    if total == 0:
        return 0.0, 0.5, 0.5
    return total, (q_hv * true + 0.5 * acc) / total, (q_da * true + 0.5 * acc) / total


@dataclass
class RawEventBlock:
    party: str
    bases: np.ndarray
    outcomes: np.ndarray
    block_id: int = 0
    seed_tag: str = ""
    event_offset: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.party not in PARTY_CODES:
            raise ValueError(f"unknown party {self.party!r}")
        self.bases = np.asarray(self.bases, dtype=np.uint8)
        self.outcomes = np.asarray(self.outcomes, dtype=np.uint8)
        if self.bases.shape != self.outcomes.shape or self.bases.ndim != 1:
            raise ValueError("bases and outcomes must be 1-D arrays of equal length")

    def __len__(self) -> int:
        return len(self.bases)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawEventBlock):
            return NotImplemented
        return (self.party == other.party and self.block_id == other.block_id
                and np.array_equal(self.bases, other.bases)
                and np.array_equal(self.outcomes, other.outcomes))

    def slice(self, start: int, stop: int) -> "RawEventBlock":
        return RawEventBlock(self.party, self.bases[start:stop], self.outcomes[start:stop],
                             self.block_id, self.seed_tag, self.event_offset + start)


def generate_block(model: ChannelModel, n0: int, seed, block_id: int = 0) -> tuple[RawEventBlock, RawEventBlock]:
    """Sender and receiver event records for ``n0`` coincidences."""
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    rng = Drbg(seed)
    _, q_hv, q_da = channel_at(model)
    theta_a = rng.bits(n0)
    theta_b = rng.bits(n0)
    x_a = rng.bits(n0)
    match = theta_a == theta_b
    flips = rng.uniform(n0) < np.where(theta_a == 0, q_hv, q_da)
    x_b = np.where(match, x_a ^ flips.astype(np.uint8), rng.bits(n0)).astype(np.uint8)
    tag = rng.seed.hex()[:16]
    return (RawEventBlock(SENDER, theta_a, x_a, block_id, tag),
            RawEventBlock(RECEIVER, theta_b, x_b, block_id, tag))


def raw_filename(block_id: int, party: str) -> str:
    return f"block_{block_id}_{party}.qraw"


_NAME_RE = re.compile(r"block_(\d+)_(sender|receiver)\.qraw$")


def encode_raw(block: RawEventBlock) -> bytes:
    n = len(block)
    if n == 0:
        raise RawFormatError("refusing to write an empty block")
    if n >= 2**32:
        raise RawFormatError("block too large for a u32 event count")
    pairs = np.empty(2 * n, dtype=np.uint8)
    pairs[0::2] = block.bases & 1
    pairs[1::2] = block.outcomes & 1
    header = _RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, PARTY_CODES[block.party], 0, n)
    return header + np.packbits(pairs).tobytes()


def decode_raw(data: bytes, block_id: int = 0) -> RawEventBlock:
    if len(data) < _RAW_HEADER.size:
        raise RawFormatError("truncated header")
    magic, version, party, _, n = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise RawFormatError(f"bad magic {magic!r}")
    if version != RAW_VERSION:
        raise RawFormatError(f"unsupported version {version}")
    if party not in (0, 1):
        raise RawFormatError(f"bad party code {party}")
    body = data[_RAW_HEADER.size:]
    need = (2 * n + 7) // 8
    if len(body) < need:
        raise RawFormatError(f"truncated body: {len(body)} of {need} bytes")
    if len(body) > need:
        raise RawFormatError(f"length mismatch: {len(body) - need} trailing bytes")
    pairs = np.unpackbits(np.frombuffer(body, dtype=np.uint8))[: 2 * n]
    return RawEventBlock(SENDER if party == 0 else RECEIVER, pairs[0::2].copy(), pairs[1::2].copy(), block_id)


def write_raw(path, block: RawEventBlock) -> None:
    data = encode_raw(block)
    with open(path, "wb") as fh:
        fh.write(data)


def read_raw(path) -> RawEventBlock:
    m = _NAME_RE.search(os.fspath(path))
    block_id = int(m.group(1)) if m else 0
    with open(path, "rb") as fh:
        block = decode_raw(fh.read(), block_id)
    if m and m.group(2) != block.party:
        raise RawFormatError(f"file name says {m.group(2)} but header says {block.party}")
    return block
