"""Two-party computation on top of the OT pipeline (semi-honest).

ROTs from the pipeline become chosen-message OTs, 128 of them seed an
IKNP-style extension, extended correlated OTs drive Gilboa products and
Beaver triples, and the triples evaluate secret-shared squared Euclidean
distances for private fingerprint matching.  All ring arithmetic is over
Z_{2^64} using numpy's wrapping uint64 operations.

Role convention: the party holding (r0, r1) from the pipeline is party 0.
It acts as the extension receiver (it is the base-OT sender, roles
reversed) and as the receiver of every correlated OT.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .rng import Drbg
from .transport import LANE_MPC, Frame, Transport, loopback_pair

KAPPA = 128
BASE_BYTES = KAPPA // 8
RING_BITS = 64
FRAC_BITS = 16
FEATURE_LIMIT = 2.0 ** 15
DB_MAGIC = b"QOTFPDB1"
TRIPLE_CHUNK = 2048

_FIXED_KEY = bytes.fromhex("6a09e667f3bcc908bb67ae8584caa73b")  # any public constant works
_SHIFTS = np.arange(RING_BITS, dtype=np.uint64)


class ExtensionError(Exception):
    pass


# -- random OT to chosen-message OT ------------------------------------------------

@dataclass
class RotPair:
    """One random OT, either the sender view (r0, r1) or the receiver view (rc, c)."""

    r0: bytes | None = None
    r1: bytes | None = None
    rc: bytes | None = None
    c: int | None = None

    @property
    def is_sender(self) -> bool:
        return self.r0 is not None

    @property
    def length(self) -> int:
        return len(self.r0) if self.is_sender else len(self.rc)

    @classmethod
    def from_result(cls, res) -> "RotPair":
        if res.mc is not None:
            return cls(rc=res.mc, c=res.c)
        return cls(r0=res.m0, r1=res.m1)


def _xor(a: bytes, b: bytes) -> bytes:
    return (np.frombuffer(a, np.uint8) ^ np.frombuffer(b, np.uint8)).tobytes()


def rot_choose(rot: RotPair, b: int) -> int:
    """Receiver's first message d = b xor c; uniform whatever b is."""
    return (int(b) & 1) ^ rot.c


def rot_encrypt(rot: RotPair, d: int, m0: bytes, m1: bytes) -> tuple[bytes, bytes]:
    if not len(m0) == len(m1) == rot.length:
        raise ValueError("messages must have the ROT string length")
    pads = (rot.r0, rot.r1)
    return _xor(m0, pads[d]), _xor(m1, pads[1 ^ d])


def rot_decrypt(rot: RotPair, b: int, cts: tuple[bytes, bytes]) -> bytes:
    ct = cts[int(b) & 1]
    if len(ct) != rot.length:
        raise ValueError("ciphertext length differs from the ROT string length")
    return _xor(ct, rot.rc)


def rot_to_ot(sender: RotPair, receiver: RotPair, messages: tuple[bytes, bytes], b: int) -> bytes:
    """Both roles in one call; returns what the receiver learns."""
    d = rot_choose(receiver, b)
    return rot_decrypt(receiver, b, rot_encrypt(sender, d, *messages))


# -- base OTs and the ledger -----------------------------------------------------

@dataclass
class OtLedger:
    base_consumed: int = 0
    extended: int = 0
    used: dict = field(default_factory=dict)

    def consume(self, purpose: str, n: int) -> None:
        self.used[purpose] = self.used.get(purpose, 0) + n

    @property
    def balanced(self) -> bool:
        return self.extended == sum(self.used.values())


class BaseOts:
    """Exactly 128 ROTs of 128 bits, one party's view; usable for one extension only."""

    def __init__(self, pairs):
        pairs = list(pairs)
        if len(pairs) != KAPPA:
            raise ExtensionError(f"extension needs exactly {KAPPA} base OTs, got {len(pairs)}")
        kinds = {p.is_sender for p in pairs}
        if len(kinds) != 1:
            raise ExtensionError("base OTs mix sender and receiver views")
        if any(p.length != BASE_BYTES for p in pairs):
            raise ExtensionError(f"base OT strings must be {BASE_BYTES} bytes")
        self.pairs = pairs
        self.is_sender = kinds.pop()
        self.consumed = False

    @classmethod
    def from_results(cls, results) -> "BaseOts":
        bad = [r for r in results if not r.ok]
        if bad:
            raise ExtensionError(f"{len(bad)} base OTs aborted ({bad[0].reason})")
        return cls(RotPair.from_result(r) for r in results)

    def take(self) -> "BaseOts":
        if self.consumed:
            raise ExtensionError("base OTs already consumed by an earlier extension")
        self.consumed = True
        return self


def _keys(strings) -> np.ndarray:
    return np.frombuffer(b"".join(strings), dtype=np.uint8).reshape(-1, BASE_BYTES)


def prg_columns(seeds: np.ndarray, start_byte: int, nbytes: int) -> np.ndarray:
    """AES-128-CTR keystream bytes [start_byte, start_byte + nbytes) for every seed row."""
    first_block, skip = divmod(start_byte, 16)
    iv = first_block.to_bytes(16, "big")
    zeros = bytes(nbytes + skip)
    out = np.empty((len(seeds), nbytes), dtype=np.uint8)
    for i, seed in enumerate(seeds):
        enc = Cipher(algorithms.AES(seed.tobytes()), modes.CTR(iv)).encryptor()
        out[i] = np.frombuffer(enc.update(zeros), dtype=np.uint8)[skip:]
    return out


def transpose_bits(cols: np.ndarray, k: int) -> np.ndarray:
    """(128, nbytes) bit columns -> (k, 16) byte rows."""
    bits = np.unpackbits(cols, axis=1)[:, :k]
    return np.packbits(bits.T, axis=1)


def cr_hash(rows: np.ndarray, first_index: int, out_bytes: int) -> np.ndarray:
    """Correlation-robust hash from fixed-key AES: H(j, x) = pi(x ^ j) ^ (x ^ j) per 16-byte block.

    Block b of the output for OT j uses the tweak (j, b), so long outputs stay independent.
    """
    k = len(rows)
    nblocks = -(-out_bytes // 16)
    idx = np.arange(first_index, first_index + k, dtype=np.uint64)
    out = np.empty((k, nblocks * 16), dtype=np.uint8)
    enc = Cipher(algorithms.AES(_FIXED_KEY), modes.ECB()).encryptor()
    for b in range(nblocks):
        tweak = np.zeros((k, 2), dtype=">u8")
        tweak[:, 0] = idx
        tweak[:, 1] = b
        x = rows ^ tweak.view(np.uint8).reshape(k, 16)
        y = np.frombuffer(enc.update(x.tobytes()), dtype=np.uint8).reshape(k, 16)
        out[:, 16 * b:16 * (b + 1)] = y ^ x
    return out[:, :out_bytes]


def _ring(pads: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pads[:, :8]).view(">u8").ravel().astype(np.uint64)


@dataclass
class ExtBatch:
    first: int
    rows: np.ndarray  # t_j (receiver) or q_j (sender)
    choices: np.ndarray | None = None


class ExtensionReceiver:
    """Holds the base pairs (k0, k1); chooses the extended OTs' bits."""

    def __init__(self, base: BaseOts):
        if not base.is_sender:
            raise ExtensionError("the extension receiver needs the base-OT sender view")
        base.take()
        self.k0 = _keys(p.r0 for p in base.pairs)
        self.k1 = _keys(p.r1 for p in base.pairs)
        self.offset = 0
        self.index = 0
        self.ledger = OtLedger(base_consumed=KAPPA)

    def extend(self, choices) -> tuple[bytes, ExtBatch]:
        choices = np.asarray(choices, dtype=np.uint8)
        k = len(choices)
        nbytes = -(-k // 8)
        g0 = prg_columns(self.k0, self.offset, nbytes)
        g1 = prg_columns(self.k1, self.offset, nbytes)
        r = np.packbits(np.concatenate([choices, np.zeros(8 * nbytes - k, np.uint8)]))
        u = g0 ^ g1 ^ r[None, :]
        batch = ExtBatch(self.index, transpose_bits(g0, k), choices)
        self.offset += nbytes
        self.index += k
        self.ledger.extended += k
        return u.tobytes(), batch

    def pads(self, batch: ExtBatch, out_bytes: int) -> np.ndarray:
        return cr_hash(batch.rows, batch.first, out_bytes)


class ExtensionSender:
    """Holds (k_{s_i}, s_i); gets both pads of every extended OT."""

    def __init__(self, base: BaseOts):
        if base.is_sender:
            raise ExtensionError("the extension sender needs the base-OT receiver view")
        base.take()
        self.ks = _keys(p.rc for p in base.pairs)
        self.s_bits = np.array([p.c for p in base.pairs], dtype=np.uint8)
        self.s = np.packbits(self.s_bits)
        self.offset = 0
        self.index = 0
        self.ledger = OtLedger(base_consumed=KAPPA)

    def extend(self, u_payload: bytes, k: int) -> ExtBatch:
        nbytes = -(-k // 8)
        if len(u_payload) != KAPPA * nbytes:
            raise ExtensionError("extension matrix has the wrong size")
        u = np.frombuffer(u_payload, dtype=np.uint8).reshape(KAPPA, nbytes)
        q = prg_columns(self.ks, self.offset, nbytes) ^ (u * self.s_bits[:, None])
        batch = ExtBatch(self.index, transpose_bits(q, k))
        self.offset += nbytes
        self.index += k
        self.ledger.extended += k
        return batch

    def pads(self, batch: ExtBatch, out_bytes: int) -> tuple[np.ndarray, np.ndarray]:
        return (cr_hash(batch.rows, batch.first, out_bytes),
                cr_hash(batch.rows ^ self.s[None, :], batch.first, out_bytes))


def ot_extend(sender_base: BaseOts, receiver_base: BaseOts, choices, m0: np.ndarray, m1: np.ndarray) -> np.ndarray:
    """k chosen-message OTs of ``m0.shape[1]`` bytes, both roles in one call.

    ``sender_base`` is the extension sender's view (rc, c); ``receiver_base``
    holds (r0, r1).  Returns the receiver's rows m_{b_j}.
    """
    m0, m1 = np.asarray(m0, np.uint8), np.asarray(m1, np.uint8)
    if m0.shape != m1.shape or len(m0) != len(choices):
        raise ValueError("message arrays and choices disagree in shape")
    recv, send = ExtensionReceiver(receiver_base), ExtensionSender(sender_base)
    u, rb = recv.extend(choices)
    sb = send.extend(u, len(choices))
    x0, x1 = send.pads(sb, m0.shape[1])
    y0, y1 = m0 ^ x0, m1 ^ x1
    pad = recv.pads(rb, m0.shape[1])
    send.ledger.consume("chosen", len(choices))
    recv.ledger.consume("chosen", len(choices))
    return np.where(rb.choices[:, None] == 1, y1, y0) ^ pad


# -- message links ------------------------------------------------------------------

class Link:
    """Ordered byte-message channel between the two MPC parties."""

    def __init__(self, transport: Transport, session_id: int = 0):
        self.transport = transport
        self.session_id = session_id
        self.bytes_sent = 0
        self.messages = 0

    def send(self, data: bytes) -> None:
        self.bytes_sent += len(data)
        self.messages += 1
        self.transport.send(Frame(LANE_MPC, "MPC_MSG", self.session_id, data))

    def recv(self) -> bytes:
        f = self.transport.recv()
        if f.lane != LANE_MPC or f.type != "MPC_MSG":
            raise ExtensionError(f"expected an MPC message, got {f.type} on lane {f.lane}")
        return f.payload

    def send_u64(self, arr) -> None:
        self.send(np.asarray(arr, dtype=np.uint64).astype(">u8").tobytes())

    def recv_u64(self, n: int | None = None) -> np.ndarray:
        data = self.recv()
        out = np.frombuffer(data, dtype=">u8").astype(np.uint64)
        if n is not None and len(out) != n:
            raise ValueError(f"expected {n} ring elements, got {len(out)}")
        return out

    def exchange_u64(self, arr, first: bool) -> np.ndarray:
        """Swap equal-size arrays; one side speaks first so socket buffers never deadlock."""
        arr = np.asarray(arr, dtype=np.uint64)
        if first:
            self.send_u64(arr)
            return self.recv_u64(arr.size).reshape(arr.shape)
        other = self.recv_u64(arr.size).reshape(arr.shape)
        self.send_u64(arr)
        return other


def link_pair(timeout: float = 120.0) -> tuple[Link, Link]:
    a, b = loopback_pair(timeout)
    return Link(a), Link(b)


# -- ring helpers ---------------------------------------------------------------------

def encode_fixed(values, frac_bits: int = FRAC_BITS) -> np.ndarray:
    """Clamp to [-2^15, 2^15) and scale by 2^frac_bits into Z_{2^64}."""
    v = np.clip(np.asarray(values, dtype=np.float64), -FEATURE_LIMIT, FEATURE_LIMIT - 2.0 ** -frac_bits)
    return np.rint(v * 2.0 ** frac_bits).astype(np.int64).view(np.uint64)


def decode_fixed(ring, frac_bits: int = FRAC_BITS) -> np.ndarray:
    return np.asarray(ring, dtype=np.uint64).view(np.int64).astype(np.float64) / 2.0 ** frac_bits


def share(rng: Drbg, values) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.uint64)
    mine = rng.u64(values.size).reshape(values.shape)
    return mine, values - mine


def reconstruct(a, b) -> np.ndarray:
    return np.asarray(a, dtype=np.uint64) + np.asarray(b, dtype=np.uint64)


def _bits64(x: np.ndarray) -> np.ndarray:
    return ((x[:, None] >> _SHIFTS) & np.uint64(1)).astype(np.uint8).ravel()


# -- Gilboa products and triples ----------------------------------------------------------

def gilboa_choose(ext: ExtensionReceiver, x) -> tuple[bytes, ExtBatch]:
    """Receiver side: one correlated OT per bit of each x."""
    x = np.asarray(x, dtype=np.uint64).ravel()
    return ext.extend(_bits64(x))


def gilboa_answer(ext: ExtensionSender, u: bytes, y) -> tuple[np.ndarray, np.ndarray]:
    """Sender side: returns (corrections, own share of x*y)."""
    y = np.asarray(y, dtype=np.uint64).ravel()
    batch = ext.extend(u, RING_BITS * len(y))
    h0, h1 = (_ring(p) for p in ext.pads(batch, 8))
    delta = (y[:, None] << _SHIFTS).ravel()
    ext.ledger.consume("gilboa", len(h0))
    tau = h0 + delta - h1
    return tau, -h0.reshape(len(y), RING_BITS).sum(axis=1, dtype=np.uint64)


def gilboa_finish(ext: ExtensionReceiver, batch: ExtBatch, tau) -> np.ndarray:
    h = _ring(ext.pads(batch, 8))
    tau = np.asarray(tau, dtype=np.uint64)
    if len(tau) != len(h):
        raise ValueError("correction count differs from the OT count")
    ext.ledger.consume("gilboa", len(h))
    v = h + batch.choices.astype(np.uint64) * tau
    return v.reshape(-1, RING_BITS).sum(axis=1, dtype=np.uint64)


def gilboa_mul(ext_r: ExtensionReceiver, ext_s: ExtensionSender, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Additive shares of x*y mod 2^64 where the receiver holds x and the sender holds y."""
    u, batch = gilboa_choose(ext_r, x)
    tau, share_s = gilboa_answer(ext_s, u, y)
    return gilboa_finish(ext_r, batch, tau), share_s


@dataclass
class Triples:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __len__(self):
        return len(self.a)

    def split(self, n: int) -> tuple["Triples", "Triples"]:
        return Triples(self.a[:n], self.b[:n], self.c[:n]), Triples(self.a[n:], self.b[n:], self.c[n:])


def triple_gen(party: int, link: Link, ext, count: int, rng: Drbg, chunk: int = TRIPLE_CHUNK) -> Triples:
    """Beaver triples (a, b, a*b) in shares.

    Cross terms a0*b1 and b0*a1 are both Gilboa products with party 0 choosing
    on its own bits, so every correlated OT runs in the extension direction.
    """
    a = rng.u64(count)
    b = rng.u64(count)
    c = a * b
    for lo in range(0, count, chunk):
        hi = min(count, lo + chunk)
        if party == 0:
            u, batch = gilboa_choose(ext, np.concatenate([a[lo:hi], b[lo:hi]]))
            link.send(u)
            s = gilboa_finish(ext, batch, link.recv_u64(2 * RING_BITS * (hi - lo)))
        else:
            tau, s = gilboa_answer(ext, link.recv(), np.concatenate([b[lo:hi], a[lo:hi]]))
            link.send_u64(tau)
        n = hi - lo
        c[lo:hi] += s[:n] + s[n:]
    return Triples(a, b, c)


@dataclass
class OpCounter:
    mults: int = 0
    adds: int = 0
    opens: int = 0


def beaver_mul(party: int, link: Link, x, y, t: Triples, ops: OpCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    y = np.asarray(y, dtype=np.uint64)
    if len(t) != x.size:
        raise ValueError("one triple per multiplication")
    a, b, c = (v.reshape(x.shape) for v in (t.a, t.b, t.c))
    mine = np.stack([x - a, y - b])
    other = link.exchange_u64(mine, first=party == 0)
    d, e = mine + other
    z = c + d * b + e * a
    if party == 0:
        z = z + d * e
    if ops is not None:
        ops.mults += x.size
        ops.opens += 2 * x.size
    return z


def reveal(party: int, link: Link, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    return x + link.exchange_u64(x, first=party == 0)


# -- fingerprint matching --------------------------------------------------------------

def plaintext_distances(template, db) -> np.ndarray:
    """Ring-exact oracle: sum_i (u_i - v_i)^2 mod 2^64 per database row."""
    diff = np.asarray(template, dtype=np.uint64)[None, :] - np.asarray(db, dtype=np.uint64)
    return (diff * diff).sum(axis=1, dtype=np.uint64)


def distance_value(ring_distance) -> np.ndarray:
    """Squared distance back to feature units (scale 2^-32)."""
    return np.asarray(ring_distance, dtype=np.uint64).astype(np.float64) / 2.0 ** (2 * FRAC_BITS)


@dataclass
class MatchResult:
    distances: np.ndarray
    values: np.ndarray
    verdicts: np.ndarray
    threshold: float
    ots_used: int
    triples: int
    ops: OpCounter
    seconds: dict = field(default_factory=dict)

    @property
    def matches(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.verdicts)]


def match_fingerprint(party: int, link: Link, template_share, db_share, triples: Triples, threshold: float,
                      ops: OpCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Squared distances between a shared template and every shared database row.

    Per row: N subtractions, N Beaver multiplications, N-1 additions.  The
    distances are revealed to both parties and thresholded in the clear,
    so the protocol leaks every distance, not only the verdict.
    """
    ops = ops or OpCounter()
    u = np.asarray(template_share, dtype=np.uint64)
    v = np.asarray(db_share, dtype=np.uint64)
    if v.ndim != 2 or u.shape != (v.shape[1],):
        raise ValueError(f"share shapes disagree: template {u.shape}, database {v.shape}")
    m, n = v.shape
    z = u[None, :] - v
    ops.adds += m * n
    sq = beaver_mul(party, link, z, z, triples, ops)
    d_share = sq.sum(axis=1, dtype=np.uint64)
    ops.adds += m * (n - 1)
    d = reveal(party, link, d_share)
    return d, distance_value(d) <= threshold


def _agree_shape(party: int, link: Link, shape: tuple | None) -> tuple[int, int]:
    """Party 0 owns the database and announces (M, N); party 1 checks its template length."""
    if party == 0:
        link.send(struct.pack(">II", *shape))
        (n_t,) = struct.unpack(">I", link.recv())
        if n_t != shape[1]:
            raise ValueError(f"template length {n_t} differs from database width {shape[1]}")
        return shape
    m, n = struct.unpack(">II", link.recv())
    link.send(struct.pack(">I", shape[0]))
    if n != shape[0]:
        raise ValueError(f"template length {shape[0]} differs from database width {n}")
    return m, n


def run_match(party: int, link: Link, base: BaseOts, rng: Drbg, threshold: float,
              db=None, template=None) -> MatchResult:
    """Complete two-party matching run for one party.

    Party 0 holds the ring-encoded database (and the base-OT sender view),
    party 1 the ring-encoded template.  Each input is shared, triples are
    generated from the extension, distances are computed and revealed.
    """
    t0 = time.perf_counter()
    seconds = {}
    if party == 0:
        db = np.asarray(db, dtype=np.uint64)
        m, n = _agree_shape(0, link, db.shape)
    else:
        template = np.asarray(template, dtype=np.uint64).ravel()
        m, n = _agree_shape(1, link, template.shape)
    ext = ExtensionReceiver(base) if party == 0 else ExtensionSender(base)

    if party == 0:
        keep, give = share(rng.child("db"), db)
        link.send_u64(give)
        db_sh = keep
        tpl_sh = link.recv_u64(n)
    else:
        db_sh = link.recv_u64(m * n).reshape(m, n)
        keep, give = share(rng.child("template"), template)
        link.send_u64(give)
        tpl_sh = keep
    seconds["share"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    triples = triple_gen(party, link, ext, m * n, rng.child("triples"))
    seconds["triples"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    ops = OpCounter()
    d, verdicts = match_fingerprint(party, link, tpl_sh, db_sh, triples, threshold, ops)
    seconds["distances"] = time.perf_counter() - t2
    seconds["total"] = time.perf_counter() - t0
    return MatchResult(d, distance_value(d), verdicts, threshold, ext.ledger.extended, m * n, ops, seconds)


def dealer_rots(rng: Drbg, count: int = KAPPA, nbytes: int = BASE_BYTES) -> tuple[list[RotPair], list[RotPair]]:
    """Locally sampled ROTs with both views; for tests and offline demos only."""
    sender, receiver = [], []
    for _ in range(count):
        r0, r1, c = rng.bytes(nbytes), rng.bytes(nbytes), rng.bit()
        sender.append(RotPair(r0=r0, r1=r1))
        receiver.append(RotPair(rc=(r0, r1)[c], c=c))
    return sender, receiver


# -- database files -----------------------------------------------------------------

_DB_HEADER = struct.Struct(">8sII")


def write_db(path, values) -> None:
    arr = np.atleast_2d(np.asarray(values, dtype=np.uint64))
    m, n = arr.shape
    Path(path).write_bytes(_DB_HEADER.pack(DB_MAGIC, m, n) + arr.astype(">u8").tobytes())


def read_db(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _DB_HEADER.size:
        raise ValueError(f"{path}: truncated database header")
    magic, m, n = _DB_HEADER.unpack_from(data)
    if magic != DB_MAGIC:
        raise ValueError(f"{path}: not a fingerprint database file")
    if len(data) != _DB_HEADER.size + 8 * m * n:
        raise ValueError(f"{path}: expected {m}x{n} ring elements")
    return np.frombuffer(data, dtype=">u8", offset=_DB_HEADER.size).astype(np.uint64).reshape(m, n)
