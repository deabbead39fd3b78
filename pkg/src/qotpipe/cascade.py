"""Cascade reconciliation over an ordered pair of raw blocks.

The sender announces parities for both of its blocks; the receiver answers
with parity mismatches.  For its correlated block it compares against its
own key.  For the other block it answers from a private error pattern drawn
at the estimated QBER, so the sender sees two traffic streams with the
same statistics and cannot tell which one is real.

Both sides run an identical :class:`CascadeDriver` per position.  Drivers
only consume the receiver's mismatch bits, so they stay in lock-step
without any other synchronisation.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .auth import poly_hash
from .errors import ProtocolAbort
from .params import binary_entropy
from .rng import Drbg

NULL_QUERY = (0, 0)


@dataclass(frozen=True)
class CascadeConfig:
    """Pass schedule and limits.

    ``schedule="halving"`` uses a power-of-two first block near ``1/p``,
    doubles it once, then runs half-frame passes; with range reuse it lands
    near f = 1.04 at 1 % QBER.  ``schedule="classic"`` is the textbook
    ``0.73/p`` block with doubling every pass.
    """
    passes: int = 16
    schedule: str = "halving"
    block_factor: float = 0.73
    min_block: int = 8
    hash_bits_verify: int = 128
    max_rounds: int = 100_000
    # Corrections allowed per position, as a multiple of the estimate.  A
    # desynchronized pair hits this instead of looping.
    error_factor: float = 4.0

    def __post_init__(self):
        if self.passes < 2:
            raise ValueError("Cascade needs at least two passes")
        if self.hash_bits_verify < 96:
            raise ValueError("verification hash must carry at least 96 bits")
        if self.schedule not in ("halving", "classic"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def first_block(self, p_hat: float, n: int) -> int:
        if p_hat <= 0:
            return max(1, min(n, max(self.min_block, int(round(self.block_factor * n)))))
        if self.schedule == "classic":
            k = int(round(self.block_factor / p_hat))
        else:
            k = 1 << max(0, math.ceil(math.log2(1 / p_hat)))
        return max(1, min(n, max(self.min_block, k)))

    def pass_count(self, p_hat: float) -> int:
        # A noiseless estimate still runs one confirmation pass.
        return 1 if p_hat <= 0 else self.passes

    def max_corrections(self, p_hat: float, n: int) -> int:
        return int(n * max(self.error_factor * p_hat, p_hat + 0.03)) + 64

    def block_lengths(self, p_hat: float, n: int) -> list[int]:
        k1 = self.first_block(p_hat, n)
        out = []
        for j in range(self.pass_count(p_hat)):
            if self.schedule == "halving" and j >= 2:
                k = -(-n // 2)
            else:
                k = k1 << j
            out.append(max(1, min(n, k)))
        return out


class CascadeDriver:
    """Query schedule for one block position, identical on both parties."""

    def __init__(self, n: int, p_hat: float, config: CascadeConfig, seed: bytes):
        self.n = n
        self.config = config
        self.passes = config.pass_count(p_hat)
        self.block_len = config.block_lengths(p_hat, n)
        self.max_corrections = config.max_corrections(p_hat, n)
        drbg = Drbg(seed)
        self.perms = [np.arange(n)] + [drbg.child(f"pass{j}").permutation(n) for j in range(1, self.passes)]
        self.where = []
        for perm in self.perms:
            inv = np.empty(n, dtype=np.int64)
            inv[perm] = np.arange(n)
            self.where.append(inv)
        self.odd: list[np.ndarray] = []
        self.searches: dict[tuple[int, int], list[int]] = {}
        self.pending_top: int | None = None
        self.corrected: list[int] = []
        # Corrections so far, in each pass's shuffled coordinates.
        self.flips = [np.zeros(n, dtype=np.uint8) for _ in range(self.passes)]
        # Every range ever disclosed, keyed by (pass, start, length).  The
        # sender's parity never changes, so the current mismatch of a known
        # range follows from the corrections made inside it since.
        self.known: dict[tuple[int, int, int], int] = {}
        self.leak = 0
        self.rounds = 0
        self.queries_per_pass = [0] * self.passes
        self.mismatches_per_pass = [0] * self.passes
        self._outstanding: list = []

    @property
    def started(self) -> int:
        return len(self.odd)

    @property
    def done(self) -> bool:
        return not self.searches and self.pending_top is None and self.started == self.passes

    def _block_bounds(self, j: int, b: int) -> tuple[int, int]:
        k = self.block_len[j]
        return b * k, min(self.n, (b + 1) * k)

    def _flip_parity(self, j: int, s: int, ln: int) -> int:
        return int(self.flips[j][s:s + ln].sum()) & 1

    def _half(self, key) -> tuple[int, int, int]:
        lo, hi = self.searches[key]
        return key[0], lo, (hi - lo + 1) // 2

    def _narrow(self, key, m: int) -> None:
        lo, hi = self.searches[key]
        mid = lo + (hi - lo + 1) // 2
        self.searches[key] = [lo, mid] if m else [mid, hi]

    def next_queries(self) -> list[tuple[int, int, int]] | None:
        """(pass, start, length) triples in shuffled coordinates; ``None`` when finished."""
        while True:
            self._settle()
            progressed = False
            for key in sorted(self.searches):
                if key not in self.searches:
                    continue
                q = self._half(key)
                if q in self.known:
                    self._narrow(key, self.known[q] ^ self._flip_parity(*q))
                    progressed = True
            if not progressed:
                break
        if self.searches:
            self._outstanding = sorted(self.searches)
            return [self._half(key) for key in self._outstanding]
        if self.started < self.passes:
            j = self.started
            k = self.block_len[j]
            self.pending_top = j
            self._outstanding = []
            return [(j, s, min(k, self.n - s)) for s in range(0, self.n, k)]
        return None

    def feed(self, mismatches) -> list[int]:
        """Apply the receiver's mismatch bits for the last query list; returns corrected indices."""
        mismatches = np.asarray(mismatches, dtype=np.uint8)
        self.rounds += 1
        self.leak += len(mismatches)
        if self.pending_top is not None:
            j = self.pending_top
            self.pending_top = None
            if len(mismatches) != -(-self.n // self.block_len[j]):
                raise ProtocolAbort("protocol_violation", "response count does not match query count")
            self.odd.append(mismatches.astype(bool).copy())
            self.queries_per_pass[j] += len(mismatches)
            self.mismatches_per_pass[j] += int(mismatches.sum())
            k = self.block_len[j]
            for b, m in enumerate(mismatches):
                s = b * k
                ln = min(k, self.n - s)
                self.known[(j, s, ln)] = int(m) ^ self._flip_parity(j, s, ln)
                if m:
                    self.searches[(j, b)] = [s, s + ln]
        else:
            keys = self._outstanding
            if len(keys) != len(mismatches):
                raise ProtocolAbort("protocol_violation", "response count does not match query count")
            for key, m in zip(keys, mismatches):
                q = self._half(key)
                self.known[q] = int(m) ^ self._flip_parity(*q)
                self.queries_per_pass[key[0]] += 1
                self.mismatches_per_pass[key[0]] += int(m)
                self._narrow(key, int(m))
        return self._settle()

    def _settle(self) -> list[int]:
        """Resolve finished searches and propagate corrections until stable."""
        fixed = []
        while True:
            found = [(key, lo) for key, (lo, hi) in self.searches.items() if hi - lo == 1]
            if not found:
                return fixed
            for key, lo in found:
                # An earlier correction in this sweep may have cancelled or restarted it.
                if self.searches.get(key) != [lo, lo + 1]:
                    continue
                del self.searches[key]
                idx = int(self.perms[key[0]][lo])
                fixed.append(idx)
                self.corrected.append(idx)
                if len(self.corrected) > self.max_corrections:
                    # Inconsistent answers can keep reopening searches forever.
                    raise ProtocolAbort("ir_stuck", f"more than {self.max_corrections} corrections")
                self._toggle(idx)

    def _toggle(self, idx: int) -> None:
        for j in range(self.passes):
            self.flips[j][self.where[j][idx]] ^= 1
        for j in range(self.started):
            pos = int(self.where[j][idx])
            b = pos // self.block_len[j]
            self.odd[j][b] ^= True
            key = (j, b)
            if key in self.searches:
                lo, hi = self.searches[key]
                if lo <= pos < hi:
                    # The flip lands inside the live interval, which is now even.
                    del self.searches[key]
            if self.odd[j][b] and key not in self.searches:
                self.searches[key] = list(self._block_bounds(j, b))


class _PrefixParity:
    """Range parities over the per-pass shuffled view of a bit vector."""

    def __init__(self, bits: np.ndarray, perms):
        self.bits = bits
        self.perms = perms
        self._cache: dict[int, np.ndarray] = {}

    def invalidate(self) -> None:
        self._cache.clear()

    def __call__(self, queries) -> np.ndarray:
        out = np.zeros(len(queries), dtype=np.uint8)
        if not queries:
            return out
        q = np.asarray(queries, dtype=np.int64)
        for j in np.unique(q[:, 0]):
            if j not in self._cache:
                cs = np.zeros(len(self.bits) + 1, dtype=np.int64)
                np.cumsum(self.bits[self.perms[j]], out=cs[1:])
                self._cache[j] = cs
            cs = self._cache[j]
            sel = q[:, 0] == j
            out[sel] = (cs[q[sel, 1] + q[sel, 2]] - cs[q[sel, 1]]) & 1
        return out


# Wire format of one round for one position.

def encode_round(tag_pass: int, position: int, descriptors, bits) -> bytes:
    desc = np.asarray(descriptors, dtype=">u4").reshape(-1, 2)
    head = struct.pack(">BBI", tag_pass, position, len(desc))
    return head + desc.tobytes() + np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def decode_round(payload: bytes) -> tuple[int, int, np.ndarray, np.ndarray]:
    if len(payload) < 6:
        raise ValueError("truncated Cascade message")
    tag_pass, position, count = struct.unpack_from(">BBI", payload)
    need = 6 + 8 * count + (count + 7) // 8
    if len(payload) != need:
        raise ValueError("Cascade message length does not match its descriptor count")
    desc = np.frombuffer(payload, dtype=">u4", count=2 * count, offset=6).astype(np.int64).reshape(-1, 2)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=6 + 8 * count))[:count]
    return tag_pass, position, desc, bits


def _to_descriptors(queries, n: int, width: int) -> np.ndarray:
    """Global (offset, length) pairs; offset = pass * n + start.  Padded with null queries."""
    desc = np.zeros((width, 2), dtype=np.int64)
    for i, (j, s, ln) in enumerate(queries):
        desc[i] = (j * n + s, ln)
    return desc


def _from_descriptors(desc: np.ndarray, n: int) -> list[tuple[int, int, int]]:
    return [(int(o) // n, int(o) % n, int(ln)) for o, ln in desc if ln > 0]


@dataclass
class RoundStats:
    messages: int = 0
    bytes: int = 0
    rounds: int = 0


class CascadeSender:
    """Alice: announces parities for every block and never modifies them.

    With two blocks each round's query lists are padded with null
    descriptors to a common width, so both positions produce messages of
    identical size.  Leakage is charged per slot, which makes the two
    counters equal and matches the parity payload bit for bit.
    """

    def __init__(self, blocks, p_hat: float, config: CascadeConfig, seed: bytes):
        self.blocks = [np.asarray(b, dtype=np.uint8) for b in blocks]
        if len(self.blocks) not in (1, 2):
            raise ValueError("Cascade runs over one or two blocks")
        n = len(self.blocks[0])
        if any(len(b) != n for b in self.blocks):
            raise ValueError("sender blocks must have the same length")
        self.n = n
        self.drivers = [CascadeDriver(n, p_hat, config, seed) for _ in self.blocks]
        self.parity = [_PrefixParity(b, self.drivers[0].perms) for b in self.blocks]
        self.config = config
        self.slots = [0] * len(self.blocks)
        self.rounds = 0
        self._queries = None

    @property
    def positions(self) -> int:
        return len(self.blocks)

    def next_messages(self) -> list[bytes] | None:
        qs = [d.next_queries() for d in self.drivers]
        if all(q is None for q in qs):
            return None
        if self.rounds >= self.config.max_rounds:
            raise ProtocolAbort("ir_stuck", "round limit exceeded")
        self.rounds += 1
        qs = [q or [] for q in qs]
        self._queries = qs
        width = max(len(q) for q in qs)
        msgs = []
        for pos in range(self.positions):
            desc = _to_descriptors(qs[pos], self.n, width)
            bits = np.zeros(width, dtype=np.uint8)
            bits[:len(qs[pos])] = self.parity[pos](qs[pos])
            self.slots[pos] += width
            msgs.append(encode_round(_tag_pass(qs[pos]), pos, desc, bits))
        return msgs

    def take_responses(self, payloads) -> None:
        if len(payloads) != self.positions:
            raise ProtocolAbort("protocol_violation", "wrong number of Cascade responses")
        for pos, payload in enumerate(payloads):
            _, position, desc, bits = decode_round(payload)
            if position != pos:
                raise ProtocolAbort("protocol_violation", "Cascade response for the wrong position")
            q = self._queries[pos]
            if _from_descriptors(desc, self.n) != list(q) or len(desc) != len(self._queries_width()):
                raise ProtocolAbort("protocol_violation", "Cascade response descriptors differ from the queries")
            if bits[len(q):].any():
                raise ProtocolAbort("protocol_violation", "non-zero response to a null query")
            if q:
                self.drivers[pos].feed(bits[:len(q)])

    def _queries_width(self):
        return range(max(len(q) for q in self._queries))

    @property
    def leak_per_position(self) -> tuple[int, ...]:
        return tuple(self.slots)

    @property
    def disclosed_per_position(self) -> tuple[int, ...]:
        return tuple(d.leak for d in self.drivers)


class CascadeReceiver:
    """Bob: corrects his key at position ``c`` and answers the other position from a fake error pattern.

    ``positions=1`` is the plain single-block mode used by the QKD lane.
    """

    def __init__(self, key, c: int, p_hat: float, config: CascadeConfig, seed: bytes, rng: Drbg | None = None,
                 dummy_rate: float | None = None, positions: int = 2):
        self.key = np.array(key, dtype=np.uint8)
        self.n = len(self.key)
        self.positions = positions
        if positions == 1:
            c = 0
        elif rng is None:
            raise ValueError("the two-position mode needs an RNG for the fake error pattern")
        self.c = c
        self.drivers = [CascadeDriver(self.n, p_hat, config, seed) for _ in range(positions)]
        perms = self.drivers[0].perms
        self.views = [None] * positions
        self.views[c] = _PrefixParity(self.key, perms)
        self.dummy_errors = None
        if positions == 2:
            q = p_hat if dummy_rate is None else dummy_rate
            self.dummy_errors = rng.bernoulli(q, self.n)
            self.views[1 - c] = _PrefixParity(self.dummy_errors, perms)
        self.config = config
        self.slots = [0] * positions
        self._applied = [0] * positions
        self._qs = None

    def _sync(self, pos: int) -> None:
        """Apply every correction the driver has found since the last sync."""
        driver = self.drivers[pos]
        fresh = driver.corrected[self._applied[pos]:]
        if fresh:
            target = self.key if pos == self.c else self.dummy_errors
            for idx in fresh:
                target[idx] ^= 1
            self._applied[pos] = len(driver.corrected)
            self.views[pos].invalidate()

    def pending(self) -> bool:
        """True while the drivers still expect another round."""
        if self._qs is None:
            self._qs = [d.next_queries() for d in self.drivers]
            for pos in range(self.positions):
                self._sync(pos)
        return any(q is not None for q in self._qs)

    def respond(self, payloads) -> list[bytes]:
        if not self.pending():
            raise ProtocolAbort("protocol_violation", "Cascade query after the schedule finished")
        if len(payloads) != self.positions:
            raise ProtocolAbort("protocol_violation", "wrong number of Cascade queries")
        qs = [q or [] for q in self._qs]
        self._qs = None
        width = max(len(q) for q in qs)
        out = []
        for pos, payload in enumerate(payloads):
            tag_pass, position, desc, bits = decode_round(payload)
            if position != pos:
                raise ProtocolAbort("protocol_violation", "Cascade query for the wrong position")
            if len(desc) != width or _from_descriptors(desc, self.n) != qs[pos]:
                raise ProtocolAbort("protocol_violation", "unexpected Cascade query schedule")
            nq = len(qs[pos])
            own = self.views[pos](qs[pos])
            mism = own ^ bits[:nq] if pos == self.c else own
            resp = np.zeros(len(desc), dtype=np.uint8)
            resp[:nq] = mism
            self.slots[pos] += width
            if nq:
                self.drivers[pos].feed(mism)
                self._sync(pos)
            out.append(encode_round(tag_pass, pos, desc, resp))
        return out

    @property
    def leak_per_position(self) -> tuple[int, ...]:
        return tuple(self.slots)


def _tag_pass(queries) -> int:
    return max((j for j, _, _ in queries), default=0)


def block_hash(bits: np.ndarray, point: bytes) -> bytes:
    """128-bit polynomial hash of a bit string; the bit length is folded in as a final block."""
    packed = np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()
    pad = (-len(packed)) % 16
    blocks = struct.pack(">QQ", 1 << 63, len(bits)) + packed + bytes(pad)
    return poly_hash(blocks, point)


def verify_hashes(corrected: np.ndarray, c: int, sender_hashes, point: bytes) -> bool:
    """Receiver-side check: the corrected block must match the hash at position c and only there."""
    mine = block_hash(corrected, point)
    matches = [mine == h for h in sender_hashes]
    return matches[c] and sum(matches) == 1


def measure_efficiency(leak_correlated: int, n_raw: int, p_hat: float) -> float | None:
    """Disclosed bits over the Shannon limit; ``None`` when the QBER estimate is zero."""
    if p_hat <= 0:
        return None
    return leak_correlated / (n_raw * float(binary_entropy(p_hat)))


def bound_efficiency(disclosed, n_raw: int, p_hat: float, floor: float = 1.0) -> float:
    """Efficiency charged in the length bound: the larger disclosure of the two positions.

    The sender cannot tell which position is real, so it charges both; the
    result is c-independent and never below the true efficiency.  With a
    zero QBER estimate the efficiency is undefined and ``floor`` is used.
    """
    if p_hat <= 0:
        return floor
    return max(floor, max(disclosed) / (n_raw * float(binary_entropy(p_hat))))


@dataclass
class ReconciliationOutcome:
    corrected_receiver_block: np.ndarray
    leak_bits_per_position: tuple[int, int]
    f_actual: float | None
    verified: bool
    messages: int = 0
    bytes: int = 0
    rounds: int = 0
    mismatches_per_pass: tuple = ()
    queries_per_pass: tuple = ()
    residual_errors: int | None = None
    disclosed_per_position: tuple = ()
    f_bound: float | None = None


def dummy_session_responses(queries, error_pattern: np.ndarray, perm: np.ndarray | None = None) -> np.ndarray:
    """Mismatch answers for the uncorrelated position: parity of the fake errors on each sub-block."""
    e = np.asarray(error_pattern, dtype=np.uint8)
    view = e if perm is None else e[perm]
    cs = np.concatenate([[0], np.cumsum(view, dtype=np.int64)])
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
    return ((cs[q[:, 0] + q[:, 1]] - cs[q[:, 0]]) & 1).astype(np.uint8)


def reconcile(sender_blocks, receiver_block, c: int, p_hat: float, config: CascadeConfig | None = None,
              seed: bytes = b"\x00" * 32, rng: Drbg | None = None, verify_point: bytes | None = None,
              truth: np.ndarray | None = None) -> ReconciliationOutcome:
    """Run both roles in-process; aborts exactly as the networked session would.

    One sender block selects the plain single-block mode.
    """
    config = config or CascadeConfig()
    rng = rng or Drbg(seed)
    positions = len(sender_blocks)
    alice = CascadeSender(sender_blocks, p_hat, config, seed)
    bob = CascadeReceiver(receiver_block, c, p_hat, config, seed, rng.child("dummy"), positions=positions)
    c = bob.c
    stats = RoundStats()
    while True:
        msgs = alice.next_messages()
        if msgs is None:
            if bob.pending():
                raise ProtocolAbort("protocol_violation", "parties disagree on the end of reconciliation")
            break
        replies = bob.respond(msgs)
        alice.take_responses(replies)
        stats.rounds += 1
        stats.messages += 2 * positions
        stats.bytes += sum(map(len, msgs)) + sum(map(len, replies))
    point = verify_point if verify_point is not None else rng.child("verify").bytes(16)
    hashes = [block_hash(b, point) for b in alice.blocks]
    ok = verify_hashes(bob.key, c, hashes, point)
    leaks = alice.leak_per_position
    outcome = ReconciliationOutcome(
        corrected_receiver_block=bob.key,
        leak_bits_per_position=leaks,
        f_actual=measure_efficiency(alice.disclosed_per_position[c], len(bob.key), p_hat),
        f_bound=bound_efficiency(alice.disclosed_per_position, len(bob.key), p_hat),
        verified=ok,
        messages=stats.messages,
        bytes=stats.bytes,
        rounds=stats.rounds,
        mismatches_per_pass=tuple(tuple(d.mismatches_per_pass) for d in alice.drivers),
        queries_per_pass=tuple(tuple(d.queries_per_pass) for d in alice.drivers),
        residual_errors=None if truth is None else int(np.count_nonzero(bob.key != truth)),
        disclosed_per_position=alice.disclosed_per_position,
    )
    if not ok:
        raise ProtocolAbort("ir_fail", "verification hash mismatch")
    return outcome
