"""Per-party post-processing pipeline: raw buffering, OT and QKD sessions, stage authentication.

Each session runs as a fixed sequence of stages.  Every frame of a stage
is absorbed into that stage's authentication context and the stage ends
with a tag exchange followed by a one-byte verdict from each side.  A
local error sends ABORT first and still runs both, so the parties always
leave a stage together and agree on the outcome.  Outputs are released
only after the last stage's tags verify on both sides.
"""
from __future__ import annotations

import collections
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import auth, cascade, commitment as cm, otcore, pa, qkdlane
from .errors import ABORT_REASONS, ProtocolAbort
from .params import ProtocolParams, derived_counts, max_secure_length
from .qsim import RECEIVER, SENDER, ChannelModel, RawEventBlock, generate_block, raw_filename, read_raw
from .rng import Drbg
from .transport import LANE_OT, LANE_QKD, Frame, Transport, TransportError

PHASES = ("quantum-load", "commit", "open", "estimate", "separate", "reconcile", "amplify", "done")
OT_STAGES = ("quantum-load", "commit", "open", "separate", "reconcile", "amplify")
QKD_STAGES = ("quantum-load", "sift", "reconcile", "amplify")
OT_TAG_COST = len(OT_STAGES) * auth.KEY_QUOTA
QKD_TAG_COST = len(QKD_STAGES) * auth.KEY_QUOTA
REPLENISH_BELOW = OT_TAG_COST + 2 * QKD_TAG_COST

RECORD_CHUNK = 65536
QKD_BLOCK_EVENTS = 40_000
QKD_REQUEST_BYTES = 1024
# Recent OT sessions whose test-set counts set the receiver's dummy error rate.
QBER_WINDOW = 64
MIN_QKD_BYTES = 64

_RAW_REQ = struct.Struct(">BQII")  # lane, first event id, event count, output bits / bytes
_VERDICT = struct.Struct(">II")


class SessionAbort(Exception):
    def __init__(self, reason: str, detail: str = "", stage: str = ""):
        super().__init__(f"{reason} at {stage}: {detail}" if stage else reason)
        self.reason, self.detail, self.stage = reason, detail, stage


class _PeerAbort(Exception):
    def __init__(self, reason: str, detail: str):
        self.reason, self.detail = reason, detail


class _EarlyTag(Exception):
    def __init__(self, frame: Frame):
        self.frame = frame


# -- logging ----------------------------------------------------------------

@dataclass
class LogRecord:
    ts: float
    phase: str
    event: str
    detail: str = ""

    def line(self) -> str:
        return f"{self.ts:.6f} {self.phase} {self.event} {self.detail}".rstrip()


class StageLog:
    def __init__(self, sink=None):
        self.records: list[LogRecord] = []
        self.sink = sink
        self._lock = threading.Lock()

    def add(self, phase: str, event: str, detail: str = "") -> None:
        rec = LogRecord(time.time(), phase, event, detail)
        with self._lock:
            self.records.append(rec)
        if self.sink is not None:
            self.sink.write(rec.line() + "\n")

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


class SessionState:
    """Phase tracker; transitions must follow :data:`PHASES` and ``aborted`` is terminal."""

    def __init__(self, log: StageLog, label: str):
        self.phase = None
        self.reason = None
        self.log = log
        self.label = label

    def advance(self, phase: str) -> None:
        if self.phase == "aborted":
            raise RuntimeError("session already aborted")
        nxt = PHASES.index(phase)
        cur = -1 if self.phase is None else PHASES.index(self.phase)
        if nxt != cur + 1:
            raise RuntimeError(f"illegal transition {self.phase} -> {phase}")
        self.phase = phase
        self.log.add(phase, "enter", self.label)

    def abort(self, reason: str, stage: str = "") -> None:
        self.phase = "aborted"
        self.reason = reason
        self.log.add("aborted", reason, f"{self.label} stage={stage}")

    def note(self, detail: str) -> None:
        self.log.add(self.phase or "-", "detail", f"{self.label} {detail}")


# -- raw data plumbing -------------------------------------------------------

class SimulatedSource:
    """cat: live simulator; both parties share the simulation seed and keep their own half."""

    def __init__(self, model: ChannelModel, party: str, seed, block_events: int = 400_000):
        self.model, self.party, self.block_events = model, party, block_events
        self.seed = Drbg(seed).seed
        self.next_id = 0

    def next_block(self) -> RawEventBlock | None:
        pair = generate_block(self.model, self.block_events, self.seed + self.next_id.to_bytes(8, "big"), self.next_id)
        self.next_id += 1
        return pair[0] if self.party == SENDER else pair[1]


class FileSource:
    """cat: pre-recorded ``block_<id>_<party>.qraw`` files in id order."""

    def __init__(self, raw_dir, party: str):
        self.party = party
        found = []
        for p in Path(raw_dir).glob(f"block_*_{party}.qraw"):
            try:
                found.append((int(p.name.split("_")[1]), p))
            except ValueError:
                continue
        self.paths = [p for _, p in sorted(found)]
        self.next_id = 0

    def next_block(self) -> RawEventBlock | None:
        if self.next_id >= len(self.paths):
            return None
        block = read_raw(self.paths[self.next_id])
        self.next_id += 1
        return block


class BlockSource:
    """cat over an explicit list of blocks (tests)."""

    def __init__(self, blocks):
        self.blocks = list(blocks)

    def next_block(self):
        return self.blocks.pop(0) if self.blocks else None


class Resizer:
    """Accumulates incoming blocks and emits exactly-sized event runs, keeping the remainder."""

    def __init__(self):
        self._bases: list[np.ndarray] = []
        self._outcomes: list[np.ndarray] = []
        self.buffered = 0
        self.emitted = 0

    def push(self, block: RawEventBlock) -> None:
        if len(block):
            self._bases.append(block.bases)
            self._outcomes.append(block.outcomes)
            self.buffered += len(block)

    def take(self, n: int) -> tuple[np.ndarray, np.ndarray, int]:
        if n > self.buffered:
            raise ValueError(f"only {self.buffered} events buffered, {n} requested")
        bases = np.concatenate(self._bases) if len(self._bases) > 1 else self._bases[0]
        outcomes = np.concatenate(self._outcomes) if len(self._outcomes) > 1 else self._outcomes[0]
        first = self.emitted
        out = bases[:n].copy(), outcomes[:n].copy(), first
        rest_b, rest_o = bases[n:], outcomes[n:]
        self._bases = [rest_b] if len(rest_b) else []
        self._outcomes = [rest_o] if len(rest_o) else []
        self.buffered -= n
        self.emitted += n
        return out


def resize(accumulator: Resizer, incoming, target: int) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Push ``incoming`` blocks and pop every complete run of ``target`` events."""
    for block in incoming:
        accumulator.push(block)
    out = []
    while accumulator.buffered >= target:
        out.append(accumulator.take(target))
    return out


class Mux:
    """Routes event runs to exactly one lane and books the event-id ranges."""

    def __init__(self, source, log: StageLog | None = None):
        self.source = source
        self.resizer = Resizer()
        self.routes: list[tuple[int, int, int]] = []  # (lane, first, stop)
        self.log = log
        self.events_in = 0

    @property
    def next_event(self) -> int:
        return self.resizer.emitted

    def _fill(self, n: int) -> None:
        while self.resizer.buffered < n:
            block = self.source.next_block()
            if block is None:
                raise ProtocolAbort("insufficient_material", f"raw source exhausted with {self.resizer.buffered} events buffered")
            self.events_in += len(block)
            self.resizer.push(block)

    def available(self, n: int) -> bool:
        try:
            self._fill(n)
        except ProtocolAbort:
            return False
        return True

    def route(self, lane: int, n: int) -> tuple[np.ndarray, np.ndarray, int]:
        self._fill(n)
        bases, outcomes, first = self.resizer.take(n)
        if self.routes and first < self.routes[-1][2]:
            raise AssertionError("event range routed twice")
        self.routes.append((lane, first, first + n))
        if self.log:
            self.log.add("mux", "route", f"lane={lane} events={first}..{first + n}")
        return bases, outcomes, first

    def conservation(self) -> dict:
        per_lane = {}
        for lane, a, b in self.routes:
            per_lane[lane] = per_lane.get(lane, 0) + (b - a)
        return {"in": self.events_in, "routed": per_lane, "leftover": self.resizer.buffered}


# -- requests and results ----------------------------------------------------

@dataclass
class OtRequest:
    count: int
    length: int = 128
    choices: list | None = None
    request_id: int | None = None

    def __post_init__(self):
        if self.count < 1 or self.length < 1:
            raise ValueError("count and length must be positive")
        if self.choices is not None:
            if len(self.choices) != self.count:
                raise ValueError("receiver requests carry exactly one choice bit per OT")
            self.choices = [int(b) & 1 for b in self.choices]


@dataclass
class OtResult:
    request_id: int
    index: int
    session_id: int
    role: str
    status: str
    reason: str | None = None
    detail: str = ""
    m0: bytes | None = None
    m1: bytes | None = None
    mc: bytes | None = None
    c: int | None = None
    length: int = 0
    p_hat: float | None = None
    f_bound: float | None = None
    f_actual: float | None = None
    secure_bound: int | None = None
    timings: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _bits_to_bytes(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


# -- stage runner -------------------------------------------------------------

class Stage:
    """Frame I/O for one authenticated stage.

    ABORT frames carry the reason but stay out of the MAC transcript, so a
    party that aborts while its peer is still streaming can drain the
    stream and both tags still cover identical data.
    """

    def __init__(self, party: "Party", lane: int, session_id: int, name: str):
        self.party, self.lane, self.session_id, self.name = party, lane, session_id, name
        self.sent: list[bytes] = []
        self.received: list[bytes] = []
        self.frames = 0
        self.bytes = 0

    def _count(self, raw: bytes) -> None:
        self.frames += 1
        self.bytes += len(raw)

    def send(self, ftype: str, payload: bytes = b"") -> None:
        frame = Frame(self.lane, ftype, self.session_id, payload)
        raw = frame.encode()
        self.party.transport.send(frame)
        self._count(raw)
        if ftype != "ABORT":
            self.sent.append(raw)

    def take(self, frame: Frame) -> None:
        """Account for and absorb a received non-tag frame."""
        raw = frame.encode()
        self._count(raw)
        if frame.type != "ABORT":
            self.received.append(raw)

    def recv(self, ftype: str) -> bytes:
        frame = self.party.transport.recv()
        if frame.type == "AUTH_TAG":
            raise _EarlyTag(frame)
        self.take(frame)
        if frame.type == "ABORT":
            raise _PeerAbort(*_abort_reason(frame))
        if frame.lane != self.lane or frame.session_id != self.session_id:
            raise ProtocolAbort("protocol_violation", f"frame for lane {frame.lane} session {frame.session_id}")
        if frame.type != ftype:
            raise ProtocolAbort("protocol_violation", f"expected {ftype}, got {frame.type}")
        return frame.payload

    def transcript(self) -> list[bytes]:
        """Sender-originated frames first, then receiver-originated, each in order."""
        if self.party.role == SENDER:
            return self.sent + self.received
        return self.received + self.sent


def _abort_reason(frame: Frame) -> tuple[str, str]:
    reason, _, detail = frame.payload.decode(errors="replace").partition("\n")
    return (reason if reason in ABORT_REASONS else "protocol_violation"), detail


class Party:
    """One end of the pipeline."""

    def __init__(self, role: str, transport: Transport, params: ProtocolParams, store: auth.SecretStore,
                 source, rng: Drbg | None = None, cascade_config: cascade.CascadeConfig | None = None,
                 log: StageLog | None = None, qkd_block_events: int = QKD_BLOCK_EVENTS,
                 qkd_request_bytes: int = QKD_REQUEST_BYTES):
        if role not in (SENDER, RECEIVER):
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.transport = transport
        self.params = params
        self.store = store
        self.log = log or StageLog()
        self.mux = Mux(source, self.log)
        self.rng = rng or Drbg()
        self.cascade_config = cascade_config or cascade.CascadeConfig()
        self.qkd_block_events = qkd_block_events
        self.qkd_request_bytes = qkd_request_bytes
        self.session_id = 0
        self.public_strings: list[bytes] = []
        self.qkd_keys: list[tuple[bytes, bytes]] = []
        self.stage_stats: list[dict] = []
        self.next_request_id = 0
        # (errors, checked) from recent verdicts; see dummy_rate().
        self.qber_window: collections.deque = collections.deque(maxlen=QBER_WINDOW)
        # Test hook: the receiver also hashes its raw bits on the other index set.
        self.keep_diagnostics = False

    @property
    def is_sender(self) -> bool:
        return self.role == SENDER

    # stage machinery

    def run_stage(self, lane: int, name: str, body):
        st = Stage(self, lane, self.session_id, name)
        t0 = time.perf_counter()
        local, peer, detail, early = None, None, "", None
        result = None
        try:
            result = body(st)
        except _PeerAbort as exc:
            peer, detail = exc.reason, exc.detail
        except _EarlyTag as exc:
            early = exc.frame
            local, detail = "protocol_violation", "tag arrived before the stage finished"
        except ProtocolAbort as exc:
            local, detail = exc.reason, exc.detail
        except (ValueError, IndexError, KeyError, struct.error) as exc:
            local, detail = "protocol_violation", f"{type(exc).__name__}: {exc}"
        except TransportError as exc:
            raise SessionAbort("protocol_violation", f"transport failed: {exc}", name) from None
        if local == "timeout":
            raise SessionAbort(local, detail, name)
        if local:
            try:
                st.send("ABORT", f"{local}\n{detail}".encode()[:4096])
            except TransportError:
                raise SessionAbort(local, detail, name) from None
        try:
            drained_reason, tags_ok = self._close(st, aborted=local is not None, early=early)
        except ProtocolAbort as exc:
            raise SessionAbort(exc.reason, exc.detail, name) from None
        except TransportError as exc:
            raise SessionAbort("protocol_violation", f"transport failed: {exc}", name) from None
        self.stage_stats.append({"session": self.session_id, "lane": lane, "stage": name,
                                 "frames": st.frames, "bytes": st.bytes,
                                 "seconds": time.perf_counter() - t0})
        if not tags_ok:
            raise SessionAbort("auth_fail", "tag mismatch", name)
        reason = local or peer or drained_reason
        if reason:
            raise SessionAbort(reason, detail, name)
        return result

    def _close(self, st: Stage, aborted: bool, early: Frame | None) -> tuple[str | None, bool]:
        """Tag exchange.  Returns (abort reason seen while draining, tags verified)."""
        peer_reason = None
        tag_frame = early
        if aborted and tag_frame is None:
            # The peer may still be streaming; absorb until its tag or its own abort.
            while True:
                f = self.transport.recv()
                if f.type == "AUTH_TAG":
                    tag_frame = f
                    break
                st.take(f)
                if f.type == "ABORT":
                    peer_reason = _abort_reason(f)[0]
                    break
        handle = struct.pack(">Q", self.store.consumed_offset)
        ctx = auth.AuthContext(handle)
        for msg in st.transcript():
            ctx.absorb(msg)
        try:
            local_tag = auth.finalize_tag(ctx, self.store)
        except auth.ReplenishNeeded as exc:
            raise ProtocolAbort("insufficient_material", str(exc)) from None
        self.transport.send(Frame(st.lane, "AUTH_TAG", st.session_id, auth.encode_tag(handle, local_tag)))
        while tag_frame is None:
            f = self.transport.recv()
            if f.type == "AUTH_TAG":
                tag_frame = f
            elif f.type == "ABORT":
                st._count(f.encode())
                peer_reason = peer_reason or _abort_reason(f)[0]
            else:
                # Sent by a peer that kept going after we finished; its tag covers
                # this frame and ours does not, so verification fails below.
                st._count(f.encode())
        try:
            peer_handle, peer_tag = auth.decode_tag(tag_frame.payload)
            if peer_handle != handle:
                raise auth.AuthError("key handle mismatch")
            auth.verify_exchange(local_tag, peer_tag)
            ok = True
        except auth.AuthError:
            ok = False
        # Verdict round: without it the party that verifies last could be
        # rejected by its peer and never learn of it.
        self.transport.send(Frame(st.lane, "AUTH_RES", st.session_id, b"\x01" if ok else b"\x00"))
        f = self.transport.recv()
        while f.type == "ABORT":
            peer_reason = peer_reason or _abort_reason(f)[0]
            f = self.transport.recv()
        peer_ok = f.type == "AUTH_RES" and f.payload == b"\x01"
        return peer_reason, ok and peer_ok

    # sessions

    def _new_session(self) -> int:
        self.session_id += 1
        return self.session_id

    def dummy_rate(self) -> float:
        """Error rate of the fabricated pattern: the QBER pooled over recent sessions.

        The real block's error count is binomial around the true QBER and does
        not depend on this session's estimate.  Drawing the dummy at the
        session's own estimate would add that estimate's sampling noise, which
        more than doubles the variance of the dummy's mismatch counts.
        """
        errors = sum(e for e, _ in self.qber_window)
        checked = sum(n for _, n in self.qber_window)
        return errors / checked if checked else 0.0

    def need_replenish(self) -> bool:
        """Identical on both parties: their stores consume in lock-step.

        The threshold keeps enough key for a failed QKD round, its retry and one OT.
        """
        return self.store.needs_replenish or self.store.remaining < REPLENISH_BELOW

    def qkd_session(self) -> bytes:
        """One QKD round; on success the new key extends the secret pool on both sides."""
        sid = self._new_session()
        state = SessionState(self.log, f"qkd session={sid}")
        n_ev = self.qkd_block_events
        want = self.qkd_request_bytes
        rng = self.rng.child(f"qkd{sid}")
        ctx: dict = {}

        def load(st: Stage):
            # Route before checking anything, so a failed round leaves both mux cursors in step.
            first = self.mux.next_event
            ctx["bases"], ctx["outcomes"], _ = self.mux.route(LANE_QKD, n_ev)
            if self.is_sender:
                st.send("RAW_REQ", _RAW_REQ.pack(LANE_QKD, first, n_ev, want))
            else:
                req = _RAW_REQ.unpack(st.recv("RAW_REQ"))
                if req != (LANE_QKD, first, n_ev, want):
                    raise ProtocolAbort("protocol_violation", "QKD raw request does not match local state")

        def sift(st: Stage):
            mine = ctx["bases"]
            if self.is_sender:
                st.send("QKD_BAS", otcore.encode_bits(mine))
                theirs, _ = otcore.decode_bits(st.recv("QKD_BAS"))
            else:
                theirs, _ = otcore.decode_bits(st.recv("QKD_BAS"))
                st.send("QKD_BAS", otcore.encode_bits(mine))
            if len(theirs) != n_ev:
                raise ProtocolAbort("protocol_violation", "basis string has the wrong length")
            sifted = qkdlane.matching_indices(mine, theirs)
            x = ctx["outcomes"]
            if self.is_sender:
                sample = qkdlane.choose_sample(rng.child("sample"), sifted)
                st.send("QKD_SMP", otcore.encode_index_set(sample) + otcore.encode_bits(x[sample]))
                other, _ = otcore.decode_bits(st.recv("QKD_SMP"))
                mine_s = x[sample]
            else:
                payload = st.recv("QKD_SMP")
                sample, off = otcore.decode_index_set(payload)
                other, end = otcore.decode_bits(payload, off)
                if end != len(payload) or len(other) != len(sample) or not np.isin(sample, sifted).all():
                    raise ProtocolAbort("protocol_violation", "malformed QKD sample")
                mine_s = x[sample]
                q, _ = qkdlane.sample_qber(mine_s, other)
                qkdlane.check_qber(q, len(sifted))
                st.send("QKD_SMP", otcore.encode_bits(mine_s))
            if len(other) != len(mine_s):
                raise ProtocolAbort("protocol_violation", "sample answer has the wrong length")
            q, _ = qkdlane.sample_qber(mine_s, other)
            qkdlane.check_qber(q, len(sifted))
            kept = np.setdiff1d(sifted, sample, assume_unique=True)
            ctx["key"], ctx["q"] = x[kept], q

        def reconcile(st: Stage):
            key, q = ctx["key"], ctx["q"]
            leak = self._reconcile(st, [key] if self.is_sender else key, q, positions=1, c=0, ctx=ctx)
            ctx["leak"] = leak[0]

        def amplify(st: Stage):
            n = len(ctx["key"])
            room = qkdlane.extractable_bits(n, ctx["leak"])
            nbytes = min(want, room // 8)
            if nbytes < MIN_QKD_BYTES:
                raise ProtocolAbort("insufficient_material", f"only {room} extractable bits")
            if self.is_sender:
                seed = pa.random_seed(rng.child("pa"), n, 8 * nbytes)
                st.send("PA_SEED", seed.encode())
                st.send("QKD_KEY", qkdlane.key_handle(sid))
                peer_handle = None
            else:
                seed = pa.ToeplitzSeed.decode(st.recv("PA_SEED"))
                if seed.n_in != n or seed.n_out != 8 * nbytes:
                    raise ProtocolAbort("protocol_violation", "PA seed dimensions disagree")
                peer_handle = st.recv("QKD_KEY")
            key = ctx["corrected"] if not self.is_sender else ctx["key"]
            ctx["new_key"] = _bits_to_bytes(pa.toeplitz_hash(key, seed))
            ctx["peer_handle"] = peer_handle

        try:
            for name, body in (("quantum-load", load), ("sift", sift), ("reconcile", reconcile), ("amplify", amplify)):
                self.log.add("qkd", "stage", f"session={sid} {name}")
                self.run_stage(LANE_QKD, name, body)
        except SessionAbort as exc:
            state.abort(exc.reason, exc.stage)
            raise
        handle = qkdlane.key_handle(sid)
        try:
            self.store.replenish(ctx["new_key"], handle, ctx["peer_handle"])
        except auth.AuthError:
            state.abort("auth_fail", "replenish")
            raise SessionAbort("auth_fail", "replenishment handle mismatch", "amplify") from None
        self.qkd_keys.append((handle, ctx["new_key"]))
        self.log.add("qkd", "replenish", f"session={sid} bytes={len(ctx['new_key'])} handle={handle.hex()}")
        return ctx["new_key"]

    def _reconcile(self, st: Stage, blocks, p_hat: float, positions: int, c: int, ctx: dict) -> tuple:
        """Shared Cascade driver loop; returns the disclosed parity counts per position."""
        rng = self.rng.child(f"casc{self.session_id}")
        if self.is_sender:
            seed = rng.bytes(32)
            st.send("CASC_SD", seed)
            alice = cascade.CascadeSender(blocks, p_hat, self.cascade_config, seed)
            while True:
                msgs = alice.next_messages()
                if msgs is None:
                    break
                for m in msgs:
                    st.send("CASC_PAR", m)
                alice.take_responses([st.recv("CASC_RES") for _ in range(positions)])
            point = rng.bytes(16)
            hashes = [cascade.block_hash(b, point) for b in alice.blocks]
            st.send("CASC_VFY", point + b"".join(hashes))
            if st.recv("CASC_ACK") != b"\x01":
                raise ProtocolAbort("protocol_violation", "malformed verification answer")
            ctx["rounds"] = alice.rounds
            ctx["slots"] = alice.leak_per_position
            ctx["mismatches"] = tuple(tuple(d.mismatches_per_pass) for d in alice.drivers)
            return alice.disclosed_per_position
        seed = st.recv("CASC_SD")
        if len(seed) != 32:
            raise ProtocolAbort("protocol_violation", "Cascade seed must be 32 bytes")
        bob = cascade.CascadeReceiver(blocks, c, p_hat, self.cascade_config, seed, rng.child("dummy"),
                                      dummy_rate=self.dummy_rate() if positions == 2 else None,
                                      positions=positions)
        while bob.pending():
            bob_out = bob.respond([st.recv("CASC_PAR") for _ in range(positions)])
            for m in bob_out:
                st.send("CASC_RES", m)
        vfy = st.recv("CASC_VFY")
        if len(vfy) != 16 * (positions + 1):
            raise ProtocolAbort("protocol_violation", "malformed verification message")
        point = vfy[:16]
        hashes = [vfy[16 * (i + 1):16 * (i + 2)] for i in range(positions)]
        if not cascade.verify_hashes(bob.key, c, hashes, point):
            raise ProtocolAbort("ir_fail", "verification hash mismatch")
        st.send("CASC_ACK", b"\x01")
        ctx["corrected"] = bob.key
        ctx["rounds"] = sum(d.rounds for d in bob.drivers[:1])
        ctx["slots"] = bob.leak_per_position
        return tuple(d.leak for d in bob.drivers)

    def ot_session(self, n_out: int, choice: int | None = None) -> dict:
        """One ROT instance.  Returns the released outputs; raises :class:`SessionAbort`."""
        sid = self._new_session()
        p = self.params
        n0 = p.n0
        counts = derived_counts(p)
        state = SessionState(self.log, f"ot session={sid}")
        rng = self.rng.child(f"ot{sid}")
        ctx: dict = {"timings": {}}

        def load(st: Stage):
            state.advance("quantum-load")
            cfg = p.to_config().encode()
            # As in the QKD lane: consume the block first, validate after.
            first = self.mux.next_event
            ctx["bases"], ctx["outcomes"], ctx["first"] = self.mux.route(LANE_OT, n0)
            if self.is_sender:
                st.send("PARAMS", cfg)
                st.send("RAW_REQ", _RAW_REQ.pack(LANE_OT, first, n0, n_out))
                peer = st.recv("PARAMS")
            else:
                peer = st.recv("PARAMS")
                req = _RAW_REQ.unpack(st.recv("RAW_REQ"))
                st.send("PARAMS", cfg)
                if peer == cfg and req != (LANE_OT, first, n0, n_out):
                    raise ProtocolAbort("protocol_violation", f"raw request {req} does not match local state")
            if peer != cfg:
                raise ProtocolAbort("params_mismatch", "parameter digests differ")

        def commit(st: Stage):
            state.advance("commit")
            theta, x = ctx["bases"], ctx["outcomes"]
            if self.is_sender:
                pub = cm.sample_public(rng.child("r1"))
                self.public_strings.append(pub.r1)
                st.send("PUBSTR", pub.r1)
                parts = [np.frombuffer(st.recv("COMMIT"), dtype=np.uint8) for _ in range(_chunks(n0))]
                blob = np.concatenate(parts)
                if blob.size != n0 * cm.STRING_BYTES:
                    raise ProtocolAbort("protocol_violation", "commitment stream has the wrong size")
                ctx["commitments"] = blob.reshape(n0, cm.STRING_BYTES)
                ctx["pub"] = pub
                self.log.add("commit", "commitments_in", f"session={sid} n={n0}")
            else:
                pub = cm.PublicString(st.recv("PUBSTR"))
                xs = np.frombuffer(rng.child("open").bytes(cm.SEED_BYTES * n0), dtype=np.uint8).reshape(n0, cm.SEED_BYTES)
                records = cm.commit_batch(pub, xs, theta, x)
                for a in range(0, n0, RECORD_CHUNK):
                    st.send("COMMIT", records[a:a + RECORD_CHUNK].tobytes())
                ctx["xs"] = xs
                self.log.add("commit", "commitments_out", f"session={sid} n={n0}")

        def open_(st: Stage):
            state.advance("open")
            theta, x = ctx["bases"], ctx["outcomes"]
            if self.is_sender:
                i_t = otcore.choose_test_set(rng.child("test"), n0, p)
                st.send("TESTSET", otcore.encode_index_set(i_t))
                self.log.add("open", "testset_out", f"session={sid} n={len(i_t)}")
                blob = b"".join(st.recv("OPEN") for _ in range(_chunks(len(i_t))))
                xs, b1, b2 = cm.decode_openings(blob)
                if len(xs) != len(i_t):
                    raise ProtocolAbort("protocol_violation", "opening count differs from the test set")
                self.log.add("open", "openings_in", f"session={sid}")
                state.advance("estimate")
                est = otcore.estimate(otcore.TestSelection(i_t, (xs, b1, b2)), theta, x, ctx["pub"],
                                      ctx["commitments"], p)
                ctx["p_hat"] = est.p_hat
                if not est.ok:
                    raise ProtocolAbort(est.reason, f"p_hat={est.p_hat:.5f} |I_s|={len(est.i_s)}")
                st.send("VERDICT", _VERDICT.pack(est.errors, len(est.i_s)))
                ctx["p_hat"] = est.p_hat
            else:
                payload = st.recv("TESTSET")
                i_t, end = otcore.decode_index_set(payload)
                if end != len(payload) or len(i_t) != counts.n_test or (len(i_t) and i_t[-1] >= n0):
                    raise ProtocolAbort("protocol_violation", "test set has the wrong size or range")
                self.log.add("open", "testset_in", f"session={sid} n={len(i_t)}")
                records = cm.encode_openings(ctx["xs"][i_t], theta[i_t], x[i_t])
                step = RECORD_CHUNK * cm.OPENING_BYTES
                for a in range(0, len(records), step):
                    st.send("OPEN", records[a:a + step])
                self.log.add("open", "openings_out", f"session={sid}")
                state.advance("estimate")
                errors, n_s = _VERDICT.unpack(st.recv("VERDICT"))
                if n_s == 0 or n_s < counts.n_check or n_s > len(i_t) or errors > n_s or errors / n_s > p.p_max:
                    raise ProtocolAbort("protocol_violation", "verdict inconsistent with the parameters")
                ctx["p_hat"] = errors / n_s
                self.qber_window.append((errors, n_s))
            ctx["i_t"] = i_t

        def separate(st: Stage):
            state.advance("separate")
            theta, x = ctx["bases"], ctx["outcomes"]
            rest = otcore.complement(n0, ctx["i_t"])
            n_raw = counts.n_raw
            if self.is_sender:
                st.send("BASES", otcore.encode_bits(theta[rest]))
                self.log.add("separate", "bases_out", f"session={sid}")
                payload = st.recv("SPLIT")
                first, off = otcore.decode_index_set(payload)
                second, end = otcore.decode_index_set(payload, off)
                if end != len(payload) or len(first) != n_raw or len(second) != n_raw:
                    raise ProtocolAbort("protocol_violation", "index sets have the wrong size")
                if not (np.isin(first, rest).all() and np.isin(second, rest).all()) or np.intersect1d(first, second).size:
                    raise ProtocolAbort("protocol_violation", "index sets overlap or touch tested events")
                self.log.add("separate", "split_in", f"session={sid}")
                ctx["blocks"] = otcore.extract_sender(x, (first, second))
            else:
                theta_a, end = otcore.decode_bits(st.recv("BASES"))
                if len(theta_a) != len(rest):
                    raise ProtocolAbort("protocol_violation", "basis announcement has the wrong length")
                self.log.add("separate", "bases_in", f"session={sid}")
                split = otcore.build_split(rest, theta_a, theta[rest], n_raw, rng.child("split"), c=choice)
                first, second = split.ordered_pair
                st.send("SPLIT", otcore.encode_index_set(first) + otcore.encode_index_set(second))
                self.log.add("separate", "split_out", f"session={sid}")
                ctx["key"], ctx["c"] = otcore.extract_receiver(x, split)
                if self.keep_diagnostics:
                    ctx["other_raw"] = otcore.extract_raw(x, split.i1)

        def reconcile(st: Stage):
            state.advance("reconcile")
            blocks = ctx["blocks"] if self.is_sender else ctx["key"]
            disclosed = self._reconcile(st, blocks, ctx["p_hat"], 2, ctx.get("c", 0), ctx)
            n_raw = counts.n_raw
            ctx["disclosed"] = disclosed
            ctx["f_bound"] = cascade.bound_efficiency(disclosed, n_raw, ctx["p_hat"], floor=1.0)
            if not self.is_sender:
                ctx["f_actual"] = cascade.measure_efficiency(disclosed[ctx["c"]], n_raw, ctx["p_hat"])

        def amplify(st: Stage):
            state.advance("amplify")
            n_raw = counts.n_raw
            bound = max_secure_length(n_raw, p, ctx["f_bound"])
            ctx["bound"] = bound
            if n_out > bound:
                raise ProtocolAbort("pa_bound", f"requested {n_out} bits, secure bound {bound}")
            if self.is_sender:
                seed = pa.random_seed(rng.child("pa"), n_raw, n_out)
                st.send("PA_SEED", seed.encode())
                ctx["out"] = pa.amplify(ctx["blocks"], seed, n_out, bound)
            else:
                seed = pa.ToeplitzSeed.decode(st.recv("PA_SEED"))
                if seed.n_in != n_raw:
                    raise ProtocolAbort("protocol_violation", "PA seed input length disagrees")
                ctx["out"] = pa.amplify([ctx["corrected"]], seed, n_out, bound)
                if self.keep_diagnostics:
                    ctx["other_guess"] = pa.toeplitz_hash(ctx["other_raw"], seed)

        stages = (("quantum-load", load), ("commit", commit), ("open", open_), ("separate", separate),
                  ("reconcile", reconcile), ("amplify", amplify))
        try:
            for name, body in stages:
                t0 = time.perf_counter()
                self.run_stage(LANE_OT, name, body)
                ctx["timings"][name] = time.perf_counter() - t0
        except SessionAbort as exc:
            state.abort(exc.reason, exc.stage)
            exc.ctx = ctx
            raise
        state.advance("done")
        ctx["session_id"] = sid
        return ctx

    def run_request(self, req: OtRequest) -> list[OtResult]:
        """Serve one client request; each OT is its own session and fails on its own."""
        rid = req.request_id if req.request_id is not None else self._next_rid()
        results = []
        for i in range(req.count):
            results.append(self._one_ot(rid, i, req))
        return results

    def _next_rid(self) -> int:
        self.next_request_id += 1
        return self.next_request_id

    def _one_ot(self, rid: int, index: int, req: OtRequest) -> OtResult:
        for _attempt in range(2):  # one retry; both sides take the same branch
            if not self.need_replenish() or self.store.remaining < QKD_TAG_COST:
                break
            try:
                self.qkd_session()
                break
            except SessionAbort as exc:
                self.log.add("qkd", "failed", f"{exc.reason} {exc.detail}")
        base = dict(request_id=rid, index=index, role=self.role, length=req.length)
        if self.store.remaining < OT_TAG_COST:
            self.log.add("aborted", "insufficient_material", f"request={rid} index={index}")
            return OtResult(session_id=0, status="aborted", reason="insufficient_material", **base)
        choice = None if req.choices is None else req.choices[index]
        t0 = time.perf_counter()
        try:
            ctx = self.ot_session(req.length, choice)
        except SessionAbort as exc:
            ctx = getattr(exc, "ctx", {})
            return OtResult(session_id=self.session_id, status="aborted", reason=exc.reason, detail=exc.detail,
                            p_hat=ctx.get("p_hat"), f_bound=ctx.get("f_bound"), secure_bound=ctx.get("bound"),
                            timings=ctx.get("timings", {}), **base)
        timings = dict(ctx["timings"], total=time.perf_counter() - t0)
        stats = {"rounds": ctx.get("rounds"), "slots": ctx.get("slots"), "disclosed": ctx.get("disclosed"),
                 "first_event": ctx.get("first"), "mismatches": ctx.get("mismatches")}
        if "other_guess" in ctx:
            stats["other_guess"] = _bits_to_bytes(ctx["other_guess"])
        common = dict(session_id=ctx["session_id"], status="ok", p_hat=ctx["p_hat"], f_bound=ctx["f_bound"],
                      secure_bound=ctx["bound"], timings=timings, stats=stats, **base)
        if self.is_sender:
            m0, m1 = (_bits_to_bytes(m) for m in ctx["out"])
            return OtResult(m0=m0, m1=m1, **common)
        return OtResult(mc=_bits_to_bytes(ctx["out"][0]), c=ctx["c"], f_actual=ctx.get("f_actual"), **common)


def _chunks(n_records: int) -> int:
    return max(1, -(-n_records // RECORD_CHUNK))


# -- fault injection -----------------------------------------------------------

class TamperingTransport(Transport):
    """Flips one payload bit in the ``occurrence``-th outgoing frame of type ``target``."""

    def __init__(self, inner: Transport, target: str, occurrence: int = 1, bit: int = 0, lane: int | None = None):
        self.inner, self.target, self.occurrence, self.bit, self.lane = inner, target, occurrence, bit, lane
        self.timeout = inner.timeout
        self.seen = 0
        self.fired = False

    def send(self, frame: Frame) -> None:
        if frame.type == self.target and (self.lane is None or frame.lane == self.lane) and frame.payload:
            self.seen += 1
            if self.seen == self.occurrence:
                data = bytearray(frame.payload)
                pos = self.bit % (8 * len(data))
                data[pos // 8] ^= 0x80 >> (pos % 8)
                frame = Frame(frame.lane, frame.type, frame.session_id, bytes(data))
                self.fired = True
        self.inner.send(frame)

    def recv(self, timeout: float | None = None) -> Frame:
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.inner.close()


# -- in-process pair and client interface ---------------------------------------

def shared_secret(seed, nbytes: int = 4096) -> bytes:
    return Drbg(seed).child("bootstrap-secret").bytes(nbytes)


def make_pair(params: ProtocolParams, model: ChannelModel | None = None, seed=0, secret: bytes | None = None,
              transport_pair=None, block_events: int | None = None, cascade_config=None,
              sources=None, **party_kw) -> tuple[Party, Party]:
    """Sender and receiver wired over a loopback (or supplied) transport pair."""
    from .transport import loopback_pair
    model = model or ChannelModel()
    ta, tb = transport_pair or loopback_pair()
    secret = secret if secret is not None else shared_secret(seed)
    root = Drbg(seed)
    sim_seed = root.child("sim").seed
    block_events = block_events or params.n0
    if sources is None:
        sources = (SimulatedSource(model, SENDER, sim_seed, block_events),
                   SimulatedSource(model, RECEIVER, sim_seed, block_events))
    alice = Party(SENDER, ta, params, auth.SecretStore(bytearray(secret)), sources[0], root.child("alice"),
                  cascade_config, **party_kw)
    bob = Party(RECEIVER, tb, params, auth.SecretStore(bytearray(secret)), sources[1], root.child("bob"),
                cascade_config, **party_kw)
    return alice, bob


def run_pair(alice: Party, bob: Party, req_a: OtRequest, req_b: OtRequest) -> tuple[list[OtResult], list[OtResult]]:
    """Run matching requests on both parties, the receiver in a helper thread."""
    out: dict = {}

    def worker():
        try:
            out["b"] = bob.run_request(req_b)
        except BaseException as exc:  # surfaced in the caller
            out["err"] = exc

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    res_a = alice.run_request(req_a)
    th.join()
    if "err" in out:
        raise out["err"]
    return res_a, out["b"]


class PipelineService:
    """Client interface: requests are queued, served by a worker thread and polled by id."""

    def __init__(self, party: Party):
        self.party = party
        self._queue: queue.Queue = queue.Queue()
        self._results: dict[int, list[OtResult] | BaseException] = {}
        self._lock = threading.Lock()
        self._ids = 0
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> "PipelineService":
        self._thread.start()
        return self

    def request_ots(self, req: OtRequest) -> int:
        if self.party.is_sender and req.choices is not None:
            raise ValueError("sender requests carry no choice bits")
        with self._lock:
            self._ids += 1
            rid = self._ids
        req.request_id = rid
        self._queue.put(req)
        return rid

    def poll(self, request_id: int):
        """``None`` while pending, else the result list (or the exception that stopped the worker)."""
        with self._lock:
            return self._results.get(request_id)

    def wait(self, request_id: int, timeout: float = 600.0):
        t_end = time.time() + timeout
        while time.time() < t_end:
            r = self.poll(request_id)
            if r is not None:
                return r
            time.sleep(0.01)
        raise TimeoutError(f"request {request_id} still pending")

    def stop(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=5)

    def _run(self) -> None:
        while True:
            req = self._queue.get()
            if req is None:
                return
            try:
                res = self.party.run_request(req)
            except BaseException as exc:
                res = exc
            with self._lock:
                self._results[req.request_id] = res


# Local control protocol: "REQ count length [choices-hex]" -> "RES request_id status payload".

def format_result_payload(results: list[OtResult]) -> str:
    parts = []
    for r in results:
        if not r.ok:
            parts.append(f"abort:{r.reason}")
        elif r.mc is not None:
            parts.append(f"{r.c}:{r.mc.hex()}")
        else:
            parts.append(f"{r.m0.hex()}:{r.m1.hex()}")
    return ",".join(parts)


def parse_control_request(line: str) -> OtRequest:
    parts = line.split()
    if len(parts) not in (3, 4) or parts[0] != "REQ":
        raise ValueError("expected: REQ count length [choices-hex]")
    count, length = int(parts[1]), int(parts[2])
    choices = None
    if len(parts) == 4:
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(parts[3]), dtype=np.uint8))
        if len(bits) < count:
            raise ValueError("choices-hex holds fewer bits than count")
        choices = [int(b) for b in bits[:count]]
    return OtRequest(count, length, choices)


def handle_control_line(service: PipelineService, line: str, timeout: float = 600.0) -> str:
    try:
        req = parse_control_request(line)
        rid = service.request_ots(req)
    except ValueError as exc:
        return f"RES 0 error {exc}"
    res = service.wait(rid, timeout)
    if isinstance(res, BaseException):
        return f"RES {rid} error {res}"
    status = "ok" if all(r.ok for r in res) else "partial" if any(r.ok for r in res) else "aborted"
    return f"RES {rid} {status} {format_result_payload(res)}"


def serve_control(service: PipelineService, endpoint: str, max_requests: int | None = None) -> None:
    """Line protocol over a local TCP socket; one request per line."""
    import socketserver
    from .transport import parse_endpoint

    host, port = parse_endpoint(endpoint)
    served = [0]

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for raw in self.rfile:
                line = raw.decode().strip()
                if not line:
                    continue
                self.wfile.write((handle_control_line(service, line) + "\n").encode())
                served[0] += 1
                if max_requests is not None and served[0] >= max_requests:
                    return

    with socketserver.TCPServer((host, port), Handler) as srv:
        while max_requests is None or served[0] < max_requests:
            srv.handle_request()
