import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qotpipe import pipeline as pl
from qotpipe.params import ProtocolParams
from qotpipe.qsim import RECEIVER, SENDER, ChannelModel, RawEventBlock, generate_block, raw_filename, write_raw
from qotpipe.transport import loopback_pair


def bits(b: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(b, np.uint8))[:n]


def test_ot_outputs_consistent(small_params, quiet_channel):
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=11)
    before = alice.store.remaining
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(3, 32), pl.OtRequest(3, 32, [0, 1, 1]))
    for a, b in zip(ra, rb):
        assert a.ok and b.ok and a.session_id == b.session_id
        m = (a.m0, a.m1)
        assert b.mc == m[b.c]
        assert m[1 - b.c] != b.mc
        assert len(b.mc) == 4 and a.secure_bound >= 32
        assert a.f_bound == b.f_bound and b.f_actual is not None
        assert set(pl.OT_STAGES) <= set(a.timings)
    assert [b.c for b in rb] == [0, 1, 1]
    assert before - alice.store.remaining == 3 * pl.OT_TAG_COST
    assert alice.store.remaining == bob.store.remaining
    cons = alice.mux.conservation()
    assert cons["routed"] == {0: 3 * small_params.n0} and cons["in"] == cons["routed"][0] + cons["leftover"]
    assert any("amplify enter" in line for line in alice.log.lines())


def test_params_mismatch_aborts_both(small_params, quiet_channel):
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=1)
    bob.params = ProtocolParams(n0=small_params.n0, p_max=0.013, delta1=0.005, eps_total_target=1.0, n_out=32)
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 32), pl.OtRequest(1, 32, [1]))
    assert ra[0].reason == rb[0].reason == "params_mismatch"
    assert ra[0].m0 is None and rb[0].mc is None


def test_high_qber_aborts_at_estimation(small_params):
    alice, bob = pl.make_pair(small_params, ChannelModel.flat(0.04), seed=2)
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 32), pl.OtRequest(1, 32, [0]))
    assert ra[0].reason == rb[0].reason == "p_exceeded"
    assert ra[0].p_hat == pytest.approx(0.04, abs=0.01)


def test_pa_bound_abort(small_params, quiet_channel):
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=3)
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 20_000), pl.OtRequest(1, 20_000, [0]))
    assert ra[0].reason == rb[0].reason == "pa_bound"


def test_replenish_from_qkd_lane(small_params, quiet_channel):
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=4, secret=pl.shared_secret(4, 300))
    assert alice.need_replenish()
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 32), pl.OtRequest(1, 32, [1]))
    assert ra[0].ok and rb[0].ok
    assert alice.qkd_keys and alice.qkd_keys == bob.qkd_keys
    assert alice.store.replenish_log == bob.store.replenish_log
    assert alice.store.replenish_log[0][1] == pl.QKD_REQUEST_BYTES
    assert alice.store.remaining == 300 + pl.QKD_REQUEST_BYTES - pl.QKD_TAG_COST - pl.OT_TAG_COST
    lanes = alice.mux.conservation()["routed"]
    assert lanes[1] == pl.QKD_BLOCK_EVENTS and lanes[0] == small_params.n0


def test_exhausted_secret(small_params, quiet_channel):
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=5, secret=pl.shared_secret(5, 100))
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 32), pl.OtRequest(1, 32, [0]))
    assert ra[0].reason == rb[0].reason == "insufficient_material"


@pytest.mark.parametrize("frame,side", [("PUBSTR", "a"), ("COMMIT", "b"), ("SPLIT", "b"), ("PA_SEED", "a")])
def test_tampering_detected(small_params, quiet_channel, frame, side):
    ta, tb = loopback_pair()
    if side == "a":
        ta = pl.TamperingTransport(ta, frame, bit=13)
    else:
        tb = pl.TamperingTransport(tb, frame, bit=13)
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=6, transport_pair=(ta, tb))
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 32), pl.OtRequest(1, 32, [0]))
    assert (ta if side == "a" else tb).fired
    assert not ra[0].ok and not rb[0].ok
    assert ra[0].m0 is None and rb[0].mc is None
    # Local checks may trip first, but the tag comparison decides the reported reason.
    assert ra[0].reason == rb[0].reason == "auth_fail"


@pytest.mark.parametrize("side", ["a", "b"])
def test_last_tag_tamper_reaches_both(small_params, quiet_channel, side):
    # The final stage's tag: the side that verifies it must tell the other.
    n_tags = len(pl.OT_STAGES)
    ta, tb = loopback_pair()
    if side == "a":
        ta = pl.TamperingTransport(ta, "AUTH_TAG", occurrence=n_tags, lane=0)
    else:
        tb = pl.TamperingTransport(tb, "AUTH_TAG", occurrence=n_tags, lane=0)
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=6, transport_pair=(ta, tb))
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 32), pl.OtRequest(1, 32, [1]))
    assert (ta if side == "a" else tb).fired
    assert ra[0].reason == rb[0].reason == "auth_fail"
    assert ra[0].m0 is None and ra[0].m1 is None and rb[0].mc is None


@pytest.mark.parametrize("frame", ["PARAMS", "RAW_REQ"])
def test_session_after_failed_load_stays_in_step(small_params, quiet_channel, frame):
    ta, tb = loopback_pair()
    ta = pl.TamperingTransport(ta, frame, lane=0)
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=8, transport_pair=(ta, tb))
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(2, 32), pl.OtRequest(2, 32, [0, 1]))
    assert ra[0].reason == rb[0].reason == "auth_fail"
    assert ra[1].ok and rb[1].ok
    assert rb[1].mc == (ra[1].m0, ra[1].m1)[1]
    assert alice.mux.next_event == bob.mux.next_event


def test_session_state_machine():
    log = pl.StageLog()
    s = pl.SessionState(log, "t")
    for ph in pl.PHASES:
        s.advance(ph)
    s2 = pl.SessionState(log, "u")
    with pytest.raises(RuntimeError):
        s2.advance("commit")
    s2.advance("quantum-load")
    s2.abort("auth_fail", "commit")
    with pytest.raises(RuntimeError):
        s2.advance("commit")
    assert s2.reason == "auth_fail" and "aborted auth_fail" in log.lines()[-1]


@given(st.lists(st.integers(0, 5000), min_size=1, max_size=12), st.integers(1, 3000))
def test_resize_conserves_events(sizes, target):
    rng = np.random.default_rng(sum(sizes) + target)
    blocks = [RawEventBlock(SENDER, rng.integers(0, 2, n), rng.integers(0, 2, n)) for n in sizes]
    acc = pl.Resizer()
    runs = pl.resize(acc, blocks, target)
    total = sum(sizes)
    assert len(runs) == total // target and acc.buffered == total % target
    joined = np.concatenate([b.outcomes for b in blocks if len(b)]) if total else np.empty(0)
    for k, (bs, os_, first) in enumerate(runs):
        assert first == k * target and len(os_) == target
        assert np.array_equal(os_, joined[first:first + target])


def test_mux_routes_each_event_once():
    blocks = [generate_block(ChannelModel(), 700, seed=i, block_id=i)[0] for i in range(3)]
    mux = pl.Mux(pl.BlockSource(blocks))
    mux.route(0, 1000)
    mux.route(1, 500)
    assert mux.available(600) and not mux.available(601)
    with pytest.raises(pl.ProtocolAbort):
        mux.route(0, 700)
    c = mux.conservation()
    assert c == {"in": 2100, "routed": {0: 1000, 1: 500}, "leftover": 600}
    assert mux.routes == [(0, 0, 1000), (1, 1000, 1500)]


def test_file_source_order(tmp_path):
    for i in (2, 0, 1):
        a, b = generate_block(ChannelModel(), 50, seed=i, block_id=i)
        write_raw(tmp_path / raw_filename(i, SENDER), a)
        write_raw(tmp_path / raw_filename(i, RECEIVER), b)
    src = pl.FileSource(tmp_path, SENDER)
    ids = []
    while (blk := src.next_block()) is not None:
        ids.append(blk.block_id)
    assert ids == [0, 1, 2]


def test_control_protocol_parsing():
    r = pl.parse_control_request("REQ 3 64 a0")
    assert (r.count, r.length, r.choices) == (3, 64, [1, 0, 1])
    assert pl.parse_control_request("REQ 2 8").choices is None
    for bad in ("REQ 2", "GET 1 1", "REQ 9 8 ff", "REQ 0 8"):
        with pytest.raises(ValueError):
            pl.parse_control_request(bad)
    with pytest.raises(ValueError):
        pl.OtRequest(2, 8, [1])
    ok = pl.OtResult(1, 0, 1, SENDER, "ok", m0=b"\x01", m1=b"\x02")
    rc = pl.OtResult(1, 1, 2, RECEIVER, "ok", mc=b"\x02", c=1)
    bad = pl.OtResult(1, 2, 3, SENDER, "aborted", reason="auth_fail")
    assert pl.format_result_payload([ok, rc, bad]) == "01:02,1:02,abort:auth_fail"


def test_service_and_control_lines(small_params, quiet_channel):
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=8)
    sa, sb = pl.PipelineService(alice).start(), pl.PipelineService(bob).start()
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("b", pl.handle_control_line(sb, "REQ 2 16 40")))
    t.start()
    line_a = pl.handle_control_line(sa, "REQ 2 16")
    t.join(60)
    assert line_a.startswith("RES 1 ok ")
    assert out["b"].startswith("RES 1 ok ")
    pairs = [p.split(":") for p in line_a.split()[3].split(",")]
    recv = [p.split(":") for p in out["b"].split()[3].split(",")]
    for (m0, m1), (c, mc) in zip(pairs, recv):
        assert mc == (m0, m1)[int(c)]
    assert [c for c, _ in recv] == ["0", "1"]
    assert pl.handle_control_line(sa, "nonsense").startswith("RES 0 error")
    with pytest.raises(ValueError):
        sa.request_ots(pl.OtRequest(1, 8, [1]))
    assert sa.poll(99) is None
    sa.stop()
    sb.stop()


def test_failed_qkd_round_is_retried(small_params, quiet_channel):
    ta, tb = loopback_pair()
    ta = pl.TamperingTransport(ta, "QKD_BAS", lane=1)
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=9, transport_pair=(ta, tb),
                              secret=pl.shared_secret(9, 300))
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(1, 32), pl.OtRequest(1, 32, [0]))
    assert ta.fired and ra[0].ok and rb[0].ok
    assert any("qkd failed auth_fail" in ln for ln in bob.log.lines())
    # Only the retried round (session 2) refilled the pool.
    assert [h for h, _ in alice.store.replenish_log] == [pl.qkdlane.key_handle(2)]


def test_dummy_rate_pools_recent_verdicts(small_params, quiet_channel):
    alice, bob = pl.make_pair(small_params, quiet_channel, seed=12)
    assert bob.dummy_rate() == 0.0
    ra, rb = pl.run_pair(alice, bob, pl.OtRequest(2, 32), pl.OtRequest(2, 32, [1, 0]))
    assert all(r.ok for r in ra + rb)
    assert len(bob.qber_window) == 2 and not alice.qber_window
    e = sum(x for x, _ in bob.qber_window)
    n = sum(x for _, x in bob.qber_window)
    assert bob.dummy_rate() == e / n
    assert rb[1].p_hat == bob.qber_window[1][0] / bob.qber_window[1][1]
    bob.qber_window.extend([(0, 1)] * pl.QBER_WINDOW)
    assert len(bob.qber_window) == pl.QBER_WINDOW and bob.dummy_rate() == 0.0
