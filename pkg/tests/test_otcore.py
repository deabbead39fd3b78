import numpy as np
import pytest
from hypothesis import given, strategies as st

from qotpipe import commitment as cm
from qotpipe import otcore
from qotpipe.errors import ProtocolAbort
from qotpipe.params import ProtocolParams, derived_counts
from qotpipe.rng import Drbg

ascending = st.lists(st.integers(0, 2**32 - 1), unique=True, max_size=200).map(sorted)


@given(ascending)
def test_index_set_roundtrip(idx):
    data = otcore.encode_index_set(idx) + b"tail"
    back, end = otcore.decode_index_set(data)
    assert back.tolist() == idx and data[end:] == b"tail"


def test_index_set_rejects_bad_input():
    with pytest.raises(ValueError):
        otcore.encode_index_set([3, 3])
    with pytest.raises(ValueError):
        otcore.encode_index_set([5, 2])
    good = otcore.encode_index_set([1, 5, 9])
    with pytest.raises(ProtocolAbort):
        otcore.decode_index_set(good[:-1])
    with pytest.raises(ProtocolAbort):
        otcore.decode_index_set(b"\x00\x00")
    dup = b"\x00\x00\x00\x02" + b"\x00\x00\x00\x04" + b"\x00\x00\x00\x00"
    with pytest.raises(ProtocolAbort):
        otcore.decode_index_set(dup)


@given(st.lists(st.integers(0, 1), max_size=300))
def test_bits_roundtrip(bits):
    back, end = otcore.decode_bits(otcore.encode_bits(bits))
    assert back.tolist() == bits and end == 4 + (len(bits) + 7) // 8


def test_test_set_size_and_complement(desk_params):
    n0 = desk_params.n0
    t = otcore.choose_test_set(Drbg(1), n0, desk_params)
    assert len(t) == derived_counts(desk_params).n_test == 112_000
    rest = otcore.complement(n0, t)
    assert len(rest) + len(t) == n0
    assert not np.intersect1d(rest, t).size
    with pytest.raises(ValueError):
        otcore.choose_test_set(Drbg(1), 2, desk_params)


def make_estimation(n0, p, flip, params, seed=0, anti=False):
    rng = Drbg(seed)
    pub = cm.sample_public(rng)
    theta_a, theta_b = rng.bits(n0), rng.bits(n0)
    if anti:
        theta_b = 1 - theta_a
    x_a = rng.bits(n0)
    same = theta_a == theta_b
    x_b = np.where(same, x_a ^ rng.bernoulli(p, n0), rng.bits(n0))
    xs = np.frombuffer(rng.bytes(32 * n0), np.uint8).reshape(n0, 32)
    coms = cm.commit_batch(pub, xs, theta_b, x_b)
    i_t = otcore.choose_test_set(rng, n0, params)
    b2 = x_b[i_t].copy()
    if flip:
        b2[0] ^= 1
    sel = otcore.TestSelection(i_t, (xs[i_t], theta_b[i_t], b2))
    return otcore.estimate(sel, theta_a, x_a, pub, np.asarray(coms), params, n0)


def test_estimate_continue_and_qber(small_params):
    res = make_estimation(small_params.n0, 0.008, False, small_params)
    assert res.ok
    assert len(res.i_s) >= derived_counts(small_params).n_check
    assert res.p_hat == pytest.approx(0.008, abs=0.003)


def test_estimate_verdicts(small_params):
    assert make_estimation(small_params.n0, 0.05, False, small_params).reason == "p_exceeded"
    with pytest.raises(ProtocolAbort) as e:
        make_estimation(small_params.n0, 0.008, True, small_params)
    assert e.value.reason == "commitment"
    # No test event shares the sender's basis.
    res = make_estimation(small_params.n0, 0.0, False, small_params, anti=True)
    assert (res.verdict, res.reason, len(res.i_s)) == ("abort", "check_size", 0)


def test_build_split_pools():
    rng = Drbg(3)
    rest = np.arange(0, 4000, 2)
    ta, tb = rng.bits(2000), rng.bits(2000)
    sp = otcore.build_split(rest, ta, tb, 500, rng, c=1)
    same = set(rest[ta == tb].tolist())
    assert set(sp.i0.tolist()) <= same
    assert not set(sp.i1.tolist()) & same
    assert len(sp.i0) == len(sp.i1) == 500
    assert sp.ordered_pair == (sp.i1, sp.i0)
    with pytest.raises(ProtocolAbort) as e:
        otcore.build_split(rest, ta, tb, 1500, rng)
    assert e.value.reason == "insufficient_raw"
    with pytest.raises(ProtocolAbort):
        otcore.build_split(rest, ta[:-1], tb, 10, rng)


def test_extraction_uses_sorted_order():
    x = np.array([0, 1, 1, 0, 1], np.uint8)
    assert otcore.extract_raw(x, [4, 1, 0]).tolist() == [0, 1, 1]
    with pytest.raises(ProtocolAbort):
        otcore.extract_raw(x, [5])
    sp = otcore.IndexSplit(np.array([1, 2]), np.array([0, 3]), 0)
    assert [b.tolist() for b in otcore.extract_sender(x, sp.ordered_pair)] == [[1, 1], [0, 0]]
    kb, c = otcore.extract_receiver(x, sp)
    assert kb.tolist() == [1, 1] and c == 0
