import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import binomtest

from qotpipe import qsim
from qotpipe.qsim import (
    MAX_LOSS_DB,
    RECEIVER,
    SENDER,
    ChannelModel,
    RawEventBlock,
    RawFormatError,
    channel_at,
    decode_raw,
    encode_raw,
    generate_block,
    qber_from_visibility,
    read_raw,
    write_raw,
)


def test_qber_from_visibility():
    assert qber_from_visibility(1.0) == 0.0
    assert qber_from_visibility(0.0) == 0.5
    assert qber_from_visibility(0.97) == pytest.approx(0.015)
    with pytest.raises(ValueError):
        qber_from_visibility(1.2)


def test_back_to_back_channel():
    rate, hv, da = channel_at(ChannelModel(), 0.0)
    assert rate == pytest.approx(28_300.0)
    assert (hv + da) / 2 == pytest.approx(0.0085, abs=1e-9)
    assert hv < da


def test_calibrated_boundary_at_max_loss():
    model = ChannelModel()
    _, hv, da = channel_at(model, MAX_LOSS_DB)
    assert (hv + da) / 2 == pytest.approx(0.014, abs=1e-9)


@given(st.floats(0, 20), st.floats(0, 20))
def test_qber_monotone_in_loss(l1, l2):
    lo, hi = sorted((l1, l2))
    m = ChannelModel()
    r_lo, *q_lo = channel_at(m, lo)
    r_hi, *q_hi = channel_at(m, hi)
    assert r_hi <= r_lo + 1e-9
    assert sum(q_hi) >= sum(q_lo) - 1e-12


def test_flat_model_has_no_accidentals():
    m = ChannelModel.flat(0.02)
    assert m.accidental_floor == 0.0
    assert channel_at(m, 5.0)[1:] == pytest.approx((0.02, 0.02))


def test_model_validation():
    with pytest.raises(ValueError):
        ChannelModel(loss_db=-1)
    with pytest.raises(ValueError):
        ChannelModel(qber_hv_0=0.7)
    with pytest.raises(ValueError):
        channel_at(ChannelModel(), -0.5)


def test_generated_block_statistics():
    a, b = generate_block(ChannelModel.flat(0.03), 200_000, seed=11)
    assert len(a) == len(b) == 200_000
    same = a.bases == b.bases
    # Bases independent and uniform.
    assert binomtest(int(same.sum()), len(same), 0.5).pvalue > 1e-4
    errs = int(np.count_nonzero(a.outcomes[same] != b.outcomes[same]))
    assert binomtest(errs, int(same.sum()), 0.03).pvalue > 1e-4
    # Mismatched bases: uncorrelated outcomes.
    diff = int(np.count_nonzero(a.outcomes[~same] != b.outcomes[~same]))
    assert binomtest(diff, int((~same).sum()), 0.5).pvalue > 1e-4


def test_generation_is_deterministic():
    m = ChannelModel()
    a1, b1 = generate_block(m, 1000, seed=5)
    a2, b2 = generate_block(m, 1000, seed=5)
    a3, _ = generate_block(m, 1000, seed=6)
    assert a1 == a2 and b1 == b2
    assert a1 != a3
    with pytest.raises(ValueError):
        generate_block(m, 0, seed=1)


@given(st.integers(1, 3000), st.integers(0, 2**32 - 1), st.sampled_from([SENDER, RECEIVER]))
def test_raw_roundtrip(n, seed, party):
    rng = np.random.default_rng(seed)
    blk = RawEventBlock(party, rng.integers(0, 2, n), rng.integers(0, 2, n))
    back = decode_raw(encode_raw(blk))
    assert back == blk


def test_raw_file_names_and_errors(tmp_path):
    a, b = generate_block(ChannelModel(), 100, seed=2, block_id=4)
    pa = tmp_path / qsim.raw_filename(4, SENDER)
    write_raw(pa, a)
    assert read_raw(pa) == a
    good = encode_raw(a)
    with pytest.raises(RawFormatError, match="magic"):
        decode_raw(b"XXXXXXXX" + good[8:])
    with pytest.raises(RawFormatError, match="truncated"):
        decode_raw(good[:-1])
    with pytest.raises(RawFormatError, match="trailing"):
        decode_raw(good + b"\x00")
    with pytest.raises(RawFormatError):
        decode_raw(good[:5])
    # A receiver record under a sender file name is refused.
    wrong = tmp_path / qsim.raw_filename(4, SENDER)
    wrong.write_bytes(encode_raw(b))
    with pytest.raises(RawFormatError, match="file name"):
        read_raw(wrong)
    with pytest.raises(RawFormatError):
        encode_raw(RawEventBlock(SENDER, [], []))


def test_block_slice_keeps_offsets():
    a, _ = generate_block(ChannelModel(), 100, seed=3)
    s = a.slice(10, 30)
    assert len(s) == 20 and s.event_offset == 10
    assert np.array_equal(s.bases, a.bases[10:30])
