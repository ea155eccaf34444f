import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from mgf import dsp
from mgf.dsp import Waveform
from mgf.errors import ValidationError


def test_frame_count_two_seconds():
    grid = dsp.frame_signal(np.zeros(32000), 400, 160)
    assert grid.n_frames == (32000 - 400) // 160 + 1 == 198


def test_single_frame_boundary_and_too_short():
    assert dsp.frame_signal(np.ones(400), 400, 160).n_frames == 1
    with pytest.raises(ValidationError, match="input too short"):
        dsp.frame_signal(np.ones(399), 400, 160)


def test_frame_rows_are_windowed_slices(rng):
    x = rng.normal(size=1000)
    grid = dsp.frame_signal(x, 400, 160)
    w = dsp.hann(400)
    for i in range(grid.n_frames):
        np.testing.assert_array_equal(grid.frames[i], x[160 * i : 160 * i + 400] * w)


def test_framing_is_deterministic(rng):
    x = rng.normal(size=5000)
    a, b = dsp.frame_signal(x, 400), dsp.frame_signal(x.copy(), 400)
    assert a.frames.tobytes() == b.frames.tobytes()


def test_silence_hits_the_log_floor():
    lps = dsp.log_power_spectrum(dsp.FrameGrid(np.zeros((1, 400)), 160, 400), 512)
    np.testing.assert_array_equal(lps.values, math.log(dsp.EPS_LOG))


def test_impulse_has_flat_spectrum():
    frame = np.zeros((1, 400))
    frame[0, 0] = 1.0
    lps = dsp.log_power_spectrum(dsp.FrameGrid(frame, 160, 400), 512)
    assert lps.values.shape == (1, 257)
    np.testing.assert_allclose(lps.values, math.log(1 + dsp.EPS_LOG), rtol=0, atol=1e-15)


def test_sine_peak_bin_matches_direct_dft():
    t = np.arange(400) / 16000
    frame = np.sin(2 * np.pi * 440 * t) * dsp.hann(400)
    direct = oracles.dft_power(list(frame), 512)
    assert int(np.argmax(direct)) == round(440 * 512 / 16000) == 14
    lps = dsp.log_power_spectrum(dsp.FrameGrid(frame[None], 160, 400), 512)
    assert int(np.argmax(lps.values[0])) == 14


def test_fft_too_small():
    with pytest.raises(ValidationError, match="fft too small"):
        dsp.power_spectrum(dsp.FrameGrid(np.zeros((1, 400)), 160, 400), 256)


def test_fft_path_matches_loop_dft_on_a_few_frames(rng):
    frames = rng.normal(size=(3, 64))
    fast = dsp.power_spectrum(dsp.FrameGrid(frames, 16, 64), 128)
    for i in range(3):
        np.testing.assert_allclose(fast[i], oracles.dft_power(list(frames[i]), 128), rtol=1e-9, atol=1e-9)


def test_mel_filterbank_shape_and_rows():
    fb = dsp.mel_filterbank(40, 512, 16000)
    assert fb.shape == (40, 257)
    assert (fb >= 0).all() and (fb.sum(axis=1) > 0).all()
    for row in fb:
        nz = np.flatnonzero(row)
        peak = int(np.argmax(row))
        # unimodal: nondecreasing up to the peak, nonincreasing after
        assert (np.diff(row[nz[0] : peak + 1]) >= 0).all()
        assert (np.diff(row[peak : nz[-1] + 1]) <= 0).all()
    for i in range(39):
        assert np.intersect1d(np.flatnonzero(fb[i]), np.flatnonzero(fb[i + 1])).size > 0


def test_mel_centres_increase_and_follow_closed_form():
    centres = dsp.mel_filter_centers(40)
    assert (np.diff(centres) > 0).all()
    mels = [oracles.hz_to_mel(c) for c in centres]
    steps = np.diff(mels)
    np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
    assert oracles.hz_to_mel(8000.0) == pytest.approx(float(dsp.hz_to_mel(8000.0)), rel=1e-12)


def test_dct_of_constant():
    c = 2.5
    out = dsp.dct_ortho(np.full(40, c))
    assert out[0] == pytest.approx(c * math.sqrt(40), rel=1e-12)
    np.testing.assert_allclose(out[1:], 0.0, atol=1e-12)


def test_dct_orthonormal():
    d = dsp.dct_matrix(40)
    np.testing.assert_allclose(d @ d.T, np.eye(40), atol=1e-10)


def test_dct_matches_naive_sum(rng):
    x = rng.normal(size=40)
    np.testing.assert_allclose(dsp.dct_ortho(x), oracles.dct2_ortho(list(x)), rtol=0, atol=1e-9)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40))
def test_dct_preserves_norm(values):
    x = np.array(values)
    assert np.linalg.norm(dsp.dct_ortho(x)) == pytest.approx(np.linalg.norm(x), rel=1e-9, abs=1e-9)


def test_mfcc_shape_and_kind():
    grid = dsp.frame_signal(np.random.default_rng(0).normal(size=4000), 400)
    m = dsp.mfcc(grid)
    assert m.values.shape == (grid.n_frames, 13)
    assert m.feature_kind is dsp.FeatureKind.MFCC and m.context_window_ms == 25
    with pytest.raises(ValidationError):
        dsp.mfcc(grid, n_mels=10, n_ceps=13)


@pytest.mark.parametrize("kind", dsp.FEATURE_KINDS)
def test_frame_features_on_the_encoder_grid(kind, rng):
    feats = dsp.frame_features(rng.normal(size=32000) * 0.1, kind)
    assert feats.shape == (200, dsp.feature_dim(kind))
    assert np.isfinite(feats).all()


def test_si_sdr_hand_case_is_exactly_zero():
    assert dsp.si_sdr(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == 0.0


def test_si_sdr_clamps_and_scale_invariance(rng):
    x = rng.normal(size=100)
    assert dsp.si_sdr(x, x) == 100.0
    assert dsp.si_sdr(x, 0.5 * x) == 100.0
    with pytest.raises(ValidationError, match="length mismatch"):
        dsp.si_sdr(x, x[:-1])
    with pytest.raises(ValidationError, match="degenerate reference"):
        dsp.si_sdr(np.zeros(4), np.ones(4))


@given(st.integers(0, 10_000), st.floats(-50, 50).filter(lambda b: abs(b) > 1e-3))
def test_si_sdr_scale_invariance_property(seed, beta):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=64), r.normal(size=64)
    assert abs(dsp.si_sdr(x, beta * y) - dsp.si_sdr(x, y)) < 1e-6


@given(st.integers(0, 10_000))
def test_si_sdr_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=32)
    y = x + r.normal(size=32) * r.uniform(0.01, 3)
    assert dsp.si_sdr(x, y) == pytest.approx(oracles.si_sdr(list(x), list(y)), abs=1e-9)


def test_waveform_validation():
    with pytest.raises(ValidationError):
        Waveform(np.array([]))
    with pytest.raises(ValidationError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValidationError):
        Waveform(np.zeros(3), sample_rate=0)
    w = Waveform([0.1, 0.2])
    assert len(w) == 2 and not w.samples.flags.writeable
