import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinykws.features import (FeatureParams, InvalidInputError, InvalidParamsError,
                              LengthMismatchError, WavFormatError, dct_matrix, extract_mfcc,
                              frame_count, mel_filterbank, read_wav, smooth_posteriors, write_wav)

from . import oracles


@pytest.mark.parametrize("args, expected", [((1000, 40, 20), 49), ((1000, 40, 40), 25),
                                            ((40, 40, 20), 1), ((1000, 30, 20), 49)])
def test_frame_count(args, expected):
    assert frame_count(*args) == expected


@pytest.mark.parametrize("args", [(1000, 1040, 20), (1000, 40, 0)])
def test_frame_count_rejects(args):
    with pytest.raises(InvalidParamsError):
        frame_count(*args)


@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(1, 200), st.integers(1, 200))
def test_frame_count_monotone(L, l, s1, s2):
    if l > L:
        return
    lo, hi = sorted((s1, s2))
    assert frame_count(L, l, hi) <= frame_count(L, l, lo)
    assert frame_count(L + 10, l, lo) >= frame_count(L, l, lo)


def test_default_shape_is_49_by_40():
    feats = extract_mfcc(np.zeros(16000))
    assert feats.shape == (49, 40)
    assert feats.size == 1960


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([500, 1000]), st.sampled_from([20, 30, 40]), st.integers(10, 40),
       st.integers(1, 40))
def test_shape_matches_frame_count(L, l, s, F):
    p = FeatureParams(clip_len_ms=L, frame_len_ms=l, frame_stride_ms=s, num_mfcc=F)
    rng = np.random.default_rng(L + l + s + F)
    feats = extract_mfcc(rng.uniform(-1, 1, p.clip_samples), p)
    assert feats.shape == (frame_count(L, l, s), F)
    assert np.all(np.isfinite(feats))


def test_silence_is_dct_of_constant_floor():
    feats = extract_mfcc(np.zeros(16000))
    col0 = np.log(1e-6) * np.sqrt(40)
    np.testing.assert_allclose(feats[:, 0], col0, rtol=1e-12)
    assert np.max(np.abs(feats[:, 1:])) < 1e-9


def test_tone_matches_direct_dft_oracle():
    sr = 16000
    t = np.arange(sr) / sr
    tone = 0.5 * np.sin(2 * np.pi * 1000 * t)
    got = extract_mfcc(tone)
    frames = [0, 17, 48]
    want = oracles.mfcc_oracle(list(tone), frames=frames)
    assert np.max(np.abs(got[frames] - want)) < 1e-6


def test_tone_energy_in_1khz_band():
    p = FeatureParams()
    tone = np.sin(2 * np.pi * 1000 * np.arange(16000) / 16000)
    fb = mel_filterbank(40, p.n_fft, 16000, 20.0, 8000.0)
    spec = np.abs(np.fft.rfft(tone[:640] * np.hanning(641)[:640], n=p.n_fft))
    energies = fb @ spec
    peak = int(np.argmax(energies))
    freqs = np.arange(p.n_fft // 2 + 1) * 16000 / p.n_fft
    support = freqs[fb[peak] > 0]
    assert support.min() <= 1000 <= support.max()


def test_dct_orthonormal():
    for n in (1, 10, 40, 64):
        m = dct_matrix(n)
        np.testing.assert_allclose(m @ m.T, np.eye(n), atol=1e-10)
    v = np.random.default_rng(0).normal(size=12)
    np.testing.assert_allclose(dct_matrix(12) @ v, oracles.dct2_ortho(list(v)), atol=1e-12)


def test_filterbank_matches_oracle_and_partitions():
    fb = mel_filterbank(40, 1024, 16000, 20.0, 8000.0)
    np.testing.assert_allclose(fb, oracles.htk_filterbank(40, 1024, 16000, 20.0, 8000.0), atol=1e-12)
    assert fb.min() >= 0
    assert fb.sum(axis=0).max() <= 1 + 1e-6
    assert fb.max(axis=1).min() > 0  # no empty filters


def test_extract_errors():
    with pytest.raises(LengthMismatchError):
        extract_mfcc(np.zeros(15999))
    bad = np.zeros(16000)
    bad[3] = np.nan
    with pytest.raises(InvalidInputError):
        extract_mfcc(bad)
    with pytest.raises(InvalidInputError):
        extract_mfcc(np.zeros((2, 16000)))


@pytest.mark.parametrize("kw", [dict(frame_len_ms=2000), dict(num_mfcc=41), dict(fmin_hz=9000),
                                dict(fmax_hz=9000), dict(frame_stride_ms=0), dict(log_floor=0)])
def test_param_validation(kw):
    with pytest.raises(InvalidParamsError):
        FeatureParams(**kw)


def test_params_from_config(tmp_path):
    cfg = tmp_path / "f.cfg"
    cfg.write_text("# frontend\nnum_mfcc = 10\nframe_stride_ms=40\nfmax_hz = none\n", encoding="utf-8")
    p = FeatureParams.from_config(cfg)
    assert (p.num_mfcc, p.frame_stride_ms, p.num_frames, p.upper_hz) == (10, 40, 25, 8000.0)
    assert FeatureParams.from_config(cfg, frame_stride_ms=20).num_frames == 49
    cfg.write_text("bogus = 1\n", encoding="utf-8")
    with pytest.raises(InvalidParamsError):
        FeatureParams.from_config(cfg)


def test_smoothing():
    rng = np.random.default_rng(3)
    v = rng.dirichlet(np.ones(12))
    np.testing.assert_array_equal(smooth_posteriors([v]), v)
    a, b = np.eye(12)[2], np.eye(12)[5]
    out = smooth_posteriors([a, b])
    assert out[2] == out[5] == 0.5 and out.sum() == 1.0
    window = rng.dirichlet(np.ones(12), size=10)
    direct = [sum(window[i][k] for i in range(10)) / 10 for k in range(12)]
    np.testing.assert_allclose(smooth_posteriors(window), direct, atol=1e-12)
    assert abs(smooth_posteriors(window).sum() - 1) < 1e-6
    with pytest.raises(InvalidInputError):
        smooth_posteriors([])


def test_wav_roundtrip_and_format_errors(tmp_path):
    import wave
    sig = np.random.default_rng(0).uniform(-0.9, 0.9, 16000)
    write_wav(tmp_path / "a.wav", sig)
    back = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back - sig)) <= 1 / 32768
    with wave.open(str(tmp_path / "b.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(b"\0\0" * 10)
    with pytest.raises(WavFormatError, match="16000 Hz"):
        read_wav(tmp_path / "b.wav")
    (tmp_path / "c.wav").write_bytes(b"not a wav file")
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "c.wav")
