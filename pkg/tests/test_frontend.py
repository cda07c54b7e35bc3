import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2d.errors import ConfigError, DataError, DimensionError, DomainError, InputTooShortError, InvalidInputError
from m2d.frontend import (LOG_FLOOR, STATS_PRESETS, DatasetStats, MelConfig, Spectrogram, compute_logmel,
                          estimate_stats, fit_frames, mel_filterbank, mix_noisy, read_wav, resolve_stats,
                          standardize, unstandardize, write_wav)


def oracle_mel_centers(n_mels, fmin, fmax):
    # HTK mel scale evaluated point by point
    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    lo, hi = to_mel(fmin), to_mel(fmax)
    step = (hi - lo) / (n_mels + 1)
    return [to_hz(lo + (k + 1) * step) for k in range(n_mels)]


def test_default_config_values():
    cfg = MelConfig()
    assert (cfg.sample_rate_hz, cfg.window_ms, cfg.hop_ms, cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz) == \
        (16000, 25.0, 10.0, 80, 50.0, 8000.0)
    assert cfg.win_length == 400 and cfg.hop_length == 160


@pytest.mark.parametrize("kwargs", [
    {"sample_rate_hz": 0}, {"fmin_hz": 0.0}, {"fmax_hz": 9000.0}, {"fmin_hz": 900.0, "fmax_hz": 800.0},
    {"n_mels": 0}, {"hop_ms": 30.0},
])
def test_mel_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigError):
        MelConfig(**kwargs)


def test_608_frames_for_6_08_s():
    x = np.random.default_rng(0).standard_normal(97280) * 0.1
    assert compute_logmel(x).shape == (80, 608)


def test_6_s_gives_ceil_samples_over_hop():
    x = np.zeros(96000)
    assert compute_logmel(x).shape == (80, 600)
    assert fit_frames(compute_logmel(x).data, 608).shape == (80, 608)


def test_silence_is_constant_log_floor():
    spec = compute_logmel(np.zeros(16000)).data
    assert np.all(spec == math.log(LOG_FLOOR))


def test_sine_peak_matches_oracle_bin():
    cfg = MelConfig()
    t = np.arange(16000) / 16000
    spec = compute_logmel(np.sin(2 * np.pi * 1000.0 * t), cfg).data
    centers = oracle_mel_centers(cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz)
    nearest = min(range(cfg.n_mels), key=lambda k: abs(centers[k] - 1000.0))
    assert int(np.argmax(spec.mean(axis=1))) == nearest


def test_filterbank_peaks_at_oracle_centers():
    cfg = MelConfig()
    fb = mel_filterbank(cfg)
    freqs = np.fft.rfftfreq(cfg.n_fft, 1 / cfg.sample_rate_hz)
    centers = oracle_mel_centers(cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz)
    spacing = freqs[1]
    for k in range(cfg.n_mels):
        assert abs(freqs[np.argmax(fb[k])] - centers[k]) <= spacing


def test_logmel_deterministic():
    x = np.random.default_rng(3).standard_normal(8000)
    assert np.array_equal(compute_logmel(x).data, compute_logmel(x.copy()).data)


def test_logmel_errors():
    with pytest.raises(InputTooShortError):
        compute_logmel(np.zeros(399))
    with pytest.raises(InvalidInputError):
        compute_logmel(np.array([0.0] * 500 + [np.nan]))
    with pytest.raises(InvalidInputError):
        compute_logmel(np.zeros((2, 800)))


def test_spectrogram_invariants():
    with pytest.raises(DimensionError):
        Spectrogram(np.zeros((40, 10)))
    with pytest.raises(InvalidInputError):
        Spectrogram(np.full((80, 3), np.inf))


def test_standardize_examples():
    stats = STATS_PRESETS["audioset"]
    assert (stats.mean, stats.std) == (-7.1, 4.2)
    cfg = MelConfig(n_mels=1)
    out = standardize(Spectrogram(np.full((1, 4), -7.1), cfg), stats).data
    assert np.all(out == 0.0)
    out = standardize(Spectrogram(np.array([[-7.1, -2.9]]), cfg), stats).data
    np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-12)
    x = np.random.default_rng(0).standard_normal((1, 5))
    assert np.array_equal(standardize(Spectrogram(x, cfg), DatasetStats(0.0, 1.0)).data, x)


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 20), st.integers(0, 2**32 - 1))
def test_standardize_roundtrip(mean, std, seed):
    cfg = MelConfig(n_mels=3)
    x = np.random.default_rng(seed).uniform(-30, 5, (3, 7))
    stats = DatasetStats(mean, std)
    back = unstandardize(standardize(Spectrogram(x, cfg), stats), stats).data
    np.testing.assert_allclose(back, x, rtol=1e-6, atol=1e-9)


def test_stats_resolution():
    assert resolve_stats("audioset") == DatasetStats(-7.1, 4.2)
    assert resolve_stats({"mean": 1, "std": 2}) == DatasetStats(1.0, 2.0)
    with pytest.raises(ConfigError):
        resolve_stats("nope")
    with pytest.raises(ConfigError):
        DatasetStats(0.0, 0.0)
    specs = [np.array([[1.0, 3.0]]), np.array([[5.0]])]
    est = estimate_stats(specs)
    assert est.mean == pytest.approx(3.0) and est.std == pytest.approx(math.sqrt(8 / 3))


def test_mix_endpoints_exact():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-20, 2, (4, 6)), rng.uniform(-20, 2, (4, 6))
    assert np.array_equal(mix_noisy(a, b, 0.0), a)
    assert np.array_equal(mix_noisy(a, b, 1.0), b)


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 5), st.floats(0, 1))
def test_mix_equal_constants(c, eta):
    a = np.full((2, 3), c)
    np.testing.assert_allclose(mix_noisy(a, a, eta), a, rtol=0, atol=1e-12)


def test_mix_matches_direct_formula():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-10, 2, (3, 5)), rng.uniform(-10, 2, (3, 5))
    for eta in (0.1, 0.5, 0.9):
        expected = np.log((1 - eta) * np.exp(a) + eta * np.exp(b))
        np.testing.assert_allclose(mix_noisy(a, b, eta), expected, rtol=1e-12)


def test_mix_stable_for_large_log_power():
    a, b = np.full((1, 2), 900.0), np.full((1, 2), 901.0)
    out = mix_noisy(a, b, 0.5)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, 900.0 + np.log(0.5 + 0.5 * np.e))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_mix_bounded_by_inputs(seed, eta):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-25, 3, (3, 4)), rng.uniform(-25, 3, (3, 4))
    out = mix_noisy(a, b, eta)
    assert np.all(out >= np.minimum(a, b)) and np.all(out <= np.maximum(a, b))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mix_monotone_in_eta(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-25, 0, (3, 4))
    b = a + rng.uniform(0, 10, (3, 4))
    etas = np.linspace(0, 1, 21)
    outs = np.stack([mix_noisy(a, b, e) for e in etas])
    assert np.all(np.diff(outs, axis=0) >= 0)


def test_mix_errors_and_spectrogram_passthrough():
    cfg = MelConfig(n_mels=2)
    with pytest.raises(DimensionError):
        mix_noisy(np.zeros((2, 3)), np.zeros((2, 4)), 0.5)
    with pytest.raises(DomainError):
        mix_noisy(np.zeros((2, 3)), np.zeros((2, 3)), 1.5)
    out = mix_noisy(Spectrogram(np.zeros((2, 3)), cfg), Spectrogram(np.ones((2, 3)), cfg), 0.5)
    assert isinstance(out, Spectrogram) and out.config == cfg


def test_fit_frames_crop_and_pad():
    x = np.arange(10.0).reshape(1, 10)
    assert np.array_equal(fit_frames(x, 4, offset=3), [[3, 4, 5, 6]])
    padded = fit_frames(x, 12, pad_value=-1.0)
    assert padded.shape == (1, 12) and np.all(padded[0, 10:] == -1.0)


def test_wav_roundtrip_and_rejections(tmp_path):
    x = np.sin(np.linspace(0, 100, 16000)) * 0.5
    write_wav(tmp_path / "a.wav", x, 16000)
    back = read_wav(tmp_path / "a.wav", 16000)
    np.testing.assert_allclose(back, x, atol=1 / 32767)
    with pytest.raises(DataError, match="sample rate"):
        read_wav(tmp_path / "a.wav", 8000)
    from scipy.io import wavfile
    wavfile.write(tmp_path / "st.wav", 16000, np.zeros((100, 2), dtype=np.int16))
    with pytest.raises(DataError, match="mono"):
        read_wav(tmp_path / "st.wav", 16000)
    (tmp_path / "junk.wav").write_bytes(b"not a wav")
    with pytest.raises(DataError):
        read_wav(tmp_path / "junk.wav", 16000)
