"""Log-mel frontend, dataset standardization and noisy mixing of log-mels."""

from dataclasses import dataclass, field
import math
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError, DomainError, InputTooShortError, InvalidInputError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    fmin_hz: float = 50.0
    fmax_hz: float = 8000.0

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ConfigError("mel.sample_rate_hz must be positive")
        if not 0 < self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ConfigError("mel: need 0 < fmin_hz < fmax_hz <= sample_rate_hz / 2")
        if self.n_mels <= 0:
            raise ConfigError("mel.n_mels must be positive")
        if not 0 < self.hop_ms <= self.window_ms:
            raise ConfigError("mel: need 0 < hop_ms <= window_ms")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000))

    @property
    def n_fft(self) -> int:
        return self.win_length

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop_length)


@dataclass(frozen=True)
class DatasetStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigError("stats.std must be > 0")


STATS_PRESETS = {
    "audioset": DatasetStats(-7.1, 4.2),
}


def resolve_stats(stats) -> DatasetStats:
    """Accept a DatasetStats, a preset name, or a ``{"mean", "std"}`` mapping."""
    if isinstance(stats, DatasetStats):
        return stats
    if isinstance(stats, str):
        try:
            return STATS_PRESETS[stats]
        except KeyError:
            raise ConfigError(f"unknown stats preset {stats!r}; known: {sorted(STATS_PRESETS)}") from None
    if isinstance(stats, dict):
        return DatasetStats(float(stats["mean"]), float(stats["std"]))
    raise ConfigError(f"cannot interpret stats {stats!r}")


@dataclass
class Spectrogram:
    """F x T log-mel matrix with the mel configuration that produced it."""

    data: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DimensionError(f"spectrogram must be 2-D (F x T), got shape {self.data.shape}")
        if self.data.shape[0] != self.config.n_mels:
            raise DimensionError(f"spectrogram has {self.data.shape[0]} bins, config says {self.config.n_mels}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("spectrogram contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: MelConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), peak value 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.n_mels + 2))
    freqs = np.fft.rfftfreq(config.n_fft, d=1.0 / config.sample_rate_hz)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def _periodic_hann(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def compute_logmel(waveform, config: MelConfig = MelConfig()) -> Spectrogram:
    """Natural-log mel power spectrogram with centered, reflection-padded frames.

    The frame count is ``ceil(len(waveform) / hop)``.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"waveform must be mono 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("waveform contains non-finite samples")
    n_fft, hop = config.n_fft, config.hop_length
    if len(x) < n_fft:
        raise InputTooShortError(f"waveform has {len(x)} samples, need at least one window ({n_fft})")

    n_frames = config.n_frames(len(x))
    padded = np.pad(x, (n_fft // 2, n_fft // 2), mode="reflect")
    frames = sliding_window_view(padded, n_fft)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * _periodic_hann(n_fft), axis=-1)
    power = spectrum.real**2 + spectrum.imag**2
    mel = mel_filterbank(config) @ power.T
    return Spectrogram(np.log(np.maximum(mel, LOG_FLOOR)), config)


def standardize(spec: Spectrogram, stats: DatasetStats) -> Spectrogram:
    return Spectrogram((spec.data - stats.mean) / stats.std, spec.config)


def unstandardize(spec: Spectrogram, stats: DatasetStats) -> Spectrogram:
    return Spectrogram(spec.data * stats.std + stats.mean, spec.config)


def estimate_stats(specs) -> DatasetStats:
    """Mean/std over every element of a collection of log-mel spectrograms."""
    values = np.concatenate([np.ravel(s.data if isinstance(s, Spectrogram) else s) for s in specs])
    return DatasetStats(float(values.mean()), float(values.std()))


def mix_noisy(x_targ: Spectrogram, x_bg: Spectrogram, eta: float) -> Spectrogram:
    """Blend two raw (un-standardized) log-mels in the linear power domain.

    Computes ``log((1 - eta) * exp(x_targ) + eta * exp(x_bg))`` elementwise,
    evaluated in log-sum-exp form so large log-powers do not overflow.
    """
    a, b = _as_array(x_targ), _as_array(x_bg)
    if a.shape != b.shape:
        raise DimensionError(f"cannot mix shapes {a.shape} and {b.shape}")
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    if eta == 0.0:
        out = a.copy()
    elif eta == 1.0:
        out = b.copy()
    else:
        out = np.logaddexp(math.log1p(-eta) + a, math.log(eta) + b)
        # rounding in logaddexp can step just outside the inputs' range
        out = np.clip(out, np.minimum(a, b), np.maximum(a, b))
    if isinstance(x_targ, Spectrogram):
        return Spectrogram(out, x_targ.config)
    return out


def _as_array(x):
    return x.data if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.float64)


def fit_frames(data: np.ndarray, n_frames: int, offset: int = 0, pad_value: float = 0.0) -> np.ndarray:
    """Crop (from ``offset``) or tail-pad the time axis to exactly ``n_frames``."""
    t = data.shape[-1]
    if t >= n_frames:
        return data[..., offset:offset + n_frames]
    pad = [(0, 0)] * (data.ndim - 1) + [(0, n_frames - t)]
    return np.pad(data, pad, constant_values=pad_value)


def read_wav(path, sample_rate_hz: int) -> np.ndarray:
    """Load a mono 16-bit or float PCM WAV file as float64 in [-1, 1]."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(Path(path))
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    if rate != sample_rate_hz:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {sample_rate_hz} Hz (resampling unsupported)")
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype.kind == "f":
        return data.astype(np.float64)
    raise DataError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, waveform, sample_rate_hz: int):
    from scipy.io import wavfile

    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(Path(path), sample_rate_hz, pcm)
