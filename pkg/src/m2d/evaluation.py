"""Synthetic audio classification task and frozen-feature linear probing."""

from dataclasses import dataclass, field
import copy
import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ConsistencyError, SplitError
from .frontend import DatasetStats, MelConfig, compute_logmel, fit_frames
from .networks import Encoder, OnlineState
from .transfer import clip_feature, encode_chunked

NOISE_COLORS = ("white", "pink", "brown")


@dataclass(frozen=True)
class ClassRecipe:
    f0_band: tuple  # (low_hz, high_hz)
    am_rate_hz: float = 0.0
    fm_rate_hz: float = 0.0
    fm_depth: float = 0.0  # relative frequency deviation
    n_harmonics: int = 3
    noise_color: str = "white"


def default_recipes(n_classes: int, low_hz: float = 200.0, high_hz: float = 3200.0):
    """Adjacent, disjoint log-spaced f0 bands with cycling AM/FM/noise settings."""
    edges = np.geomspace(low_hz, high_hz, n_classes + 1)
    recipes = []
    for c in range(n_classes):
        recipes.append(ClassRecipe(
            f0_band=(float(edges[c]), float(edges[c + 1])),
            am_rate_hz=(2.0, 4.0, 6.0, 8.0)[c % 4],
            fm_rate_hz=(0.5, 1.0, 1.5, 2.0)[c % 4],
            fm_depth=0.01,
            n_harmonics=3,
            noise_color=NOISE_COLORS[c % len(NOISE_COLORS)],
        ))
    return tuple(recipes)


@dataclass(frozen=True)
class SynthTask:
    n_classes: int = 4
    clips_per_class: int = 64
    duration_s: float = 2.0
    sample_rate_hz: int = 16000
    snr_db: tuple = (0.0, 20.0)
    gain_db: tuple = (-20.0, 0.0)
    distractors: int = 2
    class_spec: Optional[tuple] = None

    def __post_init__(self):
        if self.n_classes < 2 or self.clips_per_class < 1 or self.duration_s <= 0:
            raise ConfigError("synthetic task needs >= 2 classes, >= 1 clip per class and positive duration")
        if self.class_spec is not None:
            if len(self.class_spec) != self.n_classes:
                raise ConfigError("class_spec needs one recipe per class")
            bands = sorted(r.f0_band for r in self.recipes)
            if any(a[1] > b[0] for a, b in zip(bands, bands[1:])):
                raise ConfigError("class f0 bands must be disjoint")

    @property
    def recipes(self):
        if self.class_spec is None:
            return default_recipes(self.n_classes)
        return tuple(r if isinstance(r, ClassRecipe) else ClassRecipe(**r) for r in self.class_spec)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))


def colored_noise(n: int, color: str, rng: np.random.Generator) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.arange(len(spectrum), dtype=np.float64)
    freqs[0] = 1.0
    exponent = {"white": 0.0, "pink": 0.5, "brown": 1.0}[color]
    noise = np.fft.irfft(spectrum / freqs**exponent, n)
    return noise / (np.std(noise) + 1e-12)


def _tone(recipe: ClassRecipe, f0: float, t: np.ndarray, rng, sample_rate: float) -> np.ndarray:
    nyquist = sample_rate / 2
    inst = f0 * (1.0 + recipe.fm_depth * np.sin(2 * np.pi * recipe.fm_rate_hz * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(inst) / sample_rate
    x = np.zeros_like(t)
    for k in range(1, recipe.n_harmonics + 1):
        if k * f0 * (1 + recipe.fm_depth) < nyquist:
            x += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    if recipe.am_rate_hz > 0:
        x *= 0.6 + 0.4 * np.sin(2 * np.pi * recipe.am_rate_hz * t + rng.uniform(0, 2 * np.pi))
    return x / (np.std(x) + 1e-12)


def generate_synth(task: SynthTask, rng: np.random.Generator):
    """Balanced labelled clips, shape (n_classes * clips_per_class, n_samples), values in [-1, 1].

    Each clip is the class tone plus ``distractors`` tones at random frequencies outside the
    class band, colored noise at a random SNR, and a random overall gain.
    """
    n = task.n_samples
    t = np.arange(n) / task.sample_rate_hz
    recipes = task.recipes
    lo_all = min(r.f0_band[0] for r in recipes)
    hi_all = max(r.f0_band[1] for r in recipes)
    waves, labels = [], []
    for c, recipe in enumerate(recipes):
        for _ in range(task.clips_per_class):
            f0 = math.exp(rng.uniform(math.log(recipe.f0_band[0]), math.log(recipe.f0_band[1])))
            x = _tone(recipe, f0, t, rng, task.sample_rate_hz)
            for _ in range(task.distractors):
                while True:
                    fd = math.exp(rng.uniform(math.log(lo_all), math.log(hi_all)))
                    if not recipe.f0_band[0] <= fd <= recipe.f0_band[1]:
                        break
                other = recipes[rng.integers(len(recipes))]
                x = x + rng.uniform(0.3, 0.8) * _tone(other, fd, t, rng, task.sample_rate_hz)
            snr = rng.uniform(*task.snr_db)
            x = x / (np.std(x) + 1e-12) + 10 ** (-snr / 20) * colored_noise(n, recipe.noise_color, rng)
            x = x / (np.max(np.abs(x)) + 1e-12) * 10 ** (rng.uniform(*task.gain_db) / 20)
            waves.append(x)
            labels.append(c)
    return np.stack(waves), np.asarray(labels)


def logmels(waves, mel: MelConfig, stats: Optional[DatasetStats] = None, n_frames: Optional[int] = None):
    """Log-mel (optionally standardized, cropped/padded) array of shape (n, F, T)."""
    out = []
    for w in waves:
        s = compute_logmel(w, mel).data
        if stats is not None:
            s = (s - stats.mean) / stats.std
        if n_frames is not None:
            s = fit_frames(s, n_frames)
        out.append(s)
    return np.stack(out).astype(np.float32)


@torch.no_grad()
def extract_clip_features(encoder, specs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen-encoder clip features for standardized (n, F, T) log-mels."""
    enc = encoder.encoder if isinstance(encoder, OnlineState) else encoder
    feats = []
    for i in range(0, len(specs), batch_size):
        x = torch.as_tensor(specs[i:i + batch_size]).to(enc.embed.weight.dtype)
        feats.append(clip_feature(encode_chunked(enc, x)).data)
    return torch.cat(feats).double().numpy()


@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 3e-5
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 64
    split: tuple = (0.6, 0.2, 0.2)


@dataclass
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int
    seed: int
    val_accuracy: float = float("nan")
    epochs: int = 0


def stratified_split(labels, fractions, rng: np.random.Generator):
    """Per-class shuffled train/val/test index arrays; every class must land in every split."""
    labels = np.asarray(labels)
    parts = ([], [], [])
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        chunks = (idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])
        for name, part, chunk in zip(("train", "validation", "test"), parts, chunks):
            if len(chunk) == 0:
                raise SplitError(f"class {c} has no items in the {name} split")
            part.append(chunk)
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def linear_probe(features, labels, split=None, hyper: ProbeHyper = ProbeHyper(), seed: int = 0) -> ProbeResult:
    """Train a linear classifier on frozen features with early stopping; report test accuracy."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    y = np.searchsorted(classes, y)
    if split is None:
        split = stratified_split(y, hyper.split, np.random.default_rng(seed))
    train, val, test = (np.asarray(s) for s in split)
    for name, part in (("train", train), ("validation", val), ("test", test)):
        missing = set(range(len(classes))) - set(y[part].tolist())
        if missing:
            raise SplitError(f"classes {sorted(missing)} missing from the {name} split")

    mean, std = x[train].mean(0), x[train].std(0) + 1e-8
    x = torch.as_tensor((x - mean) / std, dtype=torch.float32)
    y = torch.as_tensor(y, dtype=torch.long)

    gen = torch.Generator().manual_seed(seed)
    layer = nn.Linear(x.shape[1], len(classes))
    with torch.no_grad():
        layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) * 0.01)
        layer.bias.zero_()
    opt = torch.optim.Adam(layer.parameters(), lr=hyper.lr)
    loss_fn = nn.CrossEntropyLoss()
    xt, yt = x[train], y[train]
    best = (math.inf, copy.deepcopy(layer.state_dict()), 0)
    epoch = 0
    for epoch in range(1, hyper.max_epochs + 1):
        order = torch.randperm(len(train), generator=gen)
        for i in range(0, len(train), hyper.batch_size):
            b = order[i:i + hyper.batch_size]
            opt.zero_grad()
            loss_fn(layer(xt[b]), yt[b]).backward()
            opt.step()
        with torch.no_grad():
            val_loss = loss_fn(layer(x[val]), y[val]).item()
        if val_loss < best[0]:
            best = (val_loss, copy.deepcopy(layer.state_dict()), epoch)
        elif epoch - best[2] >= hyper.patience:
            break
    layer.load_state_dict(best[1])
    with torch.no_grad():
        pred = layer(x).argmax(1)
    accuracy = (pred[test] == y[test]).double().mean().item()
    val_accuracy = (pred[val] == y[val]).double().mean().item()
    return ProbeResult(accuracy, len(train), len(test), seed, val_accuracy, epoch)


@dataclass
class Comparison:
    pretrained: ProbeResult
    random_init: ProbeResult

    @property
    def gap(self) -> float:
        return self.pretrained.accuracy - self.random_init.accuracy


def _check_same_architecture(a, b):
    ea = a.encoder if isinstance(a, OnlineState) else a
    eb = b.encoder if isinstance(b, OnlineState) else b
    if ea.cfg != eb.cfg:
        raise ConsistencyError(f"encoder configs differ: {ea.cfg} vs {eb.cfg}")
    sa = {k: v.shape for k, v in ea.state_dict().items()}
    sb = {k: v.shape for k, v in eb.state_dict().items()}
    if sa != sb:
        raise ConsistencyError("encoders have different parameter shapes")


def compare_encoders(pretrained, random_init, specs: np.ndarray, labels, seed: int = 0,
                     hyper: ProbeHyper = ProbeHyper()) -> Comparison:
    """Identical extract -> probe pipeline (same split, same probe seed) on both encoders."""
    _check_same_architecture(pretrained, random_init)
    split = stratified_split(labels, hyper.split, np.random.default_rng(seed))
    results = [linear_probe(extract_clip_features(enc, specs), labels, split, hyper, seed)
               for enc in (pretrained, random_init)]
    return Comparison(*results)


@dataclass
class ComparisonSummary:
    comparisons: list = field(default_factory=list)

    @property
    def gaps(self):
        return np.array([c.gap for c in self.comparisons])

    @property
    def mean_gap(self) -> float:
        return float(self.gaps.mean())

    @property
    def spread(self) -> float:
        return float(self.gaps.std())

    @property
    def mean_pretrained(self) -> float:
        return float(np.mean([c.pretrained.accuracy for c in self.comparisons]))

    @property
    def mean_random(self) -> float:
        return float(np.mean([c.random_init.accuracy for c in self.comparisons]))


def summarize(comparisons: Sequence[Comparison]) -> ComparisonSummary:
    return ComparisonSummary(list(comparisons))
