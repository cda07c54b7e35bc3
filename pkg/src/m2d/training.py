"""Run orchestration: data loading, the pre-training loop, checkpoint/resume, extraction and probing."""

from dataclasses import dataclass, field, replace
import copy
import math
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import Checkpoint, module_state, read_checkpoint, restore, save_checkpoint
from .config import RunConfig, config_from_dict, config_to_dict
from .core import LRSchedule, TauSchedule, TrainStepReport, build_optimizer, set_lr, train_step
from .errors import CheckpointError, ConfigError, DataError
from .evaluation import Comparison, ProbeResult, colored_noise, compare_encoders, generate_synth, linear_probe, \
    stratified_split
from .frontend import DatasetStats, compute_logmel, estimate_stats, mix_noisy, read_wav, resolve_stats
from .io import MetricsWriter, read_labels
from .m2dx import FrozenEncoderTeacher, OfflineBatch, build_mapper, regularize_setup, train_step_x
from .networks import Encoder, OnlineState, make_target
from .patching import sample_mask
from .transfer import clip_feature, encode_chunked

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.jsonl"


@dataclass
class ClipSet:
    """Raw (un-standardized) log-mels with ids and optional per-clip class lists."""

    ids: list
    specs: list
    labels: Optional[list] = None
    name: str = "synth"

    def __len__(self):
        return len(self.ids)

    def single_labels(self) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"dataset {self.name!r} has no labels")
        if any(len(c) != 1 for c in self.labels):
            raise DataError("probing needs exactly one class per clip")
        return np.array([c[0] for c in self.labels])


def synth_clips(cfg: RunConfig, seed: int) -> ClipSet:
    waves, labels = generate_synth(cfg.data.synth, np.random.default_rng(seed))
    specs = [compute_logmel(w, cfg.mel).data for w in waves]
    return ClipSet([f"synth_{i:05d}" for i in range(len(specs))], specs, [[int(c)] for c in labels], "synth")


def wav_clips(directory, cfg: RunConfig) -> ClipSet:
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise DataError(f"no .wav files in {directory}")
    specs = [compute_logmel(read_wav(p, cfg.mel.sample_rate_hz), cfg.mel).data for p in paths]
    return ClipSet([p.stem for p in paths], specs, None, Path(directory).name)


def load_clips(cfg: RunConfig) -> ClipSet:
    if cfg.data.wav_dir is None:
        clips = synth_clips(cfg, cfg.seed)
    else:
        clips = wav_clips(cfg.data.wav_dir, cfg)
    if cfg.data.labels is not None:
        table = read_labels(cfg.data.labels)
        missing = [cid for cid in clips.ids if cid not in table]
        if missing:
            raise DataError(f"{len(missing)} clip(s) lack labels, e.g. {missing[0]!r}")
        clips.labels = [table[cid] for cid in clips.ids]
    return clips


def load_background(cfg: RunConfig, n_frames: int) -> list:
    """Background log-mels for noisy mixing: ``bg_dir`` WAVs or synthetic colored noise."""
    if cfg.data.bg_dir is not None:
        return wav_clips(cfg.data.bg_dir, cfg).specs
    rng = np.random.default_rng([cfg.seed, 7])
    n_samples = n_frames * cfg.mel.hop_length
    out = []
    for i in range(cfg.data.synth_bg_clips):
        color = ("white", "pink", "brown")[i % 3]
        wave = colored_noise(n_samples, color, rng)
        wave = wave / (np.max(np.abs(wave)) + 1e-12) * 10 ** (rng.uniform(-20.0, 0.0) / 20)
        out.append(compute_logmel(wave, cfg.mel).data)
    return out


def run_stats(cfg: RunConfig, clips: ClipSet) -> DatasetStats:
    if cfg.stats == "dataset":
        return estimate_stats(clips.specs)
    return resolve_stats(cfg.stats)


def random_crop(spec: np.ndarray, n_frames: int, rng: np.random.Generator, pad_value: float) -> np.ndarray:
    t = spec.shape[-1]
    if t >= n_frames:
        start = int(rng.integers(t - n_frames + 1))
        return spec[..., start:start + n_frames]
    return np.pad(spec, [(0, 0)] * (spec.ndim - 1) + [(0, n_frames - t)], constant_values=pad_value)


class EpochSampler:
    """Per-epoch shuffled order over a data list replicated to ``epoch_samples`` items."""

    def __init__(self, n_items: int, epoch_samples: int, batch: int, seed: int):
        if n_items < 1:
            raise DataError("dataset is empty")
        if epoch_samples < batch:
            raise ConfigError(f"train.batch_size: effective batch {batch} exceeds the {epoch_samples} samples per epoch")
        self.n_items, self.epoch_samples, self.batch, self.seed = n_items, epoch_samples, batch, seed
        self.steps_per_epoch = epoch_samples // batch
        self._cache = (None, None)

    def order(self, epoch: int) -> np.ndarray:
        if self._cache[0] != epoch:
            items = np.resize(np.arange(self.n_items), self.epoch_samples)
            self._cache = (epoch, np.random.default_rng([self.seed, 1, epoch]).permutation(items))
        return self._cache[1]

    def indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        return self.order(epoch)[k * self.batch:(k + 1) * self.batch]


def effective_batch(cfg: RunConfig) -> int:
    return cfg.train.batch_size * cfg.train.grad_accum_steps


def total_steps(cfg: RunConfig, n_items: int) -> int:
    if cfg.train.steps is not None:
        return cfg.train.steps
    samples = cfg.train.virtual_epoch_samples or n_items
    return cfg.train.epochs * max(1, samples // effective_batch(cfg))


def peak_lr(cfg: RunConfig) -> float:
    if cfg.optimizer.lr is not None:
        return cfg.optimizer.lr
    return cfg.optimizer.base_lr * effective_batch(cfg) / 256


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.train.dtype == "float64" else torch.float32


def build_online(cfg: RunConfig) -> OnlineState:
    """Online branch initialised from ``cfg.seed``; the same seed always gives the same weights."""
    torch.manual_seed(cfg.seed)
    return OnlineState(cfg.encoder).to(_dtype(cfg))


def load_online(ckpt: Checkpoint) -> OnlineState:
    """Rebuild the online branch recorded in a checkpoint from its config snapshot."""
    if "config" not in ckpt.meta:
        raise CheckpointError("checkpoint has no config snapshot")
    snap = config_from_dict(ckpt.meta["config"])
    online = OnlineState(snap.encoder).to(_dtype(snap))
    try:
        online.load_state_dict(module_state(ckpt, "online"))
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not match its own config: {exc}") from exc
    return online


def checkpoint_stats(ckpt: Checkpoint) -> DatasetStats:
    s = ckpt.meta.get("extra", {}).get("stats")
    if s is None:
        raise CheckpointError("checkpoint does not record normalization stats")
    return DatasetStats(s["mean"], s["std"])


@dataclass
class Models:
    online: OnlineState
    target: Encoder
    mapper: Optional[torch.nn.Module] = None
    teacher: Optional[FrozenEncoderTeacher] = None


def build_models(cfg: RunConfig, offline: bool) -> Models:
    if not offline:
        online = build_online(cfg)
        return Models(online, make_target(online))
    off = cfg.offline
    if off is None:
        raise ConfigError("offline: pretrain-x needs an 'offline' section in the config")
    online = build_online(cfg)
    teacher = None
    if off.scenario == "regularize":
        original = load_online(read_checkpoint(off.teacher.checkpoint))
        online, teacher = regularize_setup(original, cfg.encoder, off.teacher.layer)
        online = online.to(_dtype(cfg))
    elif off.scenario == "distill":
        if off.teacher.checkpoint:
            source = load_online(read_checkpoint(off.teacher.checkpoint)).encoder
        else:
            with torch.random.fork_rng():
                torch.manual_seed(off.teacher.seed)
                source = Encoder(cfg.encoder)
        teacher = FrozenEncoderTeacher(source.to(_dtype(cfg)), off.teacher.layer)
    mapper = build_mapper(off, cfg.encoder.grid, cfg.encoder.dim, None if teacher is None else teacher.out_dim)
    return Models(online, make_target(online), mapper.to(_dtype(cfg)), teacher)


@dataclass
class RunResult:
    reports: list
    models: Models
    stats: DatasetStats
    out_dir: Path
    total_steps: int
    clips: Optional[ClipSet] = field(default=None, repr=False)

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / CHECKPOINT_NAME

    @property
    def metrics(self) -> Path:
        return self.out_dir / METRICS_NAME


def _multi_hot(classes_per_clip, n_classes: int) -> torch.Tensor:
    y = torch.zeros(len(classes_per_clip), n_classes)
    for row, classes in enumerate(classes_per_clip):
        for c in classes:
            if not 0 <= c < n_classes:
                raise DataError(f"class index {c} outside [0, {n_classes})")
            y[row, c] = 1.0
    return y


def pretrain(cfg: RunConfig, out_dir, *, offline: bool = False, resume=None, clips: Optional[ClipSet] = None,
             on_step: Optional[Callable[[TrainStepReport], None]] = None) -> RunResult:
    """Run M2D (or M2D-X with ``offline=True``) pre-training and write metrics and checkpoints.

    ``resume`` is a checkpoint path; its config snapshot must match ``cfg``.
    """
    if offline and cfg.offline is None:
        raise ConfigError("offline: pretrain-x needs an 'offline' section in the config")
    out_dir = Path(out_dir)
    ckpt = None
    if resume is not None:
        ckpt = read_checkpoint(resume)
        if ckpt.meta.get("config") != config_to_dict(cfg):
            raise ConfigError("resume: config differs from the checkpoint's config snapshot")
        if bool(ckpt.meta.get("extra", {}).get("offline")) != offline:
            raise ConfigError("resume: checkpoint was written by the other pre-training mode")
    clips = clips if clips is not None else load_clips(cfg)
    if offline and cfg.offline.scenario == "supervised" and clips.labels is None:
        raise DataError("supervised scenario needs labels (data.labels or the synthetic task)")
    stats = run_stats(cfg, clips)
    n_frames = cfg.encoder.input_frames
    n_patches = cfg.encoder.grid.n_patches

    models = build_models(cfg, offline)
    params = list(models.online.parameters()) + ([] if models.mapper is None else list(models.mapper.parameters()))
    optimizer = build_optimizer(params, peak_lr(cfg), cfg.optimizer.weight_decay, cfg.optimizer.betas)
    steps = total_steps(cfg, len(clips))
    sampler = EpochSampler(len(clips), cfg.train.virtual_epoch_samples or len(clips), effective_batch(cfg), cfg.seed)
    tau_schedule = TauSchedule(cfg.schedule.tau_start, cfg.schedule.tau_end, steps)
    lr_schedule = LRSchedule(peak_lr(cfg), steps, int(round(cfg.optimizer.warmup_fraction * steps)),
                             cfg.optimizer.min_lr)
    start = 0
    if ckpt is not None:
        start = restore(ckpt, online=models.online, target=models.target, optimizer=optimizer, mapper=models.mapper)
    background = load_background(cfg, n_frames) if offline and cfg.offline.eta > 0 else None
    metrics = MetricsWriter(out_dir / METRICS_NAME, resume_step=start if ckpt is not None else None)
    snapshot = config_to_dict(cfg)
    extra = {"stats": {"mean": stats.mean, "std": stats.std}, "offline": offline, "total_steps": steps}

    def save(step, path):
        save_checkpoint(path, online=models.online, target=models.target, step=step, config=snapshot,
                        optimizer=optimizer, mapper=models.mapper, extra=extra)

    reports = []
    dtype = _dtype(cfg)
    for step in range(start, steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, step])
        idx = sampler.indices(step)
        raw = np.stack([random_crop(clips.specs[i], n_frames, rng, stats.mean) for i in idx])
        plans = [sample_mask(n_patches, cfg.mask_ratio, rng) for _ in idx]
        set_lr(optimizer, lr_schedule.lr_at(step))
        if offline:
            off = cfg.offline
            noisy = raw
            if background is not None:
                bg = np.stack([random_crop(background[rng.integers(len(background))], n_frames, rng, stats.mean)
                               for _ in idx])
                noisy = mix_noisy(raw, bg, off.eta)
            batch = OfflineBatch(
                torch.as_tensor((noisy - stats.mean) / stats.std, dtype=dtype),
                None if off.scenario == "supervised" else torch.as_tensor((raw - stats.mean) / stats.std, dtype=dtype),
                _multi_hot([clips.labels[i] for i in idx], off.n_classes) if off.scenario == "supervised" else None)
            report = train_step_x(models.online, models.target, models.mapper, models.teacher, batch, plans,
                                  optimizer, tau_schedule, step, off, cfg.variant, cfg.target_norm_axis,
                                  cfg.train.grad_accum_steps)
        else:
            x = torch.as_tensor((raw - stats.mean) / stats.std, dtype=dtype)
            report = train_step(models.online, models.target, x, plans, optimizer, tau_schedule, step,
                                cfg.variant, cfg.target_norm_axis, cfg.train.grad_accum_steps)
        metrics.write(report, time.perf_counter() - t0 if cfg.train.log_wall_time else 0.0)
        reports.append(report)
        if on_step is not None:
            on_step(report)
        every = cfg.train.checkpoint_every
        if every and (step + 1) % every == 0 and step + 1 < steps:
            save(step + 1, out_dir / f"checkpoint_{step + 1:07d}.bin")
    save(steps, out_dir / CHECKPOINT_NAME)
    return RunResult(reports, models, stats, out_dir, steps, clips)


def standardized(clips: ClipSet, stats: DatasetStats) -> list:
    return [((s - stats.mean) / stats.std).astype(np.float32) for s in clips.specs]


@torch.no_grad()
def frame_features(encoder, specs: list) -> list:
    enc = encoder.encoder if isinstance(encoder, OnlineState) else encoder
    dtype = enc.embed.weight.dtype
    return [encode_chunked(enc, torch.as_tensor(s).to(dtype)).data[0] for s in specs]


@torch.no_grad()
def clip_features(encoder, specs: list) -> np.ndarray:
    return np.stack([clip_feature(f.unsqueeze(0)).data[0].double().numpy() for f in frame_features(encoder, specs)])


def extract(ckpt_path, clips: ClipSet, mode: str = "clip"):
    """Features of every clip from a checkpoint's online encoder: (array, manifest)."""
    if mode not in ("clip", "frame"):
        raise ConfigError(f"extract mode must be 'clip' or 'frame', got {mode!r}")
    ckpt = read_checkpoint(ckpt_path)
    encoder = load_online(ckpt).encoder
    specs = standardized(clips, checkpoint_stats(ckpt))
    if mode == "clip":
        feats = clip_features(encoder, specs).astype(np.float32)
        return feats, [(cid, i, 1) for i, cid in enumerate(clips.ids)]
    frames = [f.float().numpy() for f in frame_features(encoder, specs)]
    offsets = np.cumsum([0] + [len(f) for f in frames])
    return np.concatenate(frames), [(cid, int(o), len(f)) for cid, o, f in zip(clips.ids, offsets, frames)]


def probe_encoder(encoder, clips: ClipSet, stats: DatasetStats, cfg: RunConfig, seed: int) -> ProbeResult:
    labels = clips.single_labels()
    split = stratified_split(labels, cfg.probe.split, np.random.default_rng(seed))
    return linear_probe(clip_features(encoder, standardized(clips, stats)), labels, split, cfg.probe.hyper(), seed)


def compare_seed(cfg: RunConfig, out_dir, seed: int, on_step=None) -> tuple:
    """Pre-train with ``seed`` and probe it against the same seed's untrained initial weights."""
    run_cfg = replace(cfg, seed=seed)
    result = pretrain(run_cfg, out_dir, on_step=on_step)
    random_init = build_online(run_cfg)
    labels = result.clips.single_labels()
    specs = standardized(result.clips, result.stats)
    cmp = _compare(result.models.online, random_init, specs, labels, seed, cfg)
    return result, cmp


def _compare(pretrained, random_init, specs, labels, seed, cfg) -> Comparison:
    if len({s.shape for s in specs}) == 1:
        return compare_encoders(pretrained, random_init, np.stack(specs), labels, seed, cfg.probe.hyper())
    split = stratified_split(labels, cfg.probe.split, np.random.default_rng(seed))
    return Comparison(*(linear_probe(clip_features(e, specs), labels, split, cfg.probe.hyper(), seed)
                        for e in (pretrained, random_init)))
