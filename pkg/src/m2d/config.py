"""Run configuration: YAML file -> validated, frozen dataclass tree.

Unknown keys are rejected so typos fail loudly. ``preset:`` seeds values that the rest of
the file may override.
"""

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
import copy
import typing
from pathlib import Path
from typing import Optional, Union

import yaml

from .errors import ConfigError
from .evaluation import ClassRecipe, ProbeHyper, SynthTask
from .frontend import STATS_PRESETS, MelConfig
from .m2dx import OfflineConfig, TeacherConfig
from .networks import EncoderConfig
from .core import VARIANTS


@dataclass(frozen=True)
class ScheduleConfig:
    tau_start: float = 0.99995
    tau_end: float = 0.99999


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 3e-4
    lr: Optional[float] = None  # absolute override of base_lr * effective_batch / 256
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    warmup_fraction: float = 0.05
    min_lr: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    steps: Optional[int] = None  # overrides epochs when set
    batch_size: int = 32
    grad_accum_steps: int = 1
    virtual_epoch_samples: Optional[int] = None
    checkpoint_every: int = 0
    log_wall_time: bool = True
    dtype: str = "float32"


@dataclass(frozen=True)
class DataConfig:
    wav_dir: Optional[str] = None
    labels: Optional[str] = None
    bg_dir: Optional[str] = None
    synth: SynthTask = field(default_factory=SynthTask)
    synth_bg_clips: int = 32


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 3e-5
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 64
    split: tuple = (0.6, 0.2, 0.2)

    def hyper(self) -> ProbeHyper:
        return ProbeHyper(self.lr, self.max_epochs, self.patience, self.batch_size, tuple(self.split))


@dataclass(frozen=True)
class RunConfig:
    preset: Optional[str] = None
    seed: int = 42
    mel: MelConfig = field(default_factory=MelConfig)
    stats: Union[str, dict] = "audioset"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mask_ratio: float = 0.7
    variant: str = "m2d"
    target_norm_axis: str = "token"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    offline: Optional[OfflineConfig] = None
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


PRESETS = {
    "audioset": {
        "mask_ratio": 0.7,
        "offline": {"scenario": "supervised", "lambda_m2d": 1.0, "lambda_off": 1.0, "eta": 0.0, "n_classes": 527},
    },
    "speech": {
        "mask_ratio": 0.6,
        "encoder": {"patch_f": 80, "patch_t": 2},
        "offline": {"scenario": "distill", "lambda_m2d": 1.0, "lambda_off": 0.5, "eta": 0.2,
                    "teacher": {"random_init": True}},
    },
    "further": {
        "mask_ratio": 0.7,
        "encoder": {"patch_f": 16, "patch_t": 4},
        "train": {"grad_accum_steps": 2},
        "offline": {"scenario": "regularize", "lambda_m2d": 1.0, "lambda_off": 1.0, "eta": 0.3,
                    "teacher": {}},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _unwrap_optional(tp):
    if typing.get_origin(tp) is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        tp = _unwrap_optional(hints[name])
        key = f"{path}.{name}" if path else name
        if value is None:
            kwargs[name] = None
        elif is_dataclass(tp):
            kwargs[name] = _build(tp, value, key)
        elif name == "class_spec":
            kwargs[name] = tuple(_build(ClassRecipe, r, f"{key}[{i}]") for i, r in enumerate(value))
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(raw: Optional[dict]) -> RunConfig:
    raw = dict(raw or {})
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; known: {sorted(PRESETS)}")
        raw = _merge(PRESETS[preset], raw)
    raw.setdefault("encoder", {})
    if isinstance(raw["encoder"], dict):
        raw["encoder"] = dict(raw["encoder"])
        raw["encoder"].setdefault("n_freq", (raw.get("mel") or {}).get("n_mels", MelConfig.n_mels))
    cfg = _build(RunConfig, raw, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if not 0.0 < cfg.mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio: must lie in (0, 1), got {cfg.mask_ratio}")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant: must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.target_norm_axis not in ("token", "all"):
        raise ConfigError(f"target_norm_axis: must be 'token' or 'all', got {cfg.target_norm_axis!r}")
    if cfg.train.grad_accum_steps < 1:
        raise ConfigError("train.grad_accum_steps: must be >= 1")
    if cfg.train.batch_size < cfg.train.grad_accum_steps:
        raise ConfigError("train.batch_size: must be >= grad_accum_steps")
    if cfg.train.dtype not in ("float32", "float64"):
        raise ConfigError("train.dtype: must be float32 or float64")
    if isinstance(cfg.stats, str) and cfg.stats != "dataset" and cfg.stats not in STATS_PRESETS:
        raise ConfigError(f"stats: unknown preset {cfg.stats!r}; known: {sorted(STATS_PRESETS)} or 'dataset'")
    if isinstance(cfg.stats, dict) and (set(cfg.stats) != {"mean", "std"} or not cfg.stats["std"] > 0):
        raise ConfigError("stats: expected {mean, std} with std > 0")
    if cfg.encoder.n_freq != cfg.mel.n_mels:
        raise ConfigError(f"encoder.n_freq: {cfg.encoder.n_freq} != mel.n_mels {cfg.mel.n_mels}")
    if not 0.0 <= cfg.schedule.tau_start <= cfg.schedule.tau_end <= 1.0:
        raise ConfigError("schedule: need 0 <= tau_start <= tau_end <= 1")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    raw = plain(asdict(cfg))
    # presets were already folded in
    raw["preset"] = None
    return raw


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
