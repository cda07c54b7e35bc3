"""M2D-X: an offline branch on top of M2D, trained jointly on noisy input.

Scenarios:
    supervised  temporal mean pooling + linear layer, BCE against multi-hot labels
    distill     per-frame linear mapper, l2-normalized MSE against a frozen teacher
    regularize  as ``distill`` with the teacher being the frozen pre-trained model that
                also initialises the online encoder (further pre-training)
"""

from dataclasses import dataclass, field
import copy
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

from .core import TauSchedule, TrainStepReport, check_finite, m2d_forward, m2d_loss, split_micro, tau_at
from .errors import AlignmentError, CheckpointError, ConfigError, DimensionError
from .networks import Encoder, OnlineState, as_indices, ema_update, init_weights, scatter_tokens
from .patching import PatchGrid, TokenSequence
from .transfer import encode_all, reshape_timeframe

SCENARIOS = ("supervised", "distill", "regularize")


@dataclass(frozen=True)
class TeacherConfig:
    checkpoint: Optional[str] = None
    random_init: bool = False
    layer: Optional[int] = None
    seed: int = 0


@dataclass(frozen=True)
class OfflineConfig:
    scenario: str = "supervised"
    lambda_m2d: float = 1.0
    lambda_off: float = 1.0
    eta: float = 0.0
    n_classes: Optional[int] = None
    teacher: Optional[TeacherConfig] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"offline.scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.lambda_m2d < 0 or self.lambda_off < 0 or self.lambda_m2d + self.lambda_off <= 0:
            raise ConfigError("offline loss weights must be >= 0 with a positive sum")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"offline.eta must lie in [0, 1], got {self.eta}")
        if self.scenario == "supervised" and (self.n_classes is None or self.n_classes < 2):
            raise ConfigError("offline.n_classes >= 2 is required for the supervised scenario")
        if self.scenario != "supervised":
            if self.teacher is None:
                raise ConfigError(f"offline.teacher is required for the {self.scenario} scenario")
            if self.scenario == "regularize" and not self.teacher.checkpoint:
                raise ConfigError("offline.teacher.checkpoint (the pre-trained model) is required to regularize")
            if self.scenario == "distill" and not (self.teacher.checkpoint or self.teacher.random_init):
                raise ConfigError("offline.teacher needs a checkpoint or random_init: true")


@dataclass
class OfflineBatch:
    x_noisy: torch.Tensor  # (B, F, T) standardized, fed to M2D
    y_audio: Optional[torch.Tensor] = None  # (B, F, T) clean standardized, fed to the teacher
    y_label: Optional[torch.Tensor] = None  # (B, n_classes) multi-hot

    def __post_init__(self):
        if self.y_audio is None and self.y_label is None:
            raise ConfigError("offline batch needs y_audio or y_label")
        B = self.x_noisy.shape[0]
        for name in ("y_audio", "y_label"):
            value = getattr(self, name)
            if value is not None and value.shape[0] != B:
                raise DimensionError(f"{name} batch size {value.shape[0]} != x_noisy batch size {B}")


class FrozenEncoderTeacher:
    """Immutable encoder snapshot producing per-frame features of clean audio.

    ``layer`` selects a block output (1-based); ``None`` is the final output.
    """

    def __init__(self, encoder: Encoder, layer: Optional[int] = None):
        self.encoder = copy.deepcopy(encoder.encoder if isinstance(encoder, OnlineState) else encoder)
        self.encoder.requires_grad_(False)
        self.encoder.eval()
        self.layer = layer

    @property
    def out_dim(self) -> int:
        return self.encoder.cfg.grid.n_f * self.encoder.cfg.dim

    @torch.no_grad()
    def __call__(self, y_audio: torch.Tensor) -> torch.Tensor:
        return encode_all(self.encoder, y_audio, layer=self.layer).data

    def parameters(self):
        return self.encoder.parameters()


class OfflineMapper(nn.Module):
    """Online mapper: pooled linear classifier (supervised) or per-frame linear map."""

    def __init__(self, in_dim: int, out_dim: int, pool: bool):
        super().__init__()
        self.pool = pool
        self.linear = nn.Linear(in_dim, out_dim)
        self.apply(init_weights)

    def forward(self, h_hat):
        return self.linear(h_hat.mean(dim=1) if self.pool else h_hat)


def build_mapper(cfg: OfflineConfig, grid: PatchGrid, dim: int, teacher_dim: Optional[int] = None) -> OfflineMapper:
    if cfg.scenario == "supervised":
        return OfflineMapper(grid.n_f * dim, cfg.n_classes, pool=True)
    if teacher_dim is None:
        raise ConfigError("teacher feature width is needed to build a distillation mapper")
    return OfflineMapper(grid.n_f * dim, teacher_dim, pool=False)


def assemble_audio_feature(z_v: TokenSequence, z_hat_m: TokenSequence, plans, grid: PatchGrid) -> torch.Tensor:
    """Put visible encodings and masked predictions back in patch order, then reshape per frame."""
    merged = scatter_tokens([z_v, z_hat_m], grid.n_patches)
    return reshape_timeframe(merged, grid).data


def offline_supervised_loss(h_hat: torch.Tensor, y_label: torch.Tensor, mapper) -> torch.Tensor:
    logits = mapper(h_hat)
    if logits.shape != y_label.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} do not match labels {tuple(y_label.shape)}")
    return F.binary_cross_entropy_with_logits(logits, y_label.to(logits.dtype))


def offline_distill_loss(h_hat: torch.Tensor, y_tilde: torch.Tensor, mapper) -> torch.Tensor:
    mapped = mapper(h_hat)
    if mapped.shape[:2] != y_tilde.shape[:2]:
        raise AlignmentError(
            f"student has {mapped.shape[1]} frames, teacher {y_tilde.shape[1]}; align the teacher first")
    return m2d_loss(mapped, y_tilde.detach().to(mapped.dtype))


def align_frames(y: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Linearly interpolate (B, T', D) teacher features along time to ``n_frames``."""
    if y.shape[1] == n_frames:
        return y
    return F.interpolate(y.transpose(1, 2), size=n_frames, mode="linear", align_corners=True).transpose(1, 2)


def regularize_setup(original: OnlineState, cfg=None, layer: Optional[int] = None):
    """Online branch initialised from ``original`` plus a frozen teacher holding the same weights."""
    online = copy.deepcopy(original)
    if cfg is not None and cfg != original.cfg:
        online = OnlineState(cfg)
        try:
            online.load_state_dict(original.state_dict())
        except RuntimeError as exc:
            raise CheckpointError(f"pre-trained weights do not fit encoder config: {exc}") from exc
    online.requires_grad_(True)
    return online, FrozenEncoderTeacher(original.encoder, layer=layer)


def combined_loss(l_m2d, l_off, cfg: OfflineConfig):
    return cfg.lambda_m2d * l_m2d + cfg.lambda_off * l_off


def offline_loss(out, batch_part: OfflineBatch, mapper, teacher, cfg: OfflineConfig):
    """L_off for one micro-batch given the M2D forward output on its noisy input."""
    h_hat = assemble_audio_feature(out.z_v, out.z_hat_m, (out.visible, out.masked), out.grid)
    if cfg.scenario == "supervised":
        if batch_part.y_label is None:
            raise ConfigError("supervised scenario needs y_label")
        return offline_supervised_loss(h_hat, batch_part.y_label, mapper)
    if batch_part.y_audio is None:
        raise ConfigError(f"{cfg.scenario} scenario needs clean y_audio")
    y_tilde = align_frames(teacher(batch_part.y_audio), h_hat.shape[1])
    return offline_distill_loss(h_hat, y_tilde, mapper)


@dataclass
class XOutput:
    loss_total: torch.Tensor
    loss_m2d: torch.Tensor
    loss_off: torch.Tensor
    extras: dict = field(default_factory=dict)


def m2dx_forward(online, target, mapper, teacher, batch: OfflineBatch, plans, cfg: OfflineConfig,
                 variant="m2d", norm_axis="token") -> XOutput:
    out = m2d_forward(online, target, batch.x_noisy, plans, variant, norm_axis)
    l_off = offline_loss(out, batch, mapper, teacher, cfg)
    return XOutput(combined_loss(out.loss, l_off, cfg), out.loss, l_off, {"m2d": out})


def _slice_batch(batch: OfflineBatch, part: slice) -> OfflineBatch:
    return OfflineBatch(
        batch.x_noisy[part],
        None if batch.y_audio is None else batch.y_audio[part],
        None if batch.y_label is None else batch.y_label[part])


def train_step_x(online: OnlineState, target: Encoder, mapper: nn.Module, teacher, batch: OfflineBatch, plans,
                 optimizer, schedule: TauSchedule, step: int, cfg: OfflineConfig, variant: str = "m2d",
                 norm_axis: str = "token", grad_accum_steps: int = 1) -> TrainStepReport:
    """Backpropagate ``lambda_m2d * L_m2d + lambda_off * L_off`` then EMA-update the target."""
    optimizer.zero_grad(set_to_none=True)
    n = batch.x_noisy.shape[0]
    visible, masked = as_indices(plans)
    sums = torch.zeros(3, dtype=torch.float64)
    for part in split_micro(n, grad_accum_steps):
        weight = (part.stop - part.start) / n
        res = m2dx_forward(online, target, mapper, teacher, _slice_batch(batch, part),
                           (visible[part], masked[part]), cfg, variant, norm_axis)
        (res.loss_total * weight).backward()
        sums += weight * torch.tensor([res.loss_m2d.item(), res.loss_off.item(), res.loss_total.item()],
                                      dtype=torch.float64)
    l_m2d, l_off, l_total = sums.tolist()
    check_finite(step, l_m2d, l_total)
    optimizer.step()
    tau = tau_at(schedule, step)
    ema_update(target, online, tau)
    return TrainStepReport(step, l_m2d, l_off, l_total, tau)
