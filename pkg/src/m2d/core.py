"""One M2D training step: dual encoding, prediction, loss, stop-gradient and EMA."""

from dataclasses import dataclass
import math

import torch

from .errors import ConfigError, DivergenceError, DomainError, DimensionError, EmptyBatchError
from .networks import Encoder, OnlineState, TokenSequence, as_indices, ema_update, encode, filter_masked, \
    predict, standardize_target
from .patching import PatchGrid, gather_rows, make_positional_encoding, patchify

VARIANTS = ("m2d", "all_patches_to_target")
LOSS_CEILING = 4.0 + 1e-3


@dataclass(frozen=True)
class TauSchedule:
    tau_start: float = 0.99995
    tau_end: float = 0.99999
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ConfigError("tau schedule needs 0 <= tau_start <= tau_end <= 1")
        if self.total_steps < 1:
            raise ConfigError("tau schedule needs total_steps >= 1")


def tau_at(schedule: TauSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise DomainError(f"step {step} outside [0, {schedule.total_steps}]")
    if step == schedule.total_steps:
        return schedule.tau_end
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * step / schedule.total_steps


@dataclass(frozen=True)
class LRSchedule:
    """Linear warm-up followed by half-cycle cosine decay, evaluated per step."""

    lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.min_lr + (self.lr - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainStepReport:
    step: int
    loss_m2d: float
    loss_off: float
    loss_total: float
    tau_used: float


def m2d_loss(z_hat_m, z_tilde_m) -> torch.Tensor:
    """Mean over row pairs of ``2 - 2 cos(u, v)``; the target side carries no gradient."""
    u = z_hat_m.tokens if isinstance(z_hat_m, TokenSequence) else z_hat_m
    v = z_tilde_m.tokens if isinstance(z_tilde_m, TokenSequence) else z_tilde_m
    v = v.detach()
    if u.shape != v.shape:
        raise DimensionError(f"prediction {tuple(u.shape)} and target {tuple(v.shape)} differ in shape")
    if u.numel() == 0:
        raise EmptyBatchError("no masked tokens to compute the loss over")
    dot = (u * v).sum(-1)
    # sqrt(|u|^2 |v|^2) keeps the aligned / opposed cases exact
    norms = torch.sqrt(((u * u).sum(-1) * (v * v).sum(-1)).clamp_min(1e-24))
    cos = (dot / norms).clamp(-1.0, 1.0)
    return (2.0 - 2.0 * cos).mean()


@dataclass
class M2DOutput:
    loss: torch.Tensor
    grid: PatchGrid
    visible: torch.Tensor
    masked: torch.Tensor
    z_v: TokenSequence
    z_hat: TokenSequence
    z_hat_m: TokenSequence
    z_tilde_m: TokenSequence


_PE_CACHE = {}


def positional_table(grid: PatchGrid, dim: int) -> torch.Tensor:
    key = (grid, dim)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = make_positional_encoding(grid, dim)
    return _PE_CACHE[key]


def m2d_forward(online: OnlineState, target: Encoder, batch: torch.Tensor, plans,
                variant: str = "m2d", norm_axis: str = "token") -> M2DOutput:
    """Online and target paths over a (B, F, T) batch of standardized spectrograms."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = online.cfg
    grid, patches = patchify(batch, cfg.patch_f, cfg.patch_t)
    patches = patches.to(next(online.parameters()).dtype)
    pe = positional_table(grid, cfg.dim)
    visible, masked = as_indices(plans)

    z_v = encode(online, online.encoder.embed_patches(gather_rows(patches, visible), visible), pe)
    z_hat = predict(online, z_v, (visible, masked), pe)
    z_hat_m = filter_masked(z_hat, (visible, masked))

    if variant == "m2d":
        z_m = encode(target, target.embed_patches(gather_rows(patches, masked), masked), pe)
    else:
        z_all = encode(target, target.embed_patches(patches), pe)
        z_m = TokenSequence(gather_rows(z_all.tokens, masked), masked)
    # stop-gradient: the target branch only supplies a training signal
    z_tilde_m = standardize_target(TokenSequence(z_m.tokens.detach(), masked), axis=norm_axis)

    loss = m2d_loss(z_hat_m, z_tilde_m)
    return M2DOutput(loss, grid, visible, masked, z_v, z_hat, z_hat_m, z_tilde_m)


def check_finite(step: int, loss_m2d: float, loss_total: float | None = None):
    if not math.isfinite(loss_m2d) or loss_m2d > LOSS_CEILING:
        raise DivergenceError(step, loss_m2d)
    if loss_total is not None and not math.isfinite(loss_total):
        raise DivergenceError(step, loss_total)


def split_micro(n: int, accum: int):
    if accum < 1 or accum > n:
        raise ConfigError(f"grad_accum_steps={accum} incompatible with batch of {n}")
    bounds = [round(i * n / accum) for i in range(accum + 1)]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def train_step(online: OnlineState, target: Encoder, batch: torch.Tensor, plans, optimizer,
               schedule: TauSchedule, step: int, variant: str = "m2d", norm_axis: str = "token",
               grad_accum_steps: int = 1) -> TrainStepReport:
    """Gradient step on the online branch followed by the EMA update of the target.

    ``batch`` is the effective batch; it is split into ``grad_accum_steps`` micro-batches
    whose gradients are accumulated before the single optimizer step.
    """
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    n = batch.shape[0]
    visible, masked = as_indices(plans)
    for part in split_micro(n, grad_accum_steps):
        out = m2d_forward(online, target, batch[part], (visible[part], masked[part]), variant, norm_axis)
        (out.loss * ((part.stop - part.start) / n)).backward()
        total += out.loss.item() * (part.stop - part.start) / n
    check_finite(step, total)
    optimizer.step()
    tau = tau_at(schedule, step)
    ema_update(target, online, tau)
    return TrainStepReport(step, total, 0.0, total, tau)


def build_optimizer(params, lr: float, weight_decay: float = 0.05, betas=(0.9, 0.95)):
    """AdamW; biases, norms and the mask token are excluded from weight decay."""
    params = [p for p in params if p.requires_grad]
    decay = [p for p in params if p.dim() >= 2]
    no_decay = [p for p in params if p.dim() < 2]
    groups = [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=lr, betas=tuple(betas))


def set_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr
