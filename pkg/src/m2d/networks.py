"""ViT-style encoder shared by the online and target branches, the predictor and EMA coupling."""

from dataclasses import dataclass
import copy
from typing import Optional

import torch
from torch import nn

from .errors import ConfigError, ConsistencyError, DimensionError
from .patching import MaskPlan, PatchGrid, TokenSequence, embed_patches, gather_rows, plan_indices


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_f: int = 16
    patch_t: int = 16
    n_freq: int = 80
    input_frames: int = 608
    pred_depth: int = 2
    pred_dim: Optional[int] = None
    pred_heads: Optional[int] = None

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("encoder.depth must be >= 0")
        if self.dim % 4:
            raise ConfigError(f"encoder.dim must be divisible by 4, got {self.dim}")
        if self.dim % self.heads:
            raise ConfigError(f"encoder.dim={self.dim} not divisible by heads={self.heads}")
        if self.predictor_dim % self.predictor_heads:
            raise ConfigError(
                f"encoder.pred_dim={self.predictor_dim} not divisible by pred_heads={self.predictor_heads}")
        # raises TilingError for a bad patch size
        self.grid

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_input(self.n_freq, self.input_frames, self.patch_f, self.patch_t)

    @property
    def predictor_dim(self) -> int:
        return self.pred_dim if self.pred_dim is not None else self.dim // 2

    @property
    def predictor_heads(self) -> int:
        return self.pred_heads if self.pred_heads is not None else self.heads


def init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, n, D = x.shape
        qkv = self.qkv(x).reshape(B, n, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        x = attn.softmax(dim=-1) @ v
        return self.proj(x.transpose(1, 2).reshape(B, n, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """Patch embedding plus transformer blocks; used for both the online and the target branch.

    A zero-depth encoder (tests only) is a pure passthrough of ``tokens + pe``.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.patch_f * cfg.patch_t, cfg.dim)
        self.blocks = nn.ModuleList([Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dim) if cfg.depth else nn.Identity()
        self.apply(init_weights)

    def embed_patches(self, patches, positions=None) -> TokenSequence:
        return embed_patches(patches, self.embed.weight.T, self.embed.bias, positions)

    def forward(self, tokens, positions, pe, layer=None):
        """Encode ``tokens`` (B, n, D) sitting at grid ``positions`` (B, n).

        ``layer=k`` returns the output of block k (1-based) instead of the final norm.
        """
        if tokens.shape[-1] != self.cfg.dim:
            raise DimensionError(f"token width {tokens.shape[-1]} != encoder dim {self.cfg.dim}")
        if pe.shape[-1] != self.cfg.dim:
            raise DimensionError(f"positional encoding width {pe.shape[-1]} != encoder dim {self.cfg.dim}")
        x = tokens + pe.to(tokens.dtype)[positions]
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if layer == i:
                return x
        return self.norm(x)


class Predictor(nn.Module):
    """Narrow transformer mapping the length-N token sequence back to encoder width.

    With depth 0 (tests only) it is the identity.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.pred_depth == 0:
            self.in_proj, self.out_proj, self.norm = nn.Identity(), nn.Identity(), nn.Identity()
            self.blocks = nn.ModuleList()
        else:
            width = cfg.predictor_dim
            self.in_proj = nn.Linear(cfg.dim, width)
            self.blocks = nn.ModuleList(
                [Block(width, cfg.predictor_heads, cfg.mlp_ratio) for _ in range(cfg.pred_depth)])
            self.norm = nn.LayerNorm(width)
            self.out_proj = nn.Linear(width, cfg.dim)
        self.apply(init_weights)

    def forward(self, x):
        x = self.in_proj(x)
        for block in self.blocks:
            x = block(x)
        return self.out_proj(self.norm(x))


class OnlineState(nn.Module):
    """Trainable branch: encoder, shared mask token and predictor."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.mask_token = nn.Parameter(torch.empty(cfg.dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.predictor = Predictor(cfg)


def make_target(online: OnlineState) -> Encoder:
    """Momentum encoder initialised as an exact copy of the online encoder."""
    target = copy.deepcopy(online.encoder)
    target.requires_grad_(False)
    return target


def _encoder_of(state) -> Encoder:
    return state.encoder if isinstance(state, OnlineState) else state


def encode(state, tokens: TokenSequence, pe: torch.Tensor, layer=None) -> TokenSequence:
    out = _encoder_of(state)(tokens.tokens, tokens.positions, pe, layer=layer)
    return TokenSequence(out, tokens.positions)


def as_indices(plans):
    if isinstance(plans, tuple) and len(plans) == 2 and isinstance(plans[0], torch.Tensor):
        return plans
    if isinstance(plans, MaskPlan):
        plans = [plans]
    return plan_indices(plans)


def predict(online: OnlineState, z_v: TokenSequence, plans, pe: torch.Tensor) -> TokenSequence:
    """Place z_v and mask tokens in patch order, add ``pe`` and run the predictor over all N."""
    visible, _ = as_indices(plans)
    if z_v.positions.shape != visible.shape or not torch.equal(z_v.positions, visible):
        raise ConsistencyError("z_v positions do not match the mask plan's visible indices")
    B, _, D = z_v.tokens.shape
    n_patches = pe.shape[0]
    full = online.mask_token.to(z_v.tokens.dtype).expand(B, n_patches, D)
    full = full.scatter(1, visible.unsqueeze(-1).expand(-1, -1, D), z_v.tokens)
    z_hat = online.predictor(full + pe.to(full.dtype))
    return TokenSequence(z_hat, torch.arange(n_patches).expand(B, -1))


def filter_masked(z_hat: TokenSequence, plans) -> TokenSequence:
    _, masked = as_indices(plans)
    return TokenSequence(gather_rows(z_hat.tokens, masked), masked)


def scatter_tokens(parts, n_patches: int) -> TokenSequence:
    """Merge token sequences into one ordered by patch index; they must cover 0..N-1 exactly."""
    positions = torch.cat([p.positions for p in parts], dim=1)
    tokens = torch.cat([p.tokens for p in parts], dim=1)
    expected = torch.arange(n_patches).expand(positions.shape[0], -1)
    order = positions.argsort(dim=1)
    if positions.shape[1] != n_patches or not torch.equal(positions.gather(1, order), expected):
        raise ConsistencyError(f"token sequences do not cover the {n_patches} patch positions exactly once")
    return TokenSequence(gather_rows(tokens, order), expected)


@torch.no_grad()
def ema_update(target: Encoder, online, tau: float) -> Encoder:
    """``p_target <- tau * p_target + (1 - tau) * p_online`` for the encoder parameters."""
    source = dict(_encoder_of(online).named_parameters())
    params = dict(target.named_parameters())
    if source.keys() != params.keys():
        raise ConsistencyError("target and online encoders have different parameter sets")
    for name, p in params.items():
        q = source[name]
        if p.shape != q.shape:
            raise ConsistencyError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(q.shape)}")
        p.mul_(tau).add_(q, alpha=1.0 - tau)
    return target


def standardize_target(z_m, axis: str = "token", eps: float = 1e-6):
    """Standardize target tokens per token over features (``axis="token"``) or per item over
    the whole masked set (``axis="all"``)."""
    x = z_m.tokens if isinstance(z_m, TokenSequence) else z_m
    if x.numel() == 0:
        raise DimensionError("cannot standardize an empty token set")
    dims = {"token": (-1,), "all": (-2, -1)}.get(axis)
    if dims is None:
        raise ConfigError(f"unknown target normalization axis {axis!r}")
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, keepdim=True, unbiased=False)
    out = (x - mean) / torch.sqrt(var + eps)
    return TokenSequence(out, z_m.positions) if isinstance(z_m, TokenSequence) else out
