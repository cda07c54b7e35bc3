"""Patch grids, patch embedding, 2-D sincos positional encoding and mask sampling.

Patch indices are frequency-major: grid cell ``(f, t)`` has index ``f * n_t + t``.
"""

from dataclasses import dataclass
import math
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ConsistencyError, DimensionError, TilingError


@dataclass(frozen=True)
class PatchGrid:
    patch_f: int
    patch_t: int
    n_f: int
    n_t: int

    def __post_init__(self):
        if min(self.patch_f, self.patch_t, self.n_f, self.n_t) <= 0:
            raise ConfigError(f"degenerate patch grid {self}")

    @classmethod
    def for_input(cls, n_freq: int, n_time: int, patch_f: int, patch_t: int) -> "PatchGrid":
        if n_freq % patch_f:
            raise TilingError(f"frequency axis: {n_freq} bins not divisible by patch_f={patch_f}")
        if n_time % patch_t:
            raise TilingError(f"time axis: {n_time} frames not divisible by patch_t={patch_t}")
        return cls(patch_f, patch_t, n_freq // patch_f, n_time // patch_t)

    @property
    def n_patches(self) -> int:
        return self.n_f * self.n_t

    @property
    def patch_size(self) -> int:
        return self.patch_f * self.patch_t


@dataclass(frozen=True)
class MaskPlan:
    visible: tuple
    masked: tuple
    ratio: float

    def __post_init__(self):
        vis, msk = list(self.visible), list(self.masked)
        n = len(vis) + len(msk)
        if sorted(vis + msk) != list(range(n)):
            raise ConsistencyError("visible and masked must partition 0..N-1")
        if vis != sorted(vis) or msk != sorted(msk):
            raise ConsistencyError("mask plan index lists must be sorted")

    @property
    def n_patches(self) -> int:
        return len(self.visible) + len(self.masked)


@dataclass
class TokenSequence:
    """Tokens of shape (B, n, D) with their patch positions of shape (B, n)."""

    tokens: torch.Tensor
    positions: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() != 3 or self.positions.dim() != 2:
            raise DimensionError(
                f"expected tokens (B, n, D) and positions (B, n), got {tuple(self.tokens.shape)} "
                f"and {tuple(self.positions.shape)}")
        if self.tokens.shape[:2] != self.positions.shape:
            raise DimensionError("tokens and positions disagree on (B, n)")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def __len__(self):
        return self.tokens.shape[1]


def patchify(spec, patch_f: int, patch_t: int):
    """Split ``(..., F, T)`` spectrogram(s) into a grid of non-overlapping patches.

    Returns ``(grid, patches)`` with patches of shape ``(..., N, patch_f * patch_t)``;
    each row is the row-major flattening of one grid cell.
    """
    data = spec.data if hasattr(spec, "config") else spec
    x = torch.as_tensor(data)
    *lead, n_freq, n_time = x.shape
    grid = PatchGrid.for_input(n_freq, n_time, patch_f, patch_t)
    x = x.reshape(*lead, grid.n_f, patch_f, grid.n_t, patch_t)
    x = x.transpose(-3, -2)
    return grid, x.reshape(*lead, grid.n_patches, grid.patch_size)


def unpatchify(patches: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    *lead, n, p = patches.shape
    if n != grid.n_patches or p != grid.patch_size:
        raise DimensionError(f"patches {tuple(patches.shape)} do not match grid {grid}")
    x = patches.reshape(*lead, grid.n_f, grid.n_t, grid.patch_f, grid.patch_t).transpose(-3, -2)
    return x.reshape(*lead, grid.n_f * grid.patch_f, grid.n_t * grid.patch_t)


def embed_patches(patches: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                  positions: torch.Tensor | None = None) -> TokenSequence:
    """Linear patch embedding ``patches @ weight + bias`` with weight of shape (P, D)."""
    if patches.shape[-1] != weight.shape[0]:
        raise DimensionError(f"patch width {patches.shape[-1]} != embedding input width {weight.shape[0]}")
    if patches.dim() == 2:
        patches = patches.unsqueeze(0)
    tokens = patches @ weight + bias
    if positions is None:
        positions = torch.arange(tokens.shape[1]).expand(tokens.shape[0], -1)
    return TokenSequence(tokens, positions)


def sincos_1d(dim: int, positions) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000**omega
    out = np.outer(np.asarray(positions, dtype=np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def make_positional_encoding(grid: PatchGrid, dim: int) -> torch.Tensor:
    """Fixed (N, dim) table: half the width codes the frequency row, half the time column."""
    if dim % 4:
        raise ConfigError(f"positional encoding width must be divisible by 4, got {dim}")
    f_idx, t_idx = np.divmod(np.arange(grid.n_patches), grid.n_t)
    pe = np.concatenate([sincos_1d(dim // 2, f_idx), sincos_1d(dim // 2, t_idx)], axis=1)
    return torch.from_numpy(pe).float()


def visible_count(n_patches: int, ratio: float) -> int:
    # floor(N * (1 - ratio)), robust to binary rounding of e.g. 190 * 0.3
    return int(math.floor(round(n_patches * (1.0 - ratio), 9)))


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_patches < 2:
        raise ConfigError("need at least two patches to mask")
    n_visible = visible_count(n_patches, ratio)
    if n_visible == 0 or n_visible == n_patches:
        raise ConfigError(f"ratio {ratio} on {n_patches} patches leaves an empty visible or masked set")
    order = rng.permutation(n_patches)
    return MaskPlan(tuple(sorted(order[:n_visible].tolist())), tuple(sorted(order[n_visible:].tolist())), ratio)


def plan_indices(plans: Sequence[MaskPlan]):
    """Stack per-item plans into (B, n_visible) and (B, n_masked) index tensors."""
    if not plans:
        raise ConsistencyError("empty list of mask plans")
    sizes = {(len(p.visible), len(p.masked)) for p in plans}
    if len(sizes) != 1:
        raise ConsistencyError(f"mask plans in one batch must share split sizes, got {sorted(sizes)}")
    visible = torch.tensor([p.visible for p in plans], dtype=torch.long).reshape(len(plans), -1)
    masked = torch.tensor([p.masked for p in plans], dtype=torch.long).reshape(len(plans), -1)
    return visible, masked


def gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """``x[b, index[b, i]]`` for x of shape (B, N, ...) and index of shape (B, n)."""
    expanded = index.reshape(*index.shape, *([1] * (x.dim() - 2))).expand(*index.shape, *x.shape[2:])
    return torch.gather(x, 1, expanded)
