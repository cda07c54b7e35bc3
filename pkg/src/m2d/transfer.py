"""Feature extraction from a trained encoder: per-frame reshape, pooling, chunking, PE interpolation."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import DimensionError
from .networks import Encoder, OnlineState, TokenSequence
from .patching import PatchGrid, make_positional_encoding, patchify


@dataclass
class FrameFeatures:
    data: torch.Tensor  # (B, N_T, N_F * D)
    frames_per_second: Optional[float] = None


@dataclass
class ClipFeature:
    data: torch.Tensor  # (B, N_F * D)


def reshape_timeframe(z, grid: PatchGrid, frames_per_second=None) -> FrameFeatures:
    """(B, N_F * N_T, D) frequency-major tokens -> (B, N_T, N_F * D) per-frame features.

    ``out[b, t, f * D + d] == z[b, f * N_T + t, d]``.
    """
    x = z.tokens if isinstance(z, TokenSequence) else z
    if x.dim() != 3 or x.shape[1] != grid.n_patches:
        raise DimensionError(f"expected (B, {grid.n_patches}, D) tokens for grid {grid}, got {tuple(x.shape)}")
    B, _, D = x.shape
    out = x.reshape(B, grid.n_f, grid.n_t, D).transpose(1, 2).reshape(B, grid.n_t, grid.n_f * D)
    return FrameFeatures(out, frames_per_second)


def inverse_reshape_timeframe(frames, grid: PatchGrid) -> torch.Tensor:
    x = frames.data if isinstance(frames, FrameFeatures) else frames
    B, n_t, width = x.shape
    if n_t != grid.n_t or width % grid.n_f:
        raise DimensionError(f"frame features {tuple(x.shape)} do not match grid {grid}")
    D = width // grid.n_f
    return x.reshape(B, grid.n_t, grid.n_f, D).transpose(1, 2).reshape(B, grid.n_patches, D)


def clip_feature(frames) -> ClipFeature:
    x = frames.data if isinstance(frames, FrameFeatures) else frames
    if x.shape[1] < 1:
        raise DimensionError("need at least one frame to pool")
    return ClipFeature(x.mean(dim=1))


def encode_all(encoder, spec_batch: torch.Tensor, pe: Optional[torch.Tensor] = None, layer=None) -> FrameFeatures:
    """Encode (B, F, T) inputs with every patch visible and return per-frame features."""
    enc = encoder.encoder if isinstance(encoder, OnlineState) else encoder
    cfg = enc.cfg
    grid, patches = patchify(spec_batch, cfg.patch_f, cfg.patch_t)
    if pe is None:
        pe = make_positional_encoding(grid, cfg.dim)
    patches = patches.to(enc.embed.weight.dtype)
    tokens = enc.embed_patches(patches)
    z = enc(tokens.tokens, tokens.positions, pe, layer=layer)
    return reshape_timeframe(z, grid)


@torch.no_grad()
def encode_chunked(encoder, audio, chunk_frames: Optional[int] = None, pad_value: float = 0.0) -> FrameFeatures:
    """Split ``audio`` ((F, T) or (B, F, T), standardized) into model-length chunks, encode each
    independently and concatenate the per-frame features along time.

    The tail is padded with ``pad_value`` (the dataset mean, 0 after standardization).
    """
    enc = encoder.encoder if isinstance(encoder, OnlineState) else encoder
    cfg = enc.cfg
    chunk_frames = chunk_frames or cfg.input_frames
    data = audio.data if hasattr(audio, "config") else audio
    x = torch.as_tensor(np.asarray(data) if not isinstance(data, torch.Tensor) else data)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    n_chunks = max(1, -(-x.shape[-1] // chunk_frames))
    pad = n_chunks * chunk_frames - x.shape[-1]
    if pad:
        x = torch.nn.functional.pad(x, (0, pad), value=pad_value)
    grid = PatchGrid.for_input(x.shape[1], chunk_frames, cfg.patch_f, cfg.patch_t)
    pe = make_positional_encoding(grid, cfg.dim)
    pieces = [encode_all(enc, x[..., i * chunk_frames:(i + 1) * chunk_frames], pe).data for i in range(n_chunks)]
    return FrameFeatures(torch.cat(pieces, dim=1))


def interpolate_pe(pe: torch.Tensor, grid: PatchGrid, new_n_t: int) -> torch.Tensor:
    """Linearly resample the time axis of an (n_f * n_t, D) positional table to ``new_n_t`` columns."""
    if pe.shape[0] != grid.n_patches:
        raise DimensionError(f"positional table has {pe.shape[0]} rows, grid {grid} needs {grid.n_patches}")
    if new_n_t < 1:
        raise DimensionError("new_n_t must be >= 1")
    if new_n_t == grid.n_t:
        return pe.clone()
    table = pe.reshape(grid.n_f, grid.n_t, -1)
    if new_n_t == 1:
        src = torch.tensor([(grid.n_t - 1) / 2.0], dtype=torch.float64)
    else:
        src = torch.linspace(0, grid.n_t - 1, new_n_t, dtype=torch.float64)
    lo = src.floor().long().clamp(max=grid.n_t - 1)
    hi = (lo + 1).clamp(max=grid.n_t - 1)
    w = (src - lo).to(pe.dtype).reshape(1, -1, 1)
    out = table[:, lo] * (1 - w) + table[:, hi] * w
    return out.reshape(grid.n_f * new_n_t, -1)
