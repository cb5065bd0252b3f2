"""Patch-grid embedder: per-patch linear map + tanh, part-split GAP, global embedding.

All batch routines work on stacked grids of shape (N, H_p, W_p, D_in).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .types import FeatureViews, ModelParams, Sample


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    part_count: int = 2
    height: int = 4
    width: int = 2
    d_in: int = 16
    channels: int = 32
    embed_dim: int = 32

    def __post_init__(self):
        if self.part_count < 1:
            raise ConfigurationError("part_count must be >= 1")
        if self.height % self.part_count:
            raise ConfigurationError(
                f"H_p={self.height} is not divisible by part_count={self.part_count}")

    def bands(self):
        step = self.height // self.part_count
        return [(j * step, (j + 1) * step) for j in range(self.part_count)]


@dataclass
class BatchFeatures:
    """Array form of a batch of FeatureViews, plus the cache backward needs."""

    grids: np.ndarray   # (N, H, W, D_in)
    map: np.ndarray     # (N, H, W, C)
    f_whole: np.ndarray  # (N, C)
    f_parts: list       # part_count arrays of (N, C)
    f_embed: np.ndarray  # (N, C_e)

    def __len__(self):
        return self.f_whole.shape[0]

    def rows(self, sel) -> "BatchFeatures":
        return BatchFeatures(self.grids[sel], self.map[sel], self.f_whole[sel],
                             [f[sel] for f in self.f_parts], self.f_embed[sel])

    def views(self, i) -> FeatureViews:
        return FeatureViews(self.map[i], self.f_whole[i],
                            tuple(f[i] for f in self.f_parts), self.f_embed[i])


def _check_shapes(grids: np.ndarray, p: ModelParams, cfg: EmbedderConfig):
    expected = (cfg.height, cfg.width, cfg.d_in)
    if grids.ndim != 4 or grids.shape[1:] != expected:
        raise ConfigurationError(f"patch grid shape {grids.shape[1:]} != {expected}")
    if p.W_emb.shape != (cfg.d_in, cfg.channels) or p.b_emb.shape != (cfg.channels,):
        raise ConfigurationError("embedding weights do not match (D_in, C)")
    if p.W_fc.shape != (cfg.channels, cfg.embed_dim) or p.b_fc.shape != (cfg.embed_dim,):
        raise ConfigurationError("FC weights do not match (C, C_e)")


def as_grids(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch.astype(np.float64, copy=False)
    if len(batch) == 0:
        return np.zeros((0, 0, 0, 0))
    return np.stack([s.patch_grid for s in batch])


def embed_grids(grids: np.ndarray, p: ModelParams, cfg: EmbedderConfig) -> BatchFeatures:
    grids = as_grids(grids)
    _check_shapes(grids, p, cfg)
    fmap = np.tanh(grids @ p.W_emb + p.b_emb)
    f_whole = fmap.mean(axis=(1, 2))
    f_parts = [fmap[:, lo:hi].mean(axis=(1, 2)) for lo, hi in cfg.bands()]
    f_embed = f_whole @ p.W_fc + p.b_fc
    return BatchFeatures(grids, fmap, f_whole, f_parts, f_embed)


def forward(s: Sample, p: ModelParams, cfg: EmbedderConfig) -> FeatureViews:
    return embed_grids(s.patch_grid[None], p, cfg).views(0)


def forward_batch(samples: Sequence[Sample], p: ModelParams, cfg: EmbedderConfig) -> list:
    if len(samples) == 0:
        return []
    feats = embed_grids(as_grids(samples), p, cfg)
    return [feats.views(i) for i in range(len(feats))]


def backward(batch, p: ModelParams, cfg: EmbedderConfig,
             g_whole=None, g_parts=None, g_embed=None) -> ModelParams:
    """Parameter gradient of sum(upstream * outputs) for a batch.

    ``batch`` is either a BatchFeatures from :func:`embed_grids` (reuses its cache)
    or anything :func:`as_grids` accepts. Missing cotangents count as zero.
    The classifier entries of the result are always zero.
    """
    feats = batch if isinstance(batch, BatchFeatures) else embed_grids(batch, p, cfg)
    n = len(feats)
    h, w = cfg.height, cfg.width
    grad = ModelParams.zeros_like(p)

    g_whole = np.zeros((n, cfg.channels)) if g_whole is None else np.array(g_whole, dtype=np.float64)
    if g_whole.shape != (n, cfg.channels):
        raise ConfigurationError(f"f_whole cotangent shape {g_whole.shape} != {(n, cfg.channels)}")
    if g_embed is not None:
        g_embed = np.asarray(g_embed, dtype=np.float64)
        if g_embed.shape != (n, cfg.embed_dim):
            raise ConfigurationError(f"f_embed cotangent shape {g_embed.shape} != {(n, cfg.embed_dim)}")
        grad.W_fc = feats.f_whole.T @ g_embed
        grad.b_fc = g_embed.sum(axis=0)
        g_whole = g_whole + g_embed @ p.W_fc.T

    # cotangent on the spatial map: GAP spreads each pooled gradient uniformly
    g_map = np.broadcast_to((g_whole / (h * w))[:, None, None, :], feats.map.shape).copy()
    if g_parts is not None:
        if len(g_parts) != cfg.part_count:
            raise ConfigurationError(f"expected {cfg.part_count} part cotangents, got {len(g_parts)}")
        for (lo, hi), g in zip(cfg.bands(), g_parts):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != (n, cfg.channels):
                raise ConfigurationError(f"part cotangent shape {g.shape} != {(n, cfg.channels)}")
            g_map[:, lo:hi] += (g / ((hi - lo) * w))[:, None, None, :]

    g_pre = g_map * (1.0 - feats.map ** 2)
    grad.W_emb = feats.grids.reshape(-1, cfg.d_in).T @ g_pre.reshape(-1, cfg.channels)
    grad.b_emb = g_pre.sum(axis=(0, 1, 2))
    return grad
