"""Density clustering of each feature view and the per-view self-label table."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .types import NOISE, DistanceMatrix, LabelTable


@dataclass(frozen=True)
class DbscanConfig:
    eps: Optional[float] = None  # None -> auto from rho
    min_pts: int = 4
    rho: float = 1.6e-3
    metric: str = "jaccard"      # distance fed to clustering: jaccard | euclidean

    def __post_init__(self):
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")
        if self.eps is None and not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1) for automatic eps")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.metric not in ("jaccard", "euclidean"):
            raise ValueError(f"unknown clustering metric {self.metric!r}")


def _values(d) -> np.ndarray:
    return np.asarray(d.values if isinstance(d, DistanceMatrix) else d, dtype=np.float64)


def select_eps(d, rho: float) -> float:
    """Mean of the smallest ceil(rho * n(n-1)/2) pairwise distances."""
    v = _values(d)
    n = v.shape[0]
    if n < 2:
        raise ValueError("select_eps needs at least two points")
    upper = v[np.triu_indices(n, k=1)]
    m = max(1, math.ceil(rho * upper.size - 1e-9))
    return float(np.sort(upper)[:m].mean())


def dbscan(d, cfg: DbscanConfig = DbscanConfig()) -> np.ndarray:
    """Label each point with a cluster id (0..G-1) or -1 for noise.

    Core points have at least ``min_pts`` points (self included) within eps.
    Clusters are connected components of core points; a border point joins the
    cluster of its lowest-index core neighbor. Ids follow first appearance.
    """
    v = _values(d)
    n = v.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    eps = cfg.eps if cfg.eps is not None else select_eps(v, cfg.rho)
    within = v <= eps
    core = within.sum(axis=1) >= cfg.min_pts
    labels = np.full(n, NOISE, dtype=np.int64)
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return labels
    sub = within[np.ix_(core_idx, core_idx)]
    _, comp = connected_components(csr_matrix(sub), directed=False)
    labels[core_idx] = comp
    for i in np.flatnonzero(~core):
        reach = np.flatnonzero(within[i] & core)
        if reach.size:
            labels[i] = labels[reach[0]]
    return relabel_first_appearance(labels)


def relabel_first_appearance(labels) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.full(labels.shape, NOISE, dtype=np.int64)
    mapping = {}
    for i, lab in enumerate(labels):
        if lab == NOISE:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def build_label_table(views: Sequence, cfg: DbscanConfig = DbscanConfig(),
                      sample_ids=None, threads: int = 1) -> LabelTable:
    """Cluster each view independently; first matrix is the whole view, the rest are parts."""
    if len(views) < 1:
        raise ValueError("need at least the whole-view distance matrix")
    sizes = {_values(v).shape[0] for v in views}
    if len(sizes) != 1:
        raise ValueError(f"views disagree on the number of samples: {sorted(sizes)}")
    n = sizes.pop()
    if threads > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(lambda v: dbscan(v, cfg), views))
    else:
        cols = [dbscan(v, cfg) for v in views]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    return LabelTable(ids, cols[0], tuple(cols[1:]))


def cluster_stats(table: LabelTable) -> dict:
    clusters = [int(c.max() + 1) if c.size and c.max() >= 0 else 0 for c in table.columns]
    noise = [int(np.sum(c == NOISE)) for c in table.columns]
    return {"clusters_per_view": clusters, "noise_per_view": noise}
