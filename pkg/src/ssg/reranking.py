"""Euclidean distances and the k-reciprocal encoding Jaccard distance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .types import DistanceMatrix


@dataclass(frozen=True)
class KReciprocalConfig:
    k1: int = 20
    k2: Optional[int] = None  # None -> round(k1 / 2)
    lam: float = 0.0
    auto_scale: bool = True   # shrink k1 to n // 3 on small sets

    def __post_init__(self):
        if self.k1 < 1:
            raise ValueError("k1 must be >= 1")
        if self.k2 is not None and not 1 <= self.k2 <= self.k1:
            raise ValueError("k2 must satisfy 1 <= k2 <= k1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")

    def effective(self, n: int) -> tuple:
        """(k1, k2) actually used on a set of n points."""
        k1 = min(self.k1, n // 3) if self.auto_scale else self.k1
        k2 = max(1, int(np.around(k1 / 2.0))) if self.k2 is None else self.k2
        return k1, min(k2, k1)


def pairwise_euclidean(vectors, chunk: int = 64) -> DistanceMatrix:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be a 2-D array of equal-length rows")
    n = x.shape[0]
    d = np.empty((n, n))
    # explicit differences: the |a|^2 + |b|^2 - 2ab expansion loses precision
    for lo in range(0, n, chunk):
        diff = x[lo:lo + chunk, None, :] - x[None, :, :]
        d[lo:lo + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, "euclidean")


def neighbor_ranking(d: np.ndarray) -> np.ndarray:
    """Row-wise ranking with the point itself first, then (distance, index) order."""
    keyed = d.copy()
    np.fill_diagonal(keyed, -np.inf)
    return np.argsort(keyed, axis=1, kind="stable")


def reciprocal_sets(rank: np.ndarray, k: int) -> list:
    """R(p, k): members of p's k-neighborhood (self included) whose own k-neighborhood contains p."""
    n = rank.shape[0]
    member = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k + 1)
    member[rows, rank[:, :k + 1].ravel()] = True
    mutual = member & member.T
    return [np.flatnonzero(mutual[p]) for p in range(n)]


def expanded_sets(rank: np.ndarray, k1: int, k2: int) -> list:
    r1 = reciprocal_sets(rank, k1)
    r2 = reciprocal_sets(rank, k2)
    out = []
    for p in range(rank.shape[0]):
        base = set(r1[p].tolist())
        expanded = set(base)
        for q in r1[p]:
            cand = r2[q]
            # |R(q,k2) & R(p,k1)| >= 2/3 |R(q,k2)|, in integers
            if 3 * len(base.intersection(cand.tolist())) >= 2 * len(cand):
                expanded.update(cand.tolist())
        out.append(np.array(sorted(expanded), dtype=np.int64))
    return out


def encoding_weights(d: np.ndarray, k1: int, k2: int) -> np.ndarray:
    rank = neighbor_ranking(d)
    sets = expanded_sets(rank, k1, k2)
    w = np.zeros_like(d)
    for p, members in enumerate(sets):
        w[p, members] = np.exp(-d[p, members])
    return w


def jaccard_from_weights(w: np.ndarray) -> np.ndarray:
    n = w.shape[0]
    mass = w.sum(axis=1)
    inter = np.empty((n, n))
    support = [np.flatnonzero(row) for row in w]
    for i in range(n):
        inter[i] = np.minimum(w[i, support[i]][None, :], w[:, support[i]]).sum(axis=1)
    union = mass[:, None] + mass[None, :] - inter
    dj = 1.0 - inter / union
    dj = 0.5 * (dj + dj.T)
    np.fill_diagonal(dj, 0.0)
    return np.clip(dj, 0.0, 1.0)


def k_reciprocal_jaccard(d_euclid: DistanceMatrix, cfg: KReciprocalConfig = KReciprocalConfig()) -> DistanceMatrix:
    """Weighted Jaccard distance between k-reciprocal expanded neighbor sets.

    With ``lam > 0`` the result is blended with the max-normalized Euclidean distance.
    """
    d = np.asarray(d_euclid.values if isinstance(d_euclid, DistanceMatrix) else d_euclid,
                   dtype=np.float64)
    n = d.shape[0]
    k1, k2 = cfg.effective(n)
    if k1 < 1 or n <= k1:
        raise ValueError(f"k-reciprocal encoding needs n > k1 >= 1 (n={n}, k1={k1})")
    dj = jaccard_from_weights(encoding_weights(d, k1, k2))
    if cfg.lam > 0:
        top = d.max()
        dn = d / top if top > 0 else d
        dj = cfg.lam * dn + (1.0 - cfg.lam) * dj
        np.fill_diagonal(dj, 0.0)
    return DistanceMatrix(dj, "jaccard")


def nearest_dictionary_assign(targets, dictionary, cfg: KReciprocalConfig = KReciprocalConfig(),
                              metric: str = "jaccard"):
    """Index of the closest dictionary entry for each target vector.

    The Jaccard distance is computed on the joint set (targets then dictionary).
    Falls back to Euclidean when the joint set is too small for k1.
    Returns ``(indices, distances)``.
    """
    t = np.asarray(targets, dtype=np.float64)
    g = np.asarray(dictionary, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("dictionary is empty")
    nt = t.shape[0]
    joint = np.vstack([t, g])
    d = pairwise_euclidean(joint).values
    k1, _ = cfg.effective(joint.shape[0])
    if metric == "jaccard" and k1 >= 1 and joint.shape[0] > k1:
        d = k_reciprocal_jaccard(DistanceMatrix(d), cfg).values
    block = d[:nt, nt:]
    idx = np.argmin(block, axis=1)
    return idx, block[np.arange(nt), idx]
