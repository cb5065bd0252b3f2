"""Objectives with their gradients, and the P x K batch sampler.

Every loss here is a sum over the batch, not a mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedder import BatchFeatures, EmbedderConfig, backward
from .types import NOISE, ModelParams


class SamplingError(ValueError):
    pass


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.5
    P: int = 16
    K: int = 8

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must both be >= 2")


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray  # (P, K) pool positions
    labels: np.ndarray   # (P,) one label per group

    @property
    def flat_indices(self) -> np.ndarray:
        return self.indices.ravel()

    @property
    def flat_labels(self) -> np.ndarray:
        return np.repeat(self.labels, self.indices.shape[1])


def pk_sample(pool_labels, cfg: TripletConfig, rng) -> Batch:
    """Draw P distinct labels and K pool positions for each.

    Labels with fewer than K members are filled by sampling with replacement.
    ``rng`` may be a seed or a numpy Generator.
    """
    rng = np.random.default_rng(rng)
    pool_labels = np.asarray(pool_labels)
    uniq = np.unique(pool_labels)
    if len(uniq) < cfg.P:
        raise SamplingError(f"need {cfg.P} distinct labels, pool has {len(uniq)}")
    chosen = rng.choice(uniq, size=cfg.P, replace=False)
    groups = []
    for lab in chosen:
        members = np.flatnonzero(pool_labels == lab)
        groups.append(rng.choice(members, size=cfg.K, replace=len(members) < cfg.K))
    return Batch(np.array(groups, dtype=np.int64), chosen)


def pairwise_diffs(x: np.ndarray):
    diff = x[:, None, :] - x[None, :, :]
    return diff, np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def triplet_batch_hard(vectors, labels, margin: float):
    """Batch-hard triplet loss on Euclidean distances.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``vectors``. The hardest
    positive search includes the anchor itself; ties go to the lowest index.
    """
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0 or np.all(labels == labels[0]):
        raise LossInputError("triplet loss needs at least two labels in the batch")
    n = x.shape[0]
    _, dist = pairwise_diffs(x)
    same = labels[:, None] == labels[None, :]
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    rows = np.arange(n)
    d_ap, d_an = dist[rows, pos], dist[rows, neg]
    hinge = margin + d_ap - d_an
    a = rows[hinge > 0]
    loss = float(np.sum(hinge[a]))

    # w[i, j] is the coefficient of d(x_i, x_j) in the loss divided by that
    # distance; then dL/dx = (diag(rowsum + colsum) - w - w^T) x.
    # Coincident pairs get coefficient 0 (the subgradient at d = 0).
    w = np.zeros((n, n))
    c_ap = np.divide(1.0, d_ap[a], out=np.zeros(a.size), where=d_ap[a] > 0)
    c_an = np.divide(1.0, d_an[a], out=np.zeros(a.size), where=d_an[a] > 0)
    w[a, pos[a]] += c_ap
    w[a, neg[a]] -= c_an
    grad = (w.sum(axis=1) + w.sum(axis=0))[:, None] * x - (w + w.T) @ x
    return loss, grad


def softmax_ce(logits, labels):
    """Summed softmax cross-entropy; returns ``(loss, grad_logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise LossInputError(f"labels must lie in [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.sum(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


@dataclass
class Upstream:
    """Cotangents on the pooled outputs of a batch."""

    g_whole: np.ndarray
    g_parts: list
    g_embed: np.ndarray

    def __add__(self, other: "Upstream") -> "Upstream":
        return Upstream(self.g_whole + other.g_whole,
                        [a + b for a, b in zip(self.g_parts, other.g_parts)],
                        self.g_embed + other.g_embed)

    def to_params(self, feats: BatchFeatures, p: ModelParams, cfg: EmbedderConfig) -> ModelParams:
        return backward(feats, p, cfg, self.g_whole, self.g_parts, self.g_embed)


def loss_baseline(feats: BatchFeatures, labels, p: ModelParams, cfg: EmbedderConfig,
                  margin: float = 0.5):
    """Cross-entropy on the classifier logits plus batch-hard triplet on f_embed."""
    labels = np.asarray(labels)
    logits = feats.f_embed @ p.W_cls + p.b_cls
    ce, g_logits = softmax_ce(logits, labels)
    tri, g_tri = triplet_batch_hard(feats.f_embed, labels, margin)
    g_embed = g_tri + g_logits @ p.W_cls.T
    grad = backward(feats, p, cfg, g_embed=g_embed)
    grad.W_cls = feats.f_embed.T @ g_logits
    grad.b_cls = g_logits.sum(axis=0)
    return ce + tri, grad


def _term(vectors, labels, margin, skip_single_label):
    if skip_single_label and len(np.unique(labels)) < 2:
        return 0.0, np.zeros_like(vectors)
    return triplet_batch_hard(vectors, labels, margin)


def _view_triplets(feats: BatchFeatures, y_whole, y_parts, margin, skip_single_label, name):
    y_whole = np.asarray(y_whole)
    if len(y_parts) != len(feats.f_parts):
        raise LossInputError(f"{name}: expected {len(feats.f_parts)} part label columns, got {len(y_parts)}")
    for col in (y_whole, *y_parts):
        if np.any(np.asarray(col) == NOISE):
            raise LossInputError(f"{name}: batch contains noise-labelled samples")
    loss, g_whole = _term(feats.f_whole, y_whole, margin, skip_single_label)
    g_parts = []
    for f, y in zip(feats.f_parts, y_parts):
        lp, gp = _term(f, np.asarray(y), margin, skip_single_label)
        loss += lp
        g_parts.append(gp)
    le, g_embed = _term(feats.f_embed, y_whole, margin, skip_single_label)
    return loss + le, Upstream(g_whole, g_parts, g_embed)


def loss_ssg(feats: BatchFeatures, y_whole, y_parts, margin: float = 0.5,
             skip_single_label: bool = False):
    """Self-similarity grouping objective: one triplet term per view.

    Terms: whole-map vector, each part vector, and the embedding (sharing the
    whole-view labels), i.e. ``part_count + 2`` terms. With ``skip_single_label``
    a view whose batch labels are all equal contributes zero instead of raising.
    """
    return _view_triplets(feats, y_whole, y_parts, margin, skip_single_label, "loss_ssg")


def loss_semi(feats: BatchFeatures, y_whole, y_parts, margin: float = 0.5,
              skip_single_label: bool = False):
    """Same structure as :func:`loss_ssg`, fed with dictionary-assigned labels."""
    return _view_triplets(feats, y_whole, y_parts, margin, skip_single_label, "loss_semi")


def loss_jointly(ssg_feats, ssg_labels, semi_feats, semi_labels, margin: float = 0.5,
                 skip_single_label: bool = False):
    """Sum of the grouping and assignment objectives.

    ``*_labels`` are ``(y_whole, y_parts)`` pairs. Returns the total loss and the
    two upstream cotangents, one per batch.
    """
    l1, up1 = loss_ssg(ssg_feats, *ssg_labels, margin=margin, skip_single_label=skip_single_label)
    l2, up2 = loss_semi(semi_feats, *semi_labels, margin=margin, skip_single_label=skip_single_label)
    return l1 + l2, (up1, up2)


def concat_upstream(ups) -> Upstream:
    """Stack cotangents of consecutive sub-batches into one for the joined batch."""
    return Upstream(np.vstack([u.g_whole for u in ups]),
                    [np.vstack(cols) for cols in zip(*(u.g_parts for u in ups))],
                    np.vstack([u.g_embed for u in ups]))


def triplet_term_count(part_count: int) -> int:
    return part_count + 2
