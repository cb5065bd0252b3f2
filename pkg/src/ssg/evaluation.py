"""Single-query retrieval evaluation: CMC curve and mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .embedder import EmbedderConfig, embed_grids
from .types import UNKNOWN_IDENTITY, Dataset, ModelParams

REPORT_RANKS = (1, 5, 10, 20)


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalResult:
    rankings: np.ndarray  # (Q, G) gallery indices, nearest first
    ap: np.ndarray        # per-query AP, nan when the query has no valid match
    cmc: np.ndarray       # (R,) CMC@1..R over valid queries
    mAP: float

    @property
    def num_queries(self) -> int:
        return len(self.ap)

    @property
    def num_valid_queries(self) -> int:
        return int(np.sum(~np.isnan(self.ap)))

    def rank(self, r: int) -> float:
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def metrics(self) -> dict:
        ranks = [r for r in REPORT_RANKS]
        return {
            "mAP": float(self.mAP),
            "cmc": [self.rank(r) for r in ranks],
            "cmc_ranks": ranks,
            "num_queries": self.num_queries,
            "num_valid_queries": self.num_valid_queries,
        }

    def to_json(self) -> str:
        return json.dumps(self.metrics(), sort_keys=True)


def test_features(params: ModelParams, dataset: Dataset, cfg: EmbedderConfig) -> np.ndarray:
    """Concatenate [f_whole, f_part0, ..., f_part{n-1}] per sample."""
    feats = embed_grids(dataset.grids(), params, cfg)
    return np.hstack([feats.f_whole, *feats.f_parts])


test_features.__test__ = False  # not a pytest test despite the name


def query_distances(qf: np.ndarray, gf: np.ndarray) -> np.ndarray:
    diff = qf[:, None, :] - gf[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def rank_gallery(qvec, q_identity, q_camera, gallery_vecs, g_identities, g_cameras):
    """Rank the gallery by distance to one query.

    Returns ``(order, valid, match)`` where ``valid`` and ``match`` are boolean
    masks aligned with ``order``. Same-identity same-camera entries are invalid.
    """
    gallery_vecs = np.asarray(gallery_vecs, dtype=np.float64)
    if gallery_vecs.shape[0] == 0:
        raise EvaluationError("gallery is empty")
    d = query_distances(np.asarray(qvec, dtype=np.float64)[None], gallery_vecs)[0]
    order = np.argsort(d, kind="stable")
    g_ids = np.asarray(g_identities)[order]
    g_cams = np.asarray(g_cameras)[order]
    same_id = (g_ids == q_identity) & (q_identity != UNKNOWN_IDENTITY)
    valid = ~(same_id & (g_cams == q_camera))
    return order, valid, same_id & valid


def average_precision(match_in_valid_order: np.ndarray) -> float:
    """Mean of the precision at each hit; nan when there is no hit.

    Accumulated in exact rationals and rounded once, so e.g. hits at ranks 1
    and 3 give exactly 5/6.
    """
    hits = np.asarray(match_in_valid_order, dtype=bool)
    if not hits.any():
        return float("nan")
    ranks = np.flatnonzero(hits) + 1
    total = sum(Fraction(k, int(r)) for k, r in enumerate(ranks, start=1))
    return float(total / len(ranks))


def cmc_map(query_vecs, q_identities, q_cameras, gallery_vecs, g_identities, g_cameras,
            max_rank=None) -> RetrievalResult:
    qf = np.asarray(query_vecs, dtype=np.float64)
    gf = np.asarray(gallery_vecs, dtype=np.float64)
    if qf.shape[0] == 0:
        raise EvaluationError("query set is empty")
    if gf.shape[0] == 0:
        raise EvaluationError("gallery is empty")
    max_rank = gf.shape[0] if max_rank is None else max_rank
    rankings, aps, curves = [], [], []
    for i in range(qf.shape[0]):
        order, valid, match = rank_gallery(qf[i], q_identities[i], q_cameras[i],
                                           gf, g_identities, g_cameras)
        rankings.append(order)
        hits = match[valid]
        ap = average_precision(hits)
        aps.append(ap)
        if np.isnan(ap):
            continue
        curve = np.zeros(max_rank)
        first = int(np.argmax(hits))
        if first < max_rank:
            curve[first:] = 1.0
        curves.append(curve)
    if not curves:
        raise EvaluationError("no query has a valid match in the gallery")
    aps = np.array(aps)
    return RetrievalResult(np.array(rankings), aps, np.mean(curves, axis=0),
                           float(np.nanmean(aps)))


def evaluate(params: ModelParams, query: Dataset, gallery: Dataset, cfg: EmbedderConfig,
             max_rank=None) -> RetrievalResult:
    if len(query) == 0:
        raise EvaluationError("query set is empty")
    if len(gallery) == 0:
        raise EvaluationError("gallery is empty")
    return cmc_map(test_features(params, query, cfg), query.identities(), query.cameras(),
                   test_features(params, gallery, cfg), gallery.identities(), gallery.cameras(),
                   max_rank=max_rank)
