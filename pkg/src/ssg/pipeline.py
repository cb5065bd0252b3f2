"""Pre-training, the iterative grouping/fine-tuning loop and its semi-supervised variants."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .embedder import EmbedderConfig, embed_grids
from .evaluation import evaluate
from .grouping import DbscanConfig, build_label_table, cluster_stats
from .losses import (TripletConfig, concat_upstream, loss_baseline, loss_jointly, loss_semi,
                     loss_ssg, pk_sample)
from .reranking import (KReciprocalConfig, k_reciprocal_jaccard, nearest_dictionary_assign,
                        pairwise_euclidean)
from .types import NOISE, Dataset, LabelTable, ModelParams

log = logging.getLogger("ssg")

ADAPT_PARAMS = ("W_emb", "b_emb", "W_fc", "b_fc")


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    pretrain_lr: float = 3e-4
    pretrain_lr_decayed: float = 3e-5
    pretrain_decay_epoch: int = 100
    pretrain_epochs: int = 150
    adapt_lr: float = 6e-5
    adapt_epochs: int = 70
    outer_iterations: int = 10
    stability_ari: float = 0.99
    batches_per_epoch: int = 0       # 0 -> ceil(pool / (P * K))
    semi_steps: int = 5
    semi_epochs_per_step: int = 0    # 0 -> adapt_epochs
    normalize_features: bool = False
    patch_dropout: bool = False
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("pretrain_lr", "pretrain_lr_decayed", "adapt_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_epochs", "adapt_epochs", "outer_iterations", "semi_steps",
                     "batches_per_epoch", "semi_epochs_per_step", "pretrain_decay_epoch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.semi_steps < 1:
            raise ValueError("semi_steps must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    krecip: KReciprocalConfig = field(default_factory=KReciprocalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def stream(cfg: PipelineConfig, *key) -> np.random.Generator:
    """Independent generator for one pipeline component, derived from the root seed."""
    return np.random.default_rng([cfg.train.seed, *key])


class Adam:
    """Bias-corrected Adam with L2 weight decay folded into the gradient."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m, self.v, self.t = {}, {}, {}

    @classmethod
    def from_config(cls, tc: TrainConfig) -> "Adam":
        return cls(tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)

    def step(self, params: ModelParams, grads: ModelParams, lr: float, names=ModelParams.NAMES):
        for name in names:
            p = getattr(params, name)
            g = getattr(grads, name) + self.weight_decay * p
            t = self.t.get(name, 0) + 1
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.t[name], self.m[name], self.v[name] = t, m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            setattr(params, name, p - lr * m_hat / (np.sqrt(v_hat) + self.eps))


def dense_labels(values) -> tuple:
    """Map arbitrary integer labels to 0..L-1; returns (dense, originals)."""
    originals, dense = np.unique(np.asarray(values), return_inverse=True)
    return dense.astype(np.int64), originals


def effective_triplet(cfg: TripletConfig, num_labels: int) -> TripletConfig:
    if num_labels < 2:
        raise PipelineError(f"need at least two identities for triplet batches, got {num_labels}")
    return TripletConfig(cfg.margin, min(cfg.P, num_labels), cfg.K)


def batches_per_epoch(tc: TrainConfig, pool: int, trip: TripletConfig) -> int:
    if tc.batches_per_epoch:
        return tc.batches_per_epoch
    return max(1, math.ceil(pool / (trip.P * trip.K)))


def _grids(grids: np.ndarray, idx, tc: TrainConfig, rng) -> np.ndarray:
    batch = grids[idx]
    if tc.patch_dropout:
        batch = batch.copy()
        n, h, w, _ = batch.shape
        flat = rng.integers(h * w, size=n)
        batch[np.arange(n), flat // w, flat % w] = 0.0
    return batch


def init_params(cfg: PipelineConfig, num_classes: int) -> ModelParams:
    e = cfg.embedder
    return ModelParams.init(e.d_in, e.channels, e.embed_dim, num_classes, stream(cfg, 0))


# --------------------------------------------------------------------------- pre-training

def pretrain(source: Dataset, cfg: PipelineConfig, params: Optional[ModelParams] = None):
    """Fit the baseline (cross-entropy + batch-hard triplet) on labelled source data.

    Returns ``(params, trace)`` where ``trace`` holds the mean batch loss per epoch.
    """
    ids = source.identities()
    if len(source) == 0 or np.any(ids < 0):
        raise PipelineError("pretraining needs every source sample labelled")
    labels, _ = dense_labels(ids)
    num_classes = int(labels.max()) + 1
    trip = effective_triplet(cfg.triplet, num_classes)
    params = init_params(cfg, num_classes) if params is None else params.copy()
    tc = cfg.train
    grids = source.grids()
    rng = stream(cfg, 1)
    opt = Adam.from_config(tc)
    nb = batches_per_epoch(tc, len(source), trip)
    trace = []
    for epoch in range(tc.pretrain_epochs):
        lr = tc.pretrain_lr if epoch < tc.pretrain_decay_epoch else tc.pretrain_lr_decayed
        losses = []
        for _ in range(nb):
            batch = pk_sample(labels, trip, rng)
            idx = batch.flat_indices
            feats = embed_grids(_grids(grids, idx, tc, rng), params, cfg.embedder)
            loss, grad = loss_baseline(feats, labels[idx], params, cfg.embedder, trip.margin)
            opt.step(params, grad, lr)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        if epoch % 25 == 0 or epoch == tc.pretrain_epochs - 1:
            log.info("stage=pretrain epoch=%d lr=%g loss=%.4f", epoch, lr, trace[-1])
    return params, trace


def direct_transfer_eval(params: ModelParams, query: Dataset, gallery: Dataset,
                         cfg: PipelineConfig) -> dict:
    return evaluate(params, query, gallery, cfg.embedder).metrics()


# --------------------------------------------------------------------------- grouping

def view_vectors(feats, normalize: bool = False) -> list:
    views = [feats.f_whole, *feats.f_parts]
    if normalize:
        views = [v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12) for v in views]
    return views


def view_distance(vectors, cfg: PipelineConfig):
    d = pairwise_euclidean(vectors)
    if cfg.dbscan.metric == "euclidean":
        return d
    return k_reciprocal_jaccard(d, cfg.krecip)


def group_target(params: ModelParams, target: Dataset, cfg: PipelineConfig) -> LabelTable:
    feats = embed_grids(target.grids(), params, cfg.embedder)
    views = view_vectors(feats, cfg.train.normalize_features)
    threads = max(1, cfg.train.threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            mats = list(pool.map(lambda v: view_distance(v, cfg), views))
    else:
        mats = [view_distance(v, cfg) for v in views]
    return build_label_table(mats, cfg.dbscan, target.sample_ids(), threads=threads)


def stability(prev: np.ndarray, cur: np.ndarray) -> float:
    """Adjusted Rand index between two whole-view labelings; noise points are singletons."""
    def spread(lab):
        lab = np.asarray(lab).copy()
        noise = lab == NOISE
        lab[noise] = lab.max(initial=0) + 1 + np.arange(noise.sum())
        return lab
    with warnings.catch_warnings():
        # sklearn warns when most labels are singletons, which noise spreading produces
        warnings.simplefilter("ignore")
        return float(adjusted_rand_score(spread(prev), spread(cur)))


def _metrics_row(params, cfg, eval_sets) -> dict:
    if eval_sets is None:
        return {}
    m = evaluate(params, eval_sets[0], eval_sets[1], cfg.embedder)
    return {"mAP": m.mAP, "rank1": m.rank(1), "rank5": m.rank(5), "rank10": m.rank(10)}


# --------------------------------------------------------------------------- SSG

def _train_views(params, grids, y_whole, y_parts, cfg, rng, opt, epochs, lr, loss_fn):
    """Minimise a per-view triplet objective over PK batches grouped by ``y_whole``."""
    trip = effective_triplet(cfg.triplet, len(np.unique(y_whole)))
    nb = batches_per_epoch(cfg.train, len(y_whole), trip)
    losses = []
    for _ in range(epochs):
        for _ in range(nb):
            batch = pk_sample(y_whole, trip, rng)
            idx = batch.flat_indices
            feats = embed_grids(_grids(grids, idx, cfg.train, rng), params, cfg.embedder)
            loss, up = loss_fn(feats, y_whole[idx], [y[idx] for y in y_parts],
                               margin=trip.margin, skip_single_label=True)
            opt.step(params, up.to_params(feats, params, cfg.embedder), lr, ADAPT_PARAMS)
            losses.append(loss)
    return float(np.mean(losses)) if losses else None


def ssg_iteration(params: ModelParams, target: Dataset, cfg: PipelineConfig,
                  iteration: int = 0, opt: Optional[Adam] = None):
    """Group the target by every view, drop noise, and fine-tune on the self-labels.

    Returns ``(params, table, stats)``; ``params`` is a new object.
    """
    if len(target) == 0:
        raise PipelineError("target dataset is empty")
    params = params.copy()
    table = group_target(params, target, cfg)
    stats = cluster_stats(table)
    keep = np.flatnonzero(~table.noise_mask())
    if keep.size == 0:
        raise PipelineError("degenerate clustering: every target sample is noise")
    y_whole = table.y_whole[keep]
    y_parts = [c[keep] for c in table.y_parts]
    stats["num_training_samples"] = int(keep.size)
    stats["loss_mean"] = None
    if len(np.unique(y_whole)) < 2:
        log.warning("stage=ssg iteration=%d msg=single-cluster-skip-training", iteration)
        return params, table, stats
    opt = Adam.from_config(cfg.train) if opt is None else opt
    rng = stream(cfg, 2, iteration)
    grids = target.grids()[keep]
    stats["loss_mean"] = _train_views(params, grids, y_whole, y_parts, cfg, rng, opt,
                                      cfg.train.adapt_epochs, cfg.train.adapt_lr, loss_ssg)
    return params, table, stats


def run_ssg(params: ModelParams, target: Dataset, cfg: PipelineConfig, eval_sets=None):
    """Alternate grouping and fine-tuning until the whole-view labels stabilise.

    ``eval_sets`` is an optional ``(query, gallery)`` pair scored after each iteration.
    """
    history = []
    prev = None
    opt = Adam.from_config(cfg.train)
    for it in range(cfg.train.outer_iterations):
        params, table, stats = ssg_iteration(params, target, cfg, it, opt)
        row = {"iteration": it + 1, "stage": "ssg", **stats, **_metrics_row(params, cfg, eval_sets)}
        stable = prev is not None and stability(prev, table.y_whole) >= cfg.train.stability_ari
        row["stable"] = bool(stable)
        history.append(row)
        log.info("stage=ssg iteration=%d clusters=%s noise=%s loss=%s mAP=%s", it + 1,
                 stats["clusters_per_view"], stats["noise_per_view"], stats["loss_mean"],
                 row.get("mAP"))
        if stable:
            break
        prev = table.y_whole
    return params, history


# --------------------------------------------------------------------------- annotation

@dataclass
class AnnotationSet:
    positions: np.ndarray   # indices into the target dataset
    sample_ids: np.ndarray
    cluster_ids: np.ndarray
    identities: np.ndarray  # revealed by the oracle
    dictionary: list = field(default_factory=list)  # per view (N_g, C) arrays

    def __len__(self):
        return len(self.positions)

    def refresh(self, params: ModelParams, target: Dataset, cfg: PipelineConfig):
        feats = embed_grids(target.grids()[self.positions], params, cfg.embedder)
        self.dictionary = view_vectors(feats, cfg.train.normalize_features)
        return self


def ground_truth_oracle(target: Dataset) -> Callable:
    lookup = {s.sample_id: s.identity for s in target.samples}

    def reveal(sample_ids):
        out = []
        for sid in sample_ids:
            ident = lookup.get(int(sid))
            if ident is None:
                raise PipelineError(f"no ground-truth identity for sample {sid}")
            out.append(ident)
        return np.array(out, dtype=np.int64)
    return reveal


def annotation_candidates(table: LabelTable, rng) -> tuple:
    """One uniformly chosen member per whole-view cluster: (positions, cluster ids)."""
    n_clusters = int(table.y_whole.max(initial=-1)) + 1
    if n_clusters < 1:
        raise PipelineError("no whole-view clusters to annotate")
    positions = [int(rng.choice(np.flatnonzero(table.y_whole == g))) for g in range(n_clusters)]
    return np.array(positions, dtype=np.int64), np.arange(n_clusters)


def annotate(table: LabelTable, target: Dataset, rng, oracle: Callable,
             params: Optional[ModelParams] = None, cfg: Optional[PipelineConfig] = None) -> AnnotationSet:
    rng = np.random.default_rng(rng)
    positions, clusters = annotation_candidates(table, rng)
    sids = target.sample_ids()[positions]
    ann = AnnotationSet(positions, sids, clusters, np.asarray(oracle(sids), dtype=np.int64))
    if params is not None and cfg is not None:
        ann.refresh(params, target, cfg)
    return ann


@dataclass
class SemiAssignment:
    y_whole: np.ndarray     # dense identity labels
    y_parts: list
    entry_whole: np.ndarray  # dictionary index per sample (whole view)
    distance: np.ndarray     # whole-view assignment distance


def assign_semi_labels(params: ModelParams, target: Dataset, ann: AnnotationSet,
                       cfg: PipelineConfig) -> SemiAssignment:
    """Nearest dictionary entry per view; entries map to their revealed identities.

    Annotated samples keep their own revealed identity in every view.
    """
    if len(ann) == 0:
        raise PipelineError("annotation dictionary is empty")
    ann.refresh(params, target, cfg)
    feats = embed_grids(target.grids(), params, cfg.embedder)
    views = view_vectors(feats, cfg.train.normalize_features)
    ident_label, _ = dense_labels(ann.identities)
    cols, entry_whole, dist_whole = [], None, None
    for v, (vec, dic) in enumerate(zip(views, ann.dictionary)):
        entry, dist = nearest_dictionary_assign(vec, dic, cfg.krecip, metric=cfg.dbscan.metric)
        labels = ident_label[entry]
        labels[ann.positions] = ident_label
        if v == 0:
            entry_whole, dist_whole = entry.copy(), dist.copy()
            entry_whole[ann.positions] = np.arange(len(ann))
            dist_whole[ann.positions] = 0.0
        cols.append(labels)
    return SemiAssignment(cols[0], cols[1:], entry_whole, dist_whole)


def stepwise_schedule(distances, step: int, total_steps: int, always_active=None) -> np.ndarray:
    """Indices active at ``step``: the closest ceil(step/total * N) samples plus the annotated ones."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    d = np.asarray(distances, dtype=np.float64)
    n = d.size
    fixed = np.zeros(n, dtype=bool)
    if always_active is not None:
        fixed[np.asarray(always_active, dtype=np.int64)] = True
    count = math.ceil(step * n / total_steps)
    free = np.flatnonzero(~fixed)
    order = free[np.argsort(d[free], kind="stable")]
    active = fixed.copy()
    active[order[:count]] = True
    return np.flatnonzero(active)


# --------------------------------------------------------------------------- semi-supervised

def _semi_step_train(params, target, assign, active, cfg, rng, opt, epochs):
    grids = target.grids()[active]
    y = assign.y_whole[active]
    if len(np.unique(y)) < 2:
        return None
    return _train_views(params, grids, y, [c[active] for c in assign.y_parts], cfg, rng, opt,
                        epochs, cfg.train.adapt_lr, loss_semi)


def run_semi(params: ModelParams, target: Dataset, cfg: PipelineConfig, joint: bool,
             oracle: Optional[Callable] = None, eval_sets=None, annotation: Optional[AnnotationSet] = None):
    """Clustering-guided semi-supervised adaptation.

    ``joint=False`` runs the grouping loop to completion, annotates once and then
    fine-tunes on dictionary-assigned labels over step-wise growing subsets.
    ``joint=True`` minimises grouping + assignment objectives together inside each
    outer iteration, annotating only in the first one.
    """
    if len(target) == 0:
        raise PipelineError("target dataset is empty")
    oracle = ground_truth_oracle(target) if oracle is None else oracle
    if joint:
        return _run_joint(params, target, cfg, oracle, eval_sets, annotation)

    params, history = run_ssg(params, target, cfg, eval_sets)
    table = group_target(params, target, cfg)
    ann = annotation or annotate(table, target, stream(cfg, 3), oracle)
    if len(ann) == 0:
        raise PipelineError("annotation produced no dictionary entries")
    opt = Adam.from_config(cfg.train)
    epochs = cfg.train.semi_epochs_per_step or cfg.train.adapt_epochs
    total = cfg.train.semi_steps
    for step in range(1, total + 1):
        assign = assign_semi_labels(params, target, ann, cfg)
        active = stepwise_schedule(assign.distance, step, total, ann.positions)
        loss = _semi_step_train(params, target, assign, active, cfg, stream(cfg, 4, step), opt, epochs)
        row = {"iteration": len(history) + 1, "stage": "semi", "step": step,
               "dictionary_size": len(ann), "active": int(active.size), "loss_mean": loss,
               **_metrics_row(params, cfg, eval_sets)}
        history.append(row)
        log.info("stage=semi step=%d active=%d loss=%s mAP=%s", step, active.size, loss, row.get("mAP"))
    return params, history


def _run_joint(params, target, cfg, oracle, eval_sets, annotation):
    params = params.copy()
    tc = cfg.train
    opt = Adam.from_config(tc)
    grids_all = target.grids()
    ann = annotation
    history = []
    prev = None
    for it in range(tc.outer_iterations):
        table = group_target(params, target, cfg)
        stats = cluster_stats(table)
        if ann is None:
            ann = annotate(table, target, stream(cfg, 3), oracle)
            if len(ann) == 0:
                raise PipelineError("annotation produced no dictionary entries")
        assign = assign_semi_labels(params, target, ann, cfg)
        step = min(it + 1, tc.semi_steps)
        active = stepwise_schedule(assign.distance, step, tc.semi_steps, ann.positions)
        keep = np.flatnonzero(~table.noise_mask())
        if keep.size == 0:
            raise PipelineError("degenerate clustering: every target sample is noise")
        rng = stream(cfg, 5, it)
        loss = _joint_epochs(params, grids_all, table, keep, assign, active, cfg, rng, opt)
        row = {"iteration": it + 1, "stage": "joint", **stats, "num_training_samples": int(keep.size),
               "dictionary_size": len(ann), "active": int(active.size), "loss_mean": loss,
               **_metrics_row(params, cfg, eval_sets)}
        stable = (prev is not None and step == tc.semi_steps
                  and stability(prev, table.y_whole) >= tc.stability_ari)
        row["stable"] = bool(stable)
        history.append(row)
        log.info("stage=joint iteration=%d clusters=%s active=%d loss=%s mAP=%s", it + 1,
                 stats["clusters_per_view"], active.size, loss, row.get("mAP"))
        if stable:
            break
        prev = table.y_whole
    return params, history


def _joint_epochs(params, grids_all, table, keep, assign, active, cfg, rng, opt):
    y_ssg = table.y_whole[keep]
    y_semi = assign.y_whole[active]
    n_ssg, n_semi = len(np.unique(y_ssg)), len(np.unique(y_semi))
    if n_ssg < 2:
        return None
    trip_ssg = effective_triplet(cfg.triplet, n_ssg)
    trip_semi = effective_triplet(cfg.triplet, n_semi) if n_semi >= 2 else None
    nb = batches_per_epoch(cfg.train, keep.size, trip_ssg)
    margin = cfg.triplet.margin
    losses = []
    for _ in range(cfg.train.adapt_epochs):
        for _ in range(nb):
            i_ssg = keep[pk_sample(y_ssg, trip_ssg, rng).flat_indices]
            ssg_labels = (table.y_whole[i_ssg], [c[i_ssg] for c in table.y_parts])
            if trip_semi is None:
                feats = embed_grids(_grids(grids_all, i_ssg, cfg.train, rng), params, cfg.embedder)
                loss, up = loss_ssg(feats, *ssg_labels, margin=margin, skip_single_label=True)
            else:
                i_semi = active[pk_sample(y_semi, trip_semi, rng).flat_indices]
                semi_labels = (assign.y_whole[i_semi], [c[i_semi] for c in assign.y_parts])
                # one forward pass over both batches, split afterwards
                idx = np.concatenate([i_ssg, i_semi])
                feats = embed_grids(_grids(grids_all, idx, cfg.train, rng), params, cfg.embedder)
                n1 = i_ssg.size
                loss, ups = loss_jointly(feats.rows(slice(0, n1)), ssg_labels,
                                         feats.rows(slice(n1, None)), semi_labels,
                                         margin=margin, skip_single_label=True)
                up = concat_upstream(ups)
            opt.step(params, up.to_params(feats, params, cfg.embedder), cfg.train.adapt_lr,
                     ADAPT_PARAMS)
            losses.append(loss)
    return float(np.mean(losses))
