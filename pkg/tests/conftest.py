import time
import warnings

import numpy as np
import pytest

from ssg import embedder
from ssg.pipeline import PipelineConfig, TrainConfig
from ssg.grouping import DbscanConfig
from ssg.types import ModelParams

BENCH_SEED = 42


def desk_config(**train) -> PipelineConfig:
    """Library defaults plus the desk preset (learning rates x10, rho=0.02)."""
    tc = dict(pretrain_lr=3e-3, pretrain_lr_decayed=3e-4, adapt_lr=6e-4, seed=BENCH_SEED)
    tc.update(train)
    return PipelineConfig(train=TrainConfig(**tc), dbscan=DbscanConfig(rho=0.02))


def random_params(seed, cfg=embedder.EmbedderConfig(), num_classes=5, scale=1.0):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(cfg.d_in, cfg.channels, cfg.embed_dim, num_classes, rng)
    p.b_emb = 0.1 * rng.normal(size=p.b_emb.shape)
    p.b_fc = 0.1 * rng.normal(size=p.b_fc.shape)
    p.W_cls = scale * rng.normal(size=p.W_cls.shape)
    p.b_cls = 0.1 * rng.normal(size=p.b_cls.shape)
    return p


def random_grids(seed, n, cfg=embedder.EmbedderConfig()):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, cfg.height, cfg.width, cfg.d_in))


@pytest.fixture(scope="session")
def benchmark():
    """Full benchmark run, shared by every test that needs it (about 40 s)."""
    from ssg import evaluate, generate, pretrain, run_semi, run_ssg
    from ssg.synth import SynthSpec

    warnings.simplefilter("ignore")
    start = time.perf_counter()
    source, target, query, gallery = generate(SynthSpec(seed=BENCH_SEED))
    cfg = desk_config()
    base, trace = pretrain(source, cfg)
    out = {"cfg": cfg, "data": (source, target, query, gallery), "base": base, "trace": trace}
    out["direct"] = evaluate(base, query, gallery, cfg.embedder).mAP
    p_ssg, out["ssg_history"] = run_ssg(base, target, cfg)
    out["ssg"] = evaluate(p_ssg, query, gallery, cfg.embedder).mAP
    out["ssg_params"] = p_ssg
    p_semi, out["semi_history"] = run_semi(base, target, cfg, joint=False)
    out["semi"] = evaluate(p_semi, query, gallery, cfg.embedder).mAP
    p_joint, out["joint_history"] = run_semi(base, target, cfg, joint=True)
    out["joint"] = evaluate(p_joint, query, gallery, cfg.embedder).mAP
    out["seconds"] = time.perf_counter() - start
    return out
