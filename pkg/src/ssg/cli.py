"""Command-line entry point: ``python -m ssg <mode> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import KEYS, ConfigError, RunConfig, load_config
from .evaluation import evaluate
from .synth import generate
from .types import ModelParams, load_dataset, save_dataset, validate_dataset

log = logging.getLogger("ssg")


class CliError(RuntimeError):
    pass


class AnnotationRequired(Exception):
    def __init__(self, sample_ids):
        super().__init__("annotations required")
        self.sample_ids = list(sample_ids)


def _default_threads() -> int:
    env = os.environ.get("SSG_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="root seed for every random stream")
    parser.add_argument("--threads", type=int, help="worker threads (default: $SSG_THREADS or all cores)")
    parser.add_argument("--preset", choices=["standard", "desk"], help="hyperparameter preset")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("--log-level", default="INFO")
    for key in sorted(KEYS):
        if key in ("seed", "threads"):
            continue
        parser.add_argument(f"--{key}", dest=f"key_{key}", metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssg", description=(
        "Self-similarity grouping: pretrain on a labelled source domain, adapt to an "
        "unlabelled target domain by iterative multi-view clustering, and evaluate retrieval."))
    sub = parser.add_subparsers(dest="mode", metavar="MODE")
    sub.required = True

    p = sub.add_parser("gen-synth", help="write a synthetic source/target benchmark")
    p.add_argument("--spec", help="key=value file with generator settings")
    p.add_argument("--out")

    p = sub.add_parser("pretrain", help="supervised training on the source domain")
    p.add_argument("--source")
    p.add_argument("--out")

    p = sub.add_parser("adapt", help="unsupervised adaptation by self-similarity grouping")
    p.add_argument("--model")
    p.add_argument("--target")
    p.add_argument("--query")
    p.add_argument("--gallery")
    p.add_argument("--out")

    for name, joint in (("adapt-semi", False), ("adapt-joint", True)):
        p = sub.add_parser(name, help="clustering-guided semi-supervised adaptation"
                           + (" with joint training" if joint else ""))
        p.add_argument("--model")
        p.add_argument("--target")
        p.add_argument("--query")
        p.add_argument("--gallery")
        p.add_argument("--out")
        group = p.add_mutually_exclusive_group()
        group.add_argument("--annotations", help="answers file: sample_id,identity")
        group.add_argument("--oracle", action="store_true",
                           help="reveal identities from the target file (synthetic data)")
        if not joint:
            p.add_argument("--joint", action="store_true", help="joint training (same as adapt-joint)")

    p = sub.add_parser("eval", help="CMC / mAP of a model on query and gallery sets")
    p.add_argument("--model")
    p.add_argument("--query")
    p.add_argument("--gallery")
    p.add_argument("--out")

    p = sub.add_parser("cluster", help="dump the multi-view label table for a target set")
    p.add_argument("--model")
    p.add_argument("--target")
    p.add_argument("--out")

    for action in sub.choices.values():
        _common(action)
    return parser


# paths each mode needs, from flags or from the config file
_NEEDS = {
    "gen-synth": ("out",),
    "pretrain": ("source", "out"),
    "adapt": ("model", "target", "out"),
    "adapt-semi": ("model", "target", "out"),
    "adapt-joint": ("model", "target", "out"),
    "eval": ("model", "query", "gallery"),
    "cluster": ("model", "target", "out"),
}


def _overrides(args) -> dict:
    out = {}
    for key in KEYS:
        val = getattr(args, f"key_{key}", None)
        if val is not None:
            out[key] = val
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    threads = args.threads if args.threads is not None else _default_threads()
    out["threads"] = str(threads)
    if args.preset:
        out["preset"] = args.preset
    for key in ("source", "target", "query", "gallery", "model", "out", "annotations"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _load(path, role: str, what: str):
    ds = load_dataset(_require(path, what), role=role)
    problems = validate_dataset(ds)
    if problems:
        raise CliError(f"{path}: " + "; ".join(problems[:3]))
    return ds


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config").write_text(run.resolved_text())
    return out


def _model_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "model.npz"
    return _require(p, "model file")


def _eval_sets(run: RunConfig):
    q, g = run.paths.get("query"), run.paths.get("gallery")
    if q is None and g is None:
        return None
    if q is None or g is None:
        raise CliError("--query and --gallery must be given together")
    return _load(q, "query", "query set"), _load(g, "gallery", "gallery set")


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _history_rows(history):
    keys = ("iteration", "stage", "clusters_per_view", "noise_per_view", "loss_mean",
            "mAP", "rank1", "rank5", "rank10")
    rows = []
    for row in history:
        out = {k: row.get(k) for k in keys}
        out.update({k: v for k, v in row.items() if k not in out})
        rows.append(out)
    return rows


def _run_gen_synth(run: RunConfig):
    out = _out_dir(run)
    source, target, query, gallery = generate(run.synth_spec())
    for name, ds in (("source", source), ("target_train", target), ("query", query), ("gallery", gallery)):
        save_dataset(ds, out / f"{name}.txt")
    log.info("stage=gen-synth out=%s source=%d target=%d query=%d gallery=%d",
             out, len(source), len(target), len(query), len(gallery))


def _run_pretrain(run: RunConfig):
    cfg = run.pipeline()
    source = _load(run.paths["source"], "source", "source set")
    out = _out_dir(run)
    params, trace = pl.pretrain(source, cfg)
    params.save(out / "model.npz")
    _dump_json({"loss_per_epoch": trace}, out / "pretrain_trace.json")


def _run_adapt(run: RunConfig):
    cfg = run.pipeline()
    params = ModelParams.load(_model_path(run.paths["model"]))
    target = _load(run.paths["target"], "target-train", "target set")
    evals = _eval_sets(run)
    out = _out_dir(run)
    params, history = pl.run_ssg(params, target, cfg, eval_sets=evals)
    params.save(out / "model.npz")
    _dump_json(_history_rows(history), out / "history.json")
    if evals:
        _write_metrics(params, evals, cfg, out)


class _AnswersOracle:
    def __init__(self, path):
        self.table = {}
        with open(_require(path, "annotations file")) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("sample_id"):
                    continue
                try:
                    sid, ident = (int(x) for x in line.split(","))
                except ValueError:
                    raise CliError(f"{path}:{lineno}: expected sample_id,identity") from None
                self.table[sid] = ident

    def __call__(self, sample_ids):
        missing = [int(s) for s in sample_ids if int(s) not in self.table]
        if missing:
            raise CliError(f"annotations file lacks sample ids {missing[:5]}")
        return np.array([self.table[int(s)] for s in sample_ids], dtype=np.int64)


def _request_oracle(sample_ids):
    raise AnnotationRequired(sample_ids)


def _run_semi(run: RunConfig, joint: bool):
    cfg = run.pipeline()
    params = ModelParams.load(_model_path(run.paths["model"]))
    target = _load(run.paths["target"], "target-train", "target set")
    evals = _eval_sets(run)
    out = _out_dir(run)
    if run.paths.get("annotations"):
        oracle = _AnswersOracle(run.paths["annotations"])
    elif getattr(run, "use_oracle", False):
        oracle = pl.ground_truth_oracle(target)
    else:
        oracle = _request_oracle
    try:
        params, history = pl.run_semi(params, target, cfg, joint=joint, oracle=oracle, eval_sets=evals)
    except AnnotationRequired as req:
        lines = ["sample_id,cluster_id"] + [f"{sid},{i}" for i, sid in enumerate(req.sample_ids)]
        (out / "to_annotate.csv").write_text("\n".join(lines) + "\n")
        log.info("stage=annotate wrote=%s count=%d next=rerun-with---annotations",
                 out / "to_annotate.csv", len(req.sample_ids))
        return
    params.save(out / "model.npz")
    _dump_json(_history_rows(history), out / "history.json")
    if evals:
        _write_metrics(params, evals, cfg, out)


def _write_metrics(params, evals, cfg, out: Path):
    result = evaluate(params, evals[0], evals[1], cfg.embedder)
    (out / "metrics.json").write_text(result.to_json() + "\n")
    return result


def _run_eval(run: RunConfig):
    cfg = run.pipeline()
    params = ModelParams.load(_model_path(run.paths["model"]))
    query = _load(run.paths["query"], "query", "query set")
    gallery = _load(run.paths["gallery"], "gallery", "gallery set")
    result = evaluate(params, query, gallery, cfg.embedder)
    text = result.to_json()
    if run.paths.get("out"):
        out = _out_dir(run)
        (out / "metrics.json").write_text(text + "\n")
    print(text)


def _run_cluster(run: RunConfig):
    cfg = run.pipeline()
    params = ModelParams.load(_model_path(run.paths["model"]))
    target = _load(run.paths["target"], "target-train", "target set")
    out = _out_dir(run)
    table = pl.group_target(params, target, cfg)
    (out / "label_table.csv").write_text(table.to_csv())


def _configure_logging(level: str):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s", "%Y-%m-%dT%H:%M:%S"))
    saved = (list(log.handlers), log.level, log.propagate)
    log.handlers[:] = [handler]
    log.setLevel(level.upper())
    log.propagate = False
    return saved


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    saved = _configure_logging(args.log_level)
    try:
        return _dispatch(args)
    finally:
        # in-process callers (tests, notebooks) keep their own handlers
        log.handlers[:], level, log.propagate = saved
        log.setLevel(level)


def _dispatch(args) -> int:
    mode = args.mode
    if mode == "adapt-semi" and args.joint:
        mode = "adapt-joint"
    try:
        run = load_config(args.config, _overrides(args), mode=mode)
        if getattr(args, "oracle", False):
            run.use_oracle = True
        if mode == "gen-synth" and args.spec:
            spec_run = load_config(args.spec, {k: v for k, v in _overrides(args).items()
                                               if k in KEYS or k == "preset"}, mode=mode)
            spec_run.paths = run.paths
            run = spec_run
        missing = [k for k in _NEEDS[mode] if not run.paths.get(k)]
        if missing:
            raise CliError("missing " + ", ".join(f"--{k}" for k in missing)
                           + " (give the flag or set the key in --config)")
        log.info("stage=start mode=%s seed=%s threads=%s", mode,
                 run.values.get("seed", 0), run.values.get("threads"))
        dispatch = {
            "gen-synth": _run_gen_synth,
            "pretrain": _run_pretrain,
            "adapt": _run_adapt,
            "adapt-semi": lambda r: _run_semi(r, joint=False),
            "adapt-joint": lambda r: _run_semi(r, joint=True),
            "eval": _run_eval,
            "cluster": _run_cluster,
        }
        dispatch[mode](run)
    except (CliError, ConfigError, FileNotFoundError, ValueError, pl.PipelineError) as exc:
        print(f"ssg {mode}: error: {exc}", file=sys.stderr)
        return 2
    return 0
