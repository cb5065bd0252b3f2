"""Flat ``key=value`` run configuration shared by every CLI mode."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .embedder import EmbedderConfig
from .grouping import DbscanConfig
from .losses import TripletConfig
from .pipeline import PipelineConfig, TrainConfig
from .reranking import KReciprocalConfig
from .synth import SynthSpec


class ConfigError(ValueError):
    pass


MODES = ("pretrain", "adapt", "adapt-semi", "adapt-joint", "eval", "cluster", "gen-synth")
PATH_KEYS = ("source", "target", "query", "gallery", "model", "out", "annotations")

# config key -> (section, attribute)
_RENAMED = {"cluster_metric": ("dbscan", "metric"), "lambda": ("krecip", "lam")}
_SECTIONS = {"embedder": EmbedderConfig, "triplet": TripletConfig, "dbscan": DbscanConfig,
             "krecip": KReciprocalConfig, "train": TrainConfig, "synth": SynthSpec}
# keys that mean the same thing for the model and the generator
_SHARED = {"height", "width", "d_in", "part_count", "seed"}

# desk-scale preset: epochs hold ~3 steps instead of ~100, and 300-sample sets
# need a larger auto-eps fraction than full-size datasets
PRESETS = {
    "standard": {},
    "desk": {"pretrain_lr": "3e-3", "pretrain_lr_decayed": "3e-4", "adapt_lr": "6e-4", "rho": "0.02"},
}


def _key_table() -> dict:
    table = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            key = f.name
            if section == "dbscan" and key == "metric":
                continue
            if section == "krecip" and key == "lam":
                continue
            if section == "synth" and key in _SHARED:
                continue
            table[key] = (section, key)
    table.update(_RENAMED)
    return table


KEYS = _key_table()


def _field_type(section: str, attr: str):
    for f in dataclasses.fields(_SECTIONS[section]):
        if f.name == attr:
            return f.type
    raise KeyError(attr)


def _coerce(key: str, raw: str, section: str, attr: str):
    typ = str(_field_type(section, attr))
    text = raw.strip()
    try:
        if "Optional" in typ and text.lower() in ("auto", "none", ""):
            return None
        if "bool" in typ:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in typ:
            return int(text)
        if "float" in typ:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None


@dataclass
class RunConfig:
    mode: Optional[str] = None
    preset: str = "standard"
    values: dict = field(default_factory=dict)   # parsed config keys
    paths: dict = field(default_factory=dict)

    def section_kwargs(self, section: str) -> dict:
        out = {}
        for key, val in self.values.items():
            sec, attr = KEYS[key]
            if sec == section:
                out[attr] = val
        if section == "synth":
            for k in _SHARED:
                if k in self.values:
                    out[k] = self.values[k]
        return out

    def pipeline(self) -> PipelineConfig:
        try:
            return PipelineConfig(
                embedder=EmbedderConfig(**self.section_kwargs("embedder")),
                triplet=TripletConfig(**self.section_kwargs("triplet")),
                dbscan=DbscanConfig(**self.section_kwargs("dbscan")),
                krecip=KReciprocalConfig(**self.section_kwargs("krecip")),
                train=TrainConfig(**self.section_kwargs("train")),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def synth_spec(self) -> SynthSpec:
        try:
            return SynthSpec(**self.section_kwargs("synth"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def resolved(self) -> dict:
        """Every effective key with its value, in a stable order."""
        pipe = self.pipeline()
        synth = self.synth_spec()
        sections = {"embedder": pipe.embedder, "triplet": pipe.triplet, "dbscan": pipe.dbscan,
                    "krecip": pipe.krecip, "train": pipe.train, "synth": synth}
        out = {"preset": self.preset}
        if self.mode:
            out["mode"] = self.mode
        for key in sorted(KEYS):
            sec, attr = KEYS[key]
            out[key] = getattr(sections[sec], attr)
        for key in PATH_KEYS:
            if self.paths.get(key) is not None:
                out[key] = str(self.paths[key])
        return out

    def resolved_text(self) -> str:
        lines = []
        for key, val in self.resolved().items():
            if val is None:
                val = "auto"
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"


def parse_lines(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides: Optional[dict] = None, mode: Optional[str] = None) -> RunConfig:
    """Build a RunConfig from an optional file plus overrides; overrides win.

    Values may be strings (parsed per key type) or already-typed values.
    Unknown keys raise :class:`ConfigError` naming the key.
    """
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        raw.update(parse_lines(p.read_text(), str(p)))
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    file_mode = raw.pop("mode", None)
    cfg = RunConfig(mode=mode or file_mode)
    if cfg.mode is not None and cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    cfg.preset = str(raw.pop("preset", "standard"))
    if cfg.preset not in PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}")
    merged = dict(PRESETS[cfg.preset])
    merged.update(raw)
    for key, value in merged.items():
        if key in PATH_KEYS:
            cfg.paths[key] = value
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        sec, attr = KEYS[key]
        cfg.values[key] = _coerce(key, value, sec, attr) if isinstance(value, str) else value
    cfg.pipeline()
    cfg.synth_spec()
    return cfg
