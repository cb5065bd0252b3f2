"""Shared value types and the line-oriented dataset file format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ROLES = ("source", "target-train", "query", "gallery")
NOISE = -1
UNKNOWN_IDENTITY = -1
_HEADER = "ssg-dataset v1"


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: int
    patch_grid: np.ndarray  # (H_p, W_p, D_in)
    identity: Optional[int] = None
    camera_id: int = 0

    def __post_init__(self):
        grid = np.asarray(self.patch_grid, dtype=np.float64)
        grid.setflags(write=False)
        object.__setattr__(self, "patch_grid", grid)


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    role: str = "target-train"
    num_identities: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self):
        return len(self.samples)

    @property
    def grid_shape(self):
        return self.samples[0].patch_grid.shape

    def grids(self) -> np.ndarray:
        """Stack patch grids into an (N, H_p, W_p, D_in) array."""
        if not self.samples:
            return np.zeros((0, 0, 0, 0))
        return np.stack([s.patch_grid for s in self.samples])

    def identities(self) -> np.ndarray:
        return np.array([UNKNOWN_IDENTITY if s.identity is None else s.identity
                         for s in self.samples], dtype=np.int64)

    def cameras(self) -> np.ndarray:
        return np.array([s.camera_id for s in self.samples], dtype=np.int64)

    def sample_ids(self) -> np.ndarray:
        return np.array([s.sample_id for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], role=self.role)


@dataclass(frozen=True)
class FeatureViews:
    """Per-sample feature bundle: spatial map, pooled whole/part vectors, embedding."""

    map: np.ndarray
    f_whole: np.ndarray
    f_parts: tuple
    f_embed: np.ndarray


@dataclass(frozen=True)
class LabelTable:
    sample_ids: np.ndarray
    y_whole: np.ndarray
    y_parts: tuple  # one int array per part

    @property
    def columns(self) -> list:
        return [self.y_whole, *self.y_parts]

    def noise_mask(self) -> np.ndarray:
        """True where a sample is noise in any view."""
        mask = np.zeros(len(self.y_whole), dtype=bool)
        for col in self.columns:
            mask |= col == NOISE
        return mask

    def to_csv(self) -> str:
        header = ["sample_id", "y_whole"] + [f"y_part{j}" for j in range(len(self.y_parts))]
        lines = [",".join(header)]
        for i, sid in enumerate(self.sample_ids):
            lines.append(",".join(str(int(v)) for v in [sid] + [c[i] for c in self.columns]))
        return "\n".join(lines) + "\n"


@dataclass
class ModelParams:
    W_emb: np.ndarray
    b_emb: np.ndarray
    W_fc: np.ndarray
    b_fc: np.ndarray
    W_cls: np.ndarray
    b_cls: np.ndarray

    NAMES = ("W_emb", "b_emb", "W_fc", "b_fc", "W_cls", "b_cls")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(**{k: np.zeros_like(v) for k, v in other.as_dict().items()})

    @classmethod
    def init(cls, d_in, channels, embed_dim, num_classes, rng) -> "ModelParams":
        return cls(
            W_emb=rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, channels)),
            b_emb=np.zeros(channels),
            W_fc=rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, embed_dim)),
            b_fc=np.zeros(embed_dim),
            W_cls=rng.normal(0.0, 0.01, (embed_dim, max(num_classes, 1))),
            b_cls=np.zeros(max(num_classes, 1)),
        )

    def save(self, path):
        np.savez(path, **self.as_dict())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path) as z:
            return cls(**{k: np.array(z[k], dtype=np.float64) for k in cls.NAMES})


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        if self.metric not in ("euclidean", "jaccard"):
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def check(self, atol=1e-9) -> list:
        v = self.values
        problems = []
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            return ["matrix is not square"]
        if not np.allclose(v, v.T, atol=atol, rtol=0):
            problems.append("not symmetric")
        if np.any(np.diag(v) != 0):
            problems.append("nonzero diagonal")
        if np.any(v < 0):
            problems.append("negative entries")
        if self.metric == "jaccard" and np.any(v > 1 + atol):
            problems.append("jaccard entry above 1")
        return problems


def validate_dataset(d: Dataset, part_count: int = 1) -> list:
    """Return a list of human-readable invariant violations (empty when valid)."""
    violations = []
    if d.role not in ROLES:
        violations.append(f"unknown role {d.role!r}")
    seen = set()
    shape = None
    for s in d.samples:
        if s.sample_id in seen:
            violations.append(f"duplicate sample_id {s.sample_id}")
        seen.add(s.sample_id)
        grid = s.patch_grid
        if grid.ndim != 3:
            violations.append(f"sample {s.sample_id}: patch grid must be 3-D")
            continue
        if shape is None:
            shape = grid.shape
        elif grid.shape != shape:
            violations.append(f"sample {s.sample_id}: grid shape {grid.shape} != {shape}")
        if not np.all(np.isfinite(grid)):
            violations.append(f"sample {s.sample_id}: non-finite patch values")
        if grid.shape[0] % 2 or grid.shape[0] % part_count:
            violations.append(f"sample {s.sample_id}: H_p={grid.shape[0]} not divisible by parts")
        if d.role == "source" and s.identity is None:
            violations.append(f"sample {s.sample_id}: source sample missing identity")
        if s.identity is not None and s.identity < 0:
            violations.append(f"sample {s.sample_id}: negative identity")
        if s.camera_id < 0:
            violations.append(f"sample {s.sample_id}: negative camera_id")
    ids = [s.identity for s in d.samples]
    if d.num_identities is not None and all(i is not None for i in ids):
        distinct = len(set(ids))
        if distinct != d.num_identities:
            violations.append(f"num_identities={d.num_identities} but {distinct} distinct identities")
    return violations


def make_dataset(samples: Sequence[Sample], role: str) -> Dataset:
    ids = [s.identity for s in samples]
    num = len(set(ids)) if ids and all(i is not None for i in ids) else None
    return Dataset(tuple(samples), role=role, num_identities=num)


def save_dataset(d: Dataset, path) -> None:
    if not d.samples:
        raise ValueError("cannot write an empty dataset")
    hp, wp, din = d.grid_shape
    lines = [f"{_HEADER} {hp} {wp} {din}"]
    for s in d.samples:
        ident = UNKNOWN_IDENTITY if s.identity is None else s.identity
        values = ",".join(repr(float(x)) for x in s.patch_grid.ravel())
        lines.append(f"{s.sample_id},{ident},{s.camera_id},{values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, role: str = "target-train") -> Dataset:
    """Read a dataset file. Identity -1 is read back as unknown."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open() as fh:
        header = fh.readline().split()
        if header[:2] != _HEADER.split() or len(header) != 5:
            raise ValueError(f"{path}: bad header {' '.join(header)!r}")
        hp, wp, din = (int(x) for x in header[2:])
        samples = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 + hp * wp * din:
                raise ValueError(f"{path}:{lineno}: expected {3 + hp * wp * din} fields, got {len(parts)}")
            sid, ident, cam = int(parts[0]), int(parts[1]), int(parts[2])
            grid = np.array([float(x) for x in parts[3:]], dtype=np.float64).reshape(hp, wp, din)
            samples.append(Sample(sid, grid, None if ident < 0 else ident, cam))
    return make_dataset(samples, role)
