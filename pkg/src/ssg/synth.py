"""Synthetic source/target domains with ground-truth identities and a domain shift.

Each identity owns one signature per horizontal band, so part-level grouping
sees signal that is independent of the whole-body signal. Cameras act as
viewpoints: camera k shifts every patch by k steps along a domain-specific
viewpoint axis, so neighbouring cameras of one identity stay close while the
far ends drift apart. The target domain draws its own axis and applies an
affine mixing map to identity signatures.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .types import Sample, make_dataset


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_identities: int = 25
    samples_per_identity: int = 12
    num_cameras: int = 4
    num_test_identities: int = 0     # 0 -> same as num_identities
    queries_per_identity: int = 2
    height: int = 4
    width: int = 2
    d_in: int = 16
    part_count: int = 2              # bands carrying independent signatures
    sigma_id: float = 1.0
    sigma_noise: float = 0.35
    sigma_cam: float = 2.5           # viewpoint step between consecutive cameras
    cam_jitter: float = 0.1          # per-camera offset off the viewpoint axis
    shift: float = 0.8               # 0 = no mixing, 1 = full random rotation
    shift_translation: float = 0.5
    part_signal: bool = True
    seed: int = 0

    def __post_init__(self):
        for f in ("sigma_id", "sigma_noise", "sigma_cam", "cam_jitter", "shift_translation"):
            if getattr(self, f) < 0:
                raise GenerationError(f"{f} must be >= 0")
        if self.samples_per_identity < 2:
            raise GenerationError("samples_per_identity must be >= 2")
        if not 0.0 <= self.shift <= 1.0:
            raise GenerationError("shift must lie in [0, 1]")
        if self.height % self.part_count:
            raise GenerationError("height must be divisible by part_count")

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class _Domain:
    def __init__(self, spec: SynthSpec, rng, shifted: bool):
        d = spec.d_in
        self.spec = spec
        self.rng = rng
        self.layout = 0.3 * rng.normal(size=(spec.height, spec.width, d))
        axis = rng.normal(size=d)
        axis /= np.linalg.norm(axis)
        steps = np.arange(spec.num_cameras) - (spec.num_cameras - 1) / 2.0
        self.cam_offsets = (spec.sigma_cam * steps[:, None] * axis
                            + spec.cam_jitter * rng.normal(size=(spec.num_cameras, d)))
        if shifted:
            self.mix = (1.0 - spec.shift) * np.eye(d) + spec.shift * _random_rotation(rng, d)
            self.translation = spec.shift_translation * rng.normal(size=d)
        else:
            self.mix = np.eye(d)
            self.translation = np.zeros(d)

    def signatures(self):
        spec = self.spec
        n_bands = spec.part_count if spec.part_count > 1 and spec.part_signal else 1
        sig = spec.sigma_id * self.rng.normal(size=(n_bands, spec.d_in))
        sig = sig @ self.mix.T + self.translation
        if n_bands == 1:
            sig = np.repeat(sig, spec.part_count, axis=0)
        return sig

    def sample(self, sig, camera):
        spec = self.spec
        band_rows = spec.height // spec.part_count
        rows = np.repeat(sig, band_rows, axis=0)  # (H, D)
        grid = self.layout + rows[:, None, :] + self.cam_offsets[camera]
        if spec.sigma_noise > 0:
            band_noise = np.repeat(self.rng.normal(size=(spec.part_count, spec.d_in)), band_rows, axis=0)
            grid = grid + spec.sigma_noise * (band_noise[:, None, :]
                                             + 0.5 * self.rng.normal(size=grid.shape))
        return grid


def _identity_samples(domain: _Domain, identity: int, start_id: int):
    spec = domain.spec
    sig = domain.signatures()
    cam0 = int(domain.rng.integers(spec.num_cameras))
    out = []
    for k in range(spec.samples_per_identity):
        cam = (cam0 + k) % spec.num_cameras
        out.append(Sample(start_id + k, domain.sample(sig, cam), identity, cam))
    return out


def generate(spec: SynthSpec = SynthSpec()):
    """Return ``(source, target_train, query, gallery)`` datasets."""
    if spec.num_cameras < 2:
        raise GenerationError("query/gallery split needs at least two cameras per identity")
    if spec.queries_per_identity >= min(spec.num_cameras, spec.samples_per_identity):
        raise GenerationError("queries_per_identity must leave a cross-camera gallery match")
    rng = np.random.default_rng(spec.seed)
    src_dom = _Domain(spec, np.random.default_rng(rng.integers(2**63)), shifted=False)
    tgt_dom = _Domain(spec, np.random.default_rng(rng.integers(2**63)), shifted=True)
    n_test = spec.num_test_identities or spec.num_identities
    next_id = 0

    source = []
    for ident in range(spec.num_identities):
        source += _identity_samples(src_dom, ident, next_id)
        next_id += spec.samples_per_identity

    target = []
    for ident in range(spec.num_identities):
        target += _identity_samples(tgt_dom, ident, next_id)
        next_id += spec.samples_per_identity

    query, gallery = [], []
    for ident in range(spec.num_identities, spec.num_identities + n_test):
        group = _identity_samples(tgt_dom, ident, next_id)
        next_id += spec.samples_per_identity
        # consecutive samples sit on consecutive cameras, so the first q queries
        # use q distinct cameras and every camera still appears in the gallery
        query += group[: spec.queries_per_identity]
        gallery += group[spec.queries_per_identity:]

    return (make_dataset(source, "source"), make_dataset(target, "target-train"),
            make_dataset(query, "query"), make_dataset(gallery, "gallery"))
