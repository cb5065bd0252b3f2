"""Central finite-difference checks for ModelParams-valued gradients."""

from __future__ import annotations

import numpy as np

from .types import ModelParams

# Below this magnitude an entry is compared absolutely: a central difference of a
# loss L carries rounding noise near ulp(L) / 2h, about 1e-9 for L ~ 100, h = 1e-5.
DEFAULT_FLOOR = 1e-4


def numerical_grad(loss_fn, params: ModelParams, h: float = 1e-5, names=ModelParams.NAMES,
                   max_entries=None, rng=None) -> dict:
    """Central differences of ``loss_fn(params) -> float`` w.r.t. entries of ``names``.

    With ``max_entries`` set, arrays larger than that are checked on a random subset
    of entries and the others are left as nan.
    """
    rng = np.random.default_rng(rng)
    out = {}
    for name in names:
        arr = getattr(params, name)
        flat = arr.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            g = np.full(arr.shape, np.nan)
        else:
            entries = range(flat.size)
            g = np.zeros_like(arr)
        for i in entries:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)
            flat[i] = old - h
            down = loss_fn(params)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_relative_error(analytic: ModelParams, numeric: dict, floor: float = DEFAULT_FLOOR) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all checked (non-nan) entries."""
    worst = 0.0
    for name, n in numeric.items():
        a = getattr(analytic, name)
        checked = ~np.isnan(n)
        a, n = a[checked], n[checked]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst
