"""Gap-filling rules used by the imputation-based reference models.

``mean_fill`` drops the series mean into every missing tick. ``band_fill``
treats each gap as a band: the band's center takes the series mean, and the
ticks between the center and each observed boundary are linearly
interpolated toward that boundary. Gaps touching the window edge (no
boundary on one side) fall back to the mean.
"""

from __future__ import annotations

import numpy as np

from .numerics import Array


def mean_fill(values, observed, mean) -> Array:
    """Replace missing entries with the per-variable mean."""
    v = np.asarray(values, dtype=float).copy()
    obs = np.asarray(observed, dtype=bool)
    v[~obs] = np.broadcast_to(np.asarray(mean, dtype=float), v.shape)[~obs]
    return v


def _missing_runs(obs: Array):
    padded = np.concatenate([[True], obs, [True]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[0::2], edges[1::2]))  # [start, stop) index pairs


def band_fill_1d(values, observed, mean: float) -> Array:
    """Fill one variable's gaps with the two-sided ramp-to-mean rule.

    For a gap of width W between observed values l and r, place the mean at
    the virtual center position (W + 1) / 2 and interpolate linearly from l
    up to the center and from the center down to r. Odd widths put the exact
    mean on the middle tick.
    """
    v = np.asarray(values, dtype=float).copy()
    obs = np.asarray(observed, dtype=bool)
    n = v.size
    for start, stop in _missing_runs(obs):
        width = stop - start
        has_left = start > 0
        has_right = stop < n
        if not (has_left and has_right):
            v[start:stop] = mean
            continue
        left, right = v[start - 1], v[stop]
        center = (width + 1) / 2.0
        for k in range(1, width + 1):
            if k <= center:
                v[start + k - 1] = left + (mean - left) * k / center
            else:
                v[start + k - 1] = mean + (right - mean) * (k - center) / (width + 1 - center)
    return v


def band_fill(values, observed, mean) -> Array:
    """Columnwise :func:`band_fill_1d` for (N, d) panels."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return band_fill_1d(v, observed, float(np.asarray(mean).reshape(-1)[0]))
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (v.shape[1],))
    out = np.empty_like(v)
    for j in range(v.shape[1]):
        out[:, j] = band_fill_1d(v[:, j], observed, float(mean[j]))
    return out
