"""Forecast accuracy metrics and the significance test used by the benchmark.

MASE here normalizes the step-i absolute error by the average step-i error of
the copy-previous predictor over every full window anchored in the training
series. With that convention the copy-previous predictor itself scores
exactly 1.0 per step in-sample, which pins down the scale. MAPE excludes
steps whose true value is zero (the ratio is meaningless there) and reports
how many were excluded.

Metrics return NaN instead of raising when a value is undefined (no scorable
steps, a constant training series); callers treat NaN as "undefined" and
count it.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import stdtr

from .errors import DataError
from .numerics import Array


class MapeResult(NamedTuple):
    value: float      # percentage; NaN when no step was scorable
    scored: int
    excluded: int     # steps dropped because the true value was 0


def mape(preds, actuals) -> MapeResult:
    """Mean absolute percentage error over the horizon steps.

    Steps with missing actuals or missing predictions are skipped; steps with
    a true value of exactly 0 are excluded and counted.
    """
    p = np.asarray(preds, dtype=float).reshape(-1)
    a = np.asarray(actuals, dtype=float).reshape(-1)
    if p.shape != a.shape:
        raise DataError(f"preds and actuals disagree: {p.shape} vs {a.shape}")
    usable = np.isfinite(p) & np.isfinite(a)
    zero = usable & (a == 0.0)
    scored = usable & ~zero
    if not scored.any():
        return MapeResult(float("nan"), 0, int(zero.sum()))
    value = float(np.mean(100.0 * np.abs((p[scored] - a[scored]) / a[scored])))
    return MapeResult(value, int(scored.sum()), int(zero.sum()))


def copy_previous_normalizers(train_values, train_observed, horizon: int) -> Array:
    """Average step-i copy-previous error over all training window anchors.

    For anchors t with t + horizon inside the series, step i contributes
    |X[t+i] - X[t]| whenever both ends are observed. Returns an array of
    length ``horizon`` (entry i-1 for step i); NaN where no pair was observed.
    """
    v = np.asarray(train_values, dtype=float).reshape(-1)
    obs = np.asarray(train_observed, dtype=bool)
    n = v.size
    if horizon < 1:
        raise DataError("horizon must be >= 1")
    if n <= horizon:
        return np.full(horizon, np.nan)
    norms = np.empty(horizon)
    anchors = np.arange(0, n - horizon)
    for i in range(1, horizon + 1):
        ok = obs[anchors] & obs[anchors + i]
        if not ok.any():
            norms[i - 1] = np.nan
        else:
            norms[i - 1] = np.abs(v[anchors + i][ok] - v[anchors][ok]).mean()
    return norms


class MaseResult(NamedTuple):
    value: float   # NaN when undefined
    scored: int


def mase(preds, actuals, train_values, train_observed=None, horizon=None) -> MaseResult:
    """Mean absolute scaled error of one forecast window.

    Step i's error is divided by the training-set average step-i error of the
    copy-previous predictor; the result is the mean over scorable steps.
    Undefined (NaN) when a scored step has a zero or unavailable normalizer,
    or when nothing is scorable.
    """
    p = np.asarray(preds, dtype=float).reshape(-1)
    a = np.asarray(actuals, dtype=float).reshape(-1)
    if p.shape != a.shape:
        raise DataError(f"preds and actuals disagree: {p.shape} vs {a.shape}")
    k = p.size if horizon is None else int(horizon)
    if k != p.size:
        raise DataError("horizon must equal the window length")
    tv = np.asarray(train_values, dtype=float).reshape(-1)
    tobs = np.isfinite(tv) if train_observed is None else np.asarray(train_observed, dtype=bool)
    norms = copy_previous_normalizers(tv, tobs, k)
    scored = np.isfinite(p) & np.isfinite(a)
    if not scored.any():
        return MaseResult(float("nan"), 0)
    step_norms = norms[scored]
    if np.any(~np.isfinite(step_norms)) or np.any(step_norms == 0.0):
        return MaseResult(float("nan"), int(scored.sum()))
    value = float(np.mean(np.abs(p[scored] - a[scored]) / step_norms))
    return MaseResult(value, int(scored.sum()))


def copy_previous(values, observed, from_idx: int, horizon: int) -> Array:
    """Replicate the last observed value before ``from_idx`` across the horizon."""
    v = np.asarray(values, dtype=float)
    obs = np.asarray(observed, dtype=bool)
    prior = np.flatnonzero(obs[:from_idx])
    if prior.size == 0:
        raise DataError("copy_previous needs at least one observed tick before the window")
    last = v[prior[-1]]
    return np.tile(last, (horizon,) + (1,) * (v.ndim - 1))


class WelchResult(NamedTuple):
    t: float
    dof: float
    p: float
    defined: bool
    significant: bool  # at the 0.05 level, two-sided


def welch_t_test(sample_a, sample_b, alpha: float = 0.05) -> WelchResult:
    """Two-sided unequal-variance t-test for a difference in means."""
    a = np.asarray(sample_a, dtype=float).reshape(-1)
    b = np.asarray(sample_b, dtype=float).reshape(-1)
    na, nb = a.size, b.size
    if na < 2 or nb < 2 or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return WelchResult(float("nan"), float("nan"), float("nan"), False, False)
    va, vb = a.var(ddof=1), b.var(ddof=1)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    if se2 == 0.0:
        # both samples constant; equal means is the only defined outcome
        if a.mean() == b.mean():
            return WelchResult(0.0, float(na + nb - 2), 1.0, True, False)
        return WelchResult(float("nan"), float("nan"), float("nan"), False, False)
    t = float((a.mean() - b.mean()) / np.sqrt(se2))
    # Welch-Satterthwaite via variance ratios, which cannot underflow
    ra, rb = sa / se2, sb / se2
    dof = float(1.0 / (ra ** 2 / (na - 1) + rb ** 2 / (nb - 1)))
    p = float(2.0 * stdtr(dof, -abs(t)))
    return WelchResult(t, dof, p, True, p < alpha)
