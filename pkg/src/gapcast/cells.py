"""GRU and decay-input GRU cells: forward steps plus hand-derived backward passes.

A cell step works on batches: hidden states are ``(B, d_h)`` and inputs
``(B, d_in)``. Single vectors are promoted to a batch of one and demoted on
the way out, so ``gru_step(p, h, u)`` with 1-D arguments behaves like the
textbook per-example update:

    z = sigmoid(W_z u + U_z h_prev + b_z)
    r = sigmoid(W_r u + U_r h_prev + b_r)
    hbar = tanh(W_h u + U_h (r * h_prev) + b_h)
    h = (1 - z) * h_prev + z * hbar

The decay cell handles gaps in its input stream: a missing input is replaced
by a learned convex combination of the last observed value and the empirical
mean, with the weight decaying in the time since the last observation, and the
binary availability flag is appended to the cell input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .numerics import Param, sigmoid, uniform_init

Array = np.ndarray


@dataclass
class GruParams:
    """Weights of one GRU layer: per gate an input map W, a recurrent map U, a bias b."""

    w_z: Param
    u_z: Param
    b_z: Param
    w_r: Param
    u_r: Param
    b_r: Param
    w_h: Param
    u_h: Param
    b_h: Param

    @property
    def input_dim(self) -> int:
        return self.w_z.value.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.value.shape[0]

    def params(self) -> list[Param]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h]


def init_gru(rng: np.random.Generator, input_dim: int, hidden_dim: int,
             name: str = "gru") -> GruParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    if input_dim < 1 or hidden_dim < 1:
        raise ShapeError("input_dim and hidden_dim must be positive")

    def w(tag):
        return Param(uniform_init(rng, (hidden_dim, input_dim), input_dim), name=f"{name}.{tag}")

    def u(tag):
        return Param(uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim), name=f"{name}.{tag}")

    def b(tag):
        return Param(np.zeros(hidden_dim), name=f"{name}.{tag}")

    return GruParams(w("w_z"), u("u_z"), b("b_z"),
                     w("w_r"), u("u_r"), b("b_r"),
                     w("w_h"), u("u_h"), b("b_h"))


@dataclass
class GruCache:
    """Forward intermediates needed by the backward pass."""

    u: Array
    h_prev: Array
    z: Array
    r: Array
    hbar: Array
    squeeze: bool


def _promote(a: Array, dim: int, what: str) -> tuple[Array, bool]:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
        squeezed = True
    elif a.ndim == 2:
        squeezed = False
    else:
        raise ShapeError(f"{what} must be 1-D or 2-D, got shape {a.shape}")
    if a.shape[1] != dim:
        raise ShapeError(f"{what} has width {a.shape[1]}, expected {dim}")
    return a, squeezed


def gru_step(p: GruParams, h_prev: Array, u: Array) -> tuple[Array, GruCache]:
    """One GRU update. Returns the new hidden state and the backward cache."""
    h_prev, sq_h = _promote(h_prev, p.hidden_dim, "h_prev")
    u, sq_u = _promote(u, p.input_dim, "u")
    if h_prev.shape[0] != u.shape[0]:
        raise ShapeError(f"batch mismatch: h_prev {h_prev.shape} vs u {u.shape}")
    z = sigmoid(u @ p.w_z.value.T + h_prev @ p.u_z.value.T + p.b_z.value)
    r = sigmoid(u @ p.w_r.value.T + h_prev @ p.u_r.value.T + p.b_r.value)
    hbar = np.tanh(u @ p.w_h.value.T + (r * h_prev) @ p.u_h.value.T + p.b_h.value)
    h = (1.0 - z) * h_prev + z * hbar
    squeeze = sq_h and sq_u
    cache = GruCache(u, h_prev, z, r, hbar, squeeze)
    return (h[0] if squeeze else h), cache


def gru_backward(p: GruParams, cache: GruCache, dh: Array) -> tuple[Array, Array]:
    """Backward through one GRU step.

    Accumulates parameter gradients into ``p`` and returns
    ``(dL/dh_prev, dL/du)``. ``dh`` must match the shape ``gru_step`` returned.
    """
    dh, _ = _promote(dh, p.hidden_dim, "dh")
    u, h_prev, z, r, hbar = cache.u, cache.h_prev, cache.z, cache.r, cache.hbar

    dz = dh * (hbar - h_prev)
    dhbar = dh * z
    dh_prev = dh * (1.0 - z)

    da_h = dhbar * (1.0 - hbar ** 2)
    p.w_h.grad += da_h.T @ u
    p.u_h.grad += da_h.T @ (r * h_prev)
    p.b_h.grad += da_h.sum(axis=0)
    du = da_h @ p.w_h.value
    d_rh = da_h @ p.u_h.value
    dr = d_rh * h_prev
    dh_prev += d_rh * r

    da_z = dz * z * (1.0 - z)
    p.w_z.grad += da_z.T @ u
    p.u_z.grad += da_z.T @ h_prev
    p.b_z.grad += da_z.sum(axis=0)
    du += da_z @ p.w_z.value
    dh_prev += da_z @ p.u_z.value

    da_r = dr * r * (1.0 - r)
    p.w_r.grad += da_r.T @ u
    p.u_r.grad += da_r.T @ h_prev
    p.b_r.grad += da_r.sum(axis=0)
    du += da_r @ p.w_r.value
    dh_prev += da_r @ p.u_r.value

    if cache.squeeze:
        return dh_prev[0], du[0]
    return dh_prev, du


# ---------------------------------------------------------------------------
# Missing-input bookkeeping and the decay cell
# ---------------------------------------------------------------------------

def compute_mask(values) -> Array:
    """Availability flags: 1.0 where a value is observed, 0.0 where missing.

    ``values`` may be a scalar, ``None``, or a sequence whose entries are
    ``None``/NaN at missing ticks. For 2-D input, a tick counts as observed
    when its row is fully finite.
    """
    if values is None:
        return np.float64(0.0)
    if np.isscalar(values):
        return np.float64(0.0 if np.isnan(values) else 1.0)
    arr = np.asarray([np.nan if v is None else v for v in values], dtype=float)
    if arr.ndim == 2:
        return np.all(np.isfinite(arr), axis=1).astype(float)
    return np.isfinite(arr).astype(float)


def compute_delta(mask_seq) -> Array:
    """Ticks since the last observation, per the standard recursion.

    delta[0] = 0; for t > 0, delta[t] = 1 if mask[t-1] else 1 + delta[t-1].
    """
    m = np.asarray(mask_seq, dtype=float)
    if m.ndim != 1 or m.size == 0:
        raise ShapeError("mask sequence must be non-empty and 1-D")
    delta = np.zeros(m.size, dtype=np.int64)
    for t in range(1, m.size):
        delta[t] = 1 if m[t - 1] > 0 else delta[t - 1] + 1
    return delta


def input_decay(decay_w: Array, decay_b: Array, delta) -> Array:
    """Decay factor exp(-max(0, w * delta + b)), componentwise in (0, 1].

    ``decay_w`` holds one rate per input variable (the diagonal of the decay
    map); ``delta`` may be a scalar or broadcastable array.
    """
    pre = np.maximum(0.0, np.asarray(decay_w, dtype=float) * delta + np.asarray(decay_b, dtype=float))
    return np.exp(-pre)


def grud_input(m, x, x_last, x_mean, gamma) -> Array:
    """Observed inputs pass through; missing ones blend last value and mean.

    x_hat = m * x + (1 - m) * (gamma * x_last + (1 - gamma) * x_mean)
    """
    m = np.asarray(m, dtype=float)
    return m * np.asarray(x, dtype=float) + (1.0 - m) * (
        gamma * np.asarray(x_last, dtype=float) + (1.0 - gamma) * np.asarray(x_mean, dtype=float))


@dataclass
class GruDParams:
    """A GRU whose input stream may have gaps.

    The wrapped GRU consumes ``concat(x_hat, m)``, so its input width is the
    variable count plus one. ``input_mean`` is the empirical mean of observed
    training inputs and is not trained.
    """

    gru: GruParams
    decay_w: Param  # (d_x,) one decay rate per input variable
    decay_b: Param  # (d_x,)
    input_mean: Array  # (d_x,)

    @property
    def var_dim(self) -> int:
        return self.decay_w.value.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.gru.hidden_dim

    def params(self) -> list[Param]:
        return self.gru.params() + [self.decay_w, self.decay_b]


def init_grud(rng: np.random.Generator, var_dim: int, hidden_dim: int,
              input_mean: Array | None = None, name: str = "grud") -> GruDParams:
    gru = init_gru(rng, var_dim + 1, hidden_dim, name=f"{name}.gru")
    decay_w = Param(uniform_init(rng, (var_dim,), var_dim), name=f"{name}.decay_w")
    decay_b = Param(np.zeros(var_dim), name=f"{name}.decay_b")
    mean = np.zeros(var_dim) if input_mean is None else np.asarray(input_mean, dtype=float)
    return GruDParams(gru, decay_w, decay_b, mean)


@dataclass
class GruDCache:
    gru: GruCache
    m: Array       # (B, 1)
    x_last: Array  # (B, d_x)
    delta: Array   # (B, 1)
    gamma: Array   # (B, d_x)
    pre: Array     # (B, d_x) decay pre-activation before the max(0, .) clip
    squeeze: bool


@dataclass
class MaskedInput:
    """One decoder tick of a gappy stream: value, availability, gap bookkeeping."""

    x: Array
    m: float | Array
    delta: int | Array
    x_last: Array


def grud_step(p: GruDParams, h_prev: Array, masked: MaskedInput) -> tuple[Array, GruDCache]:
    """One decay-cell update on a possibly missing input tick."""
    x_raw = np.asarray(masked.x, dtype=float)
    squeeze = x_raw.ndim == 1 and np.asarray(h_prev).ndim == 1
    x, _ = _promote(np.nan_to_num(x_raw), p.var_dim, "x")
    x_last, _ = _promote(masked.x_last, p.var_dim, "x_last")
    h2, _ = _promote(h_prev, p.hidden_dim, "h_prev")
    b = x.shape[0]
    m = np.asarray(masked.m, dtype=float).reshape(-1, 1)
    delta = np.asarray(masked.delta, dtype=float).reshape(-1, 1)
    if m.shape[0] == 1 and b > 1:
        m = np.repeat(m, b, axis=0)
    if delta.shape[0] == 1 and b > 1:
        delta = np.repeat(delta, b, axis=0)

    pre = p.decay_w.value * delta + p.decay_b.value          # (B, d_x)
    gamma = np.exp(-np.maximum(0.0, pre))
    x_hat = grud_input(m, x, x_last, p.input_mean, gamma)
    u = np.concatenate([x_hat, m], axis=1)
    h, gcache = gru_step(p.gru, h2, u)
    cache = GruDCache(gcache, m, x_last, delta, gamma, pre, squeeze)
    return (h[0] if squeeze else h), cache


def grud_backward(p: GruDParams, cache: GruDCache, dh: Array) -> Array:
    """Backward through one decay-cell step; returns dL/dh_prev.

    The input stream carries data, not activations, so no gradient flows to
    ``x``; the decay parameters do receive gradients through gamma.
    """
    dh2, _ = _promote(dh, p.hidden_dim, "dh")
    dh_prev, du = gru_backward(p.gru, cache.gru, dh2)
    dx_hat = du[:, :p.var_dim]
    dgamma = dx_hat * (1.0 - cache.m) * (cache.x_last - p.input_mean)
    dpre = np.where(cache.pre > 0, -cache.gamma * dgamma, 0.0)
    p.decay_w.grad += (dpre * cache.delta).sum(axis=0)
    p.decay_b.grad += dpre.sum(axis=0)
    return dh_prev[0] if cache.squeeze else dh_prev
