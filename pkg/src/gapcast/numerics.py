"""Dense float64 primitives: activations, parameter containers, optimizers,
and finite-difference gradient checking.

Everything here is double precision. Hidden sizes in this package are single
digits, so there is no reason to trade precision for speed, and gradient
checks stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NondeterministicLoss, ShapeError, TrainingDiverged, UsageError

Array = np.ndarray


def sigmoid(x):
    """Logistic function 1 / (1 + exp(-x)), elementwise and overflow-safe.

    Scalars in, scalar out; arrays in, array out.
    """
    arr = np.asarray(x, dtype=float)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def matvec(m: Array, v: Array) -> Array:
    """Matrix-vector product with explicit shape validation."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if m.ndim != 2 or v.ndim != 1:
        raise ShapeError(f"matvec expects a matrix and a vector, got {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec dimension mismatch: {m.shape} x {v.shape}")
    return m @ v


def assert_all_finite(a: Array, what: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        raise TrainingDiverged(f"non-finite values in {what}")


@dataclass
class Param:
    """A trainable tensor with an accumulated-gradient slot of the same shape."""

    value: Array
    grad: Array = field(default=None)  # type: ignore[assignment]
    name: str = ""

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=float)
            if self.grad.shape != self.value.shape:
                raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> Array:
    """Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Optimizer:
    """Base class holding the step counter and the grad-validation contract.

    ``step`` raises :class:`TrainingDiverged` if any gradient is non-finite,
    applies the update rule, then zeroes every gradient.
    """

    kind = "none"

    def __init__(self, learning_rate: float):
        if learning_rate < 0:
            raise UsageError("learning_rate must be >= 0")
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self, params: list[Param]) -> None:
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in parameter '{p.name}'")
        self.step_count += 1
        self._update(params)
        for p in params:
            p.zero_grad()

    def _update(self, params: list[Param]) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    """Adam with bias correction. Defaults: lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8."""

    kind = "adam"

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: list[Array] = []
        self._v: list[Array] = []

    def _update(self, params: list[Param]) -> None:
        if not self._m:
            self._m = [np.zeros_like(p.value) for p in params]
            self._v = [np.zeros_like(p.value) for p in params]
        if len(self._m) != len(params):
            raise UsageError("optimizer state does not match the parameter list")
        t = self.step_count
        for i, p in enumerate(params):
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * p.grad
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * p.grad ** 2
            m_hat = self._m[i] / (1 - self.beta1 ** t)
            v_hat = self._v[i] / (1 - self.beta2 ** t)
            p.value -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class RMSProp(Optimizer):
    """RMSProp. Defaults: lr=1e-3, decay=0.9, eps=1e-8."""

    kind = "rmsprop"

    def __init__(self, learning_rate: float = 1e-3, decay: float = 0.9, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.decay, self.eps = decay, eps
        self._cache: list[Array] = []

    def _update(self, params: list[Param]) -> None:
        if not self._cache:
            self._cache = [np.zeros_like(p.value) for p in params]
        if len(self._cache) != len(params):
            raise UsageError("optimizer state does not match the parameter list")
        for i, p in enumerate(params):
            self._cache[i] = self.decay * self._cache[i] + (1 - self.decay) * p.grad ** 2
            p.value -= self.learning_rate * p.grad / (np.sqrt(self._cache[i]) + self.eps)


def make_optimizer(kind: str, learning_rate: float) -> Optimizer:
    kind = kind.lower()
    if kind == "adam":
        return Adam(learning_rate)
    if kind == "rmsprop":
        return RMSProp(learning_rate)
    raise UsageError(f"unknown optimizer kind '{kind}' (expected adam or rmsprop)")


def finite_diff_check(loss_fn, params: list[Param], epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be deterministic, take no arguments, and on every call
    zero the gradients, run its own forward and backward passes, and return
    the scalar loss; after it returns, each ``Param.grad`` holds the analytic
    gradient. Returns the maximum over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not (1e-6 <= epsilon <= 1e-4):
        raise UsageError("epsilon must lie in [1e-6, 1e-4]")
    l0 = loss_fn()
    analytic = [p.grad.copy() for p in params]
    l1 = loss_fn()
    if l0 != l1:
        raise NondeterministicLoss(f"loss_fn returned {l0} then {l1} for identical calls")

    worst = 0.0
    for p, a in zip(params, analytic):
        flat_value = p.value.reshape(-1)
        flat_a = a.reshape(-1)
        for i in range(flat_value.size):
            orig = flat_value[i]
            flat_value[i] = orig + epsilon
            la = loss_fn()
            flat_value[i] = orig - epsilon
            lb = loss_fn()
            flat_value[i] = orig
            numeric = (la - lb) / (2 * epsilon)
            rel = abs(flat_a[i] - numeric) / max(abs(flat_a[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    # leave gradients in the analytic state rather than half-perturbed garbage
    loss_fn()
    return worst
