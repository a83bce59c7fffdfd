import numpy as np
import pytest
from hypothesis import given, strategies as st

from gapcast import (Adam, Param, RMSProp, TrainingDiverged, UsageError,
                     finite_diff_check, make_optimizer, matvec, sigmoid)
from gapcast.errors import NondeterministicLoss, ShapeError


class TestSigmoid:
    def test_symmetry_point(self):
        assert sigmoid(0.0) == 0.5

    def test_saturation(self):
        assert abs(sigmoid(30.0) - 1.0) < 1e-12

    @given(st.floats(-100, 100))
    def test_complement(self, x):
        assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-12)

    def test_no_overflow_at_extremes(self):
        assert sigmoid(-1000.0) == 0.0
        assert sigmoid(1000.0) == 1.0

    def test_monotone(self):
        xs = np.linspace(-20, 20, 200)
        assert np.all(np.diff(sigmoid(xs)) > 0)

    def test_array_in_array_out(self):
        out = sigmoid(np.array([0.0, 30.0]))
        assert out.shape == (2,)


class TestMatvec:
    def test_identity(self):
        assert np.array_equal(matvec(np.eye(3), np.array([1.0, 2, 3])), [1, 2, 3])

    def test_annihilation(self):
        assert np.array_equal(matvec(np.zeros((2, 3)), np.ones(3)), [0, 0])

    def test_hand_case(self):
        got = matvec(np.array([[1.0, 2], [3, 4]]), np.array([1.0, 1]))
        assert np.array_equal(got, [3, 7])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matvec(np.zeros((2, 3)), np.zeros(2))


class TestParam:
    def test_grad_starts_zero_and_matches_shape(self):
        p = Param(np.ones((2, 3)))
        assert p.grad.shape == (2, 3)
        assert np.all(p.grad == 0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            Param(np.ones(3), grad=np.zeros(4))


class TestAdam:
    def test_zero_gradient_is_identity(self):
        p = Param(np.array([1.0, -2.0, 3.0]))
        before = p.value.copy()
        Adam(learning_rate=0.5).step([p])
        assert np.array_equal(p.value, before)

    def test_first_step_bias_corrected(self):
        # fresh state, grad 1: m_hat = v_hat = 1, so the step is lr/(1 + eps)
        p = Param(np.array([0.0]))
        p.grad[:] = 1.0
        Adam(learning_rate=0.1).step([p])
        assert p.value[0] == pytest.approx(-0.1, abs=1e-8)

    def test_grads_zeroed_and_counter_increments(self):
        p = Param(np.array([0.0]))
        p.grad[:] = 1.0
        opt = Adam()
        opt.step([p])
        assert np.all(p.grad == 0)
        assert opt.step_count == 1

    def test_nan_grad_raises(self):
        p = Param(np.array([0.0]))
        p.grad[:] = np.nan
        with pytest.raises(TrainingDiverged):
            Adam().step([p])

    def test_matches_scalar_simulation(self):
        # independent re-derivation of the update rule on a scalar
        rng = np.random.default_rng(0)
        grads = rng.normal(size=20)
        p = Param(np.array([0.3]))
        opt = Adam(learning_rate=0.05)
        m = v = 0.0
        w = 0.3
        for t, g in enumerate(grads, start=1):
            p.grad[:] = g
            opt.step([p])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert p.value[0] == pytest.approx(w, rel=1e-12)


class TestRMSProp:
    def test_constant_grad_moves_monotonically(self):
        p = Param(np.array([5.0]))
        opt = RMSProp(learning_rate=0.01)
        values = [p.value[0]]
        for _ in range(50):
            p.grad[:] = 1.0
            opt.step([p])
            values.append(p.value[0])
        assert np.all(np.diff(values) < 0)

    def test_matches_scalar_simulation(self):
        p = Param(np.array([1.0]))
        opt = RMSProp(learning_rate=0.02)
        cache, w = 0.0, 1.0
        rng = np.random.default_rng(3)
        for g in rng.normal(size=15):
            p.grad[:] = g
            opt.step([p])
            cache = 0.9 * cache + 0.1 * g * g
            w -= 0.02 * g / (np.sqrt(cache) + 1e-8)
            assert p.value[0] == pytest.approx(w, rel=1e-12)

    def test_zero_gradient_is_identity(self):
        p = Param(np.array([[1.0, 2.0]]))
        before = p.value.copy()
        RMSProp().step([p])
        assert np.array_equal(p.value, before)


def test_make_optimizer_rejects_unknown():
    with pytest.raises(UsageError):
        make_optimizer("sgd", 0.1)


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        p = Param(np.array([3.0]))

        def loss_fn():
            p.zero_grad()
            p.grad[:] = 2 * p.value
            return float(p.value[0] ** 2)

        assert finite_diff_check(loss_fn, [p], 1e-5) < 1e-6

    def test_wrong_gradient_detected(self):
        p = Param(np.array([3.0]))

        def loss_fn():
            p.zero_grad()
            p.grad[:] = 2 * p.value + 0.5  # deliberately off
            return float(p.value[0] ** 2)

        assert finite_diff_check(loss_fn, [p], 1e-5) > 1e-2

    def test_nondeterministic_loss_rejected(self):
        p = Param(np.array([1.0]))
        state = {"n": 0}

        def loss_fn():
            state["n"] += 1
            p.grad[:] = 1.0
            return float(state["n"])

        with pytest.raises(NondeterministicLoss):
            finite_diff_check(loss_fn, [p], 1e-5)

    def test_epsilon_range_enforced(self):
        p = Param(np.array([1.0]))
        with pytest.raises(UsageError):
            finite_diff_check(lambda: 0.0, [p], 1e-3)
