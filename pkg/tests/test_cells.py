import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gapcast import (GruDParams, MaskedInput, Param, compute_delta,
                     compute_mask, finite_diff_check, grud_backward,
                     grud_input, grud_step, gru_backward, gru_step, init_gru,
                     init_grud, input_decay)
from gapcast.errors import ShapeError


def zeroed_gru(d_in, d_h):
    p = init_gru(np.random.default_rng(0), d_in, d_h)
    for q in p.params():
        q.value[...] = 0.0
    return p


def reference_gru_step(p, h_prev, u):
    """Literal transcription of the four gate equations, scalar loops only."""
    d_h, d_in = p.hidden_dim, p.input_dim

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    def gate(w, uu, b, fn):
        out = []
        for i in range(d_h):
            acc = b.value[i]
            for j in range(d_in):
                acc += w.value[i, j] * u[j]
            for j in range(d_h):
                acc += uu.value[i, j] * h_prev[j]
            out.append(fn(acc))
        return out

    z = gate(p.w_z, p.u_z, p.b_z, sig)
    r = gate(p.w_r, p.u_r, p.b_r, sig)
    hbar = []
    for i in range(d_h):
        acc = p.b_h.value[i]
        for j in range(d_in):
            acc += p.w_h.value[i, j] * u[j]
        for j in range(d_h):
            acc += p.u_h.value[i, j] * (r[j] * h_prev[j])
        hbar.append(math.tanh(acc))
    return np.array([(1 - z[i]) * h_prev[i] + z[i] * hbar[i] for i in range(d_h)])


class TestGruStep:
    def test_zero_weights_halve_previous_state(self):
        p = zeroed_gru(2, 3)
        h_prev = np.array([0.4, -1.0, 2.0])
        h, _ = gru_step(p, h_prev, np.array([5.0, -7.0]))
        assert np.allclose(h, 0.5 * h_prev)

    def test_saturated_update_gate_passes_candidate(self):
        p = zeroed_gru(2, 3)
        rng = np.random.default_rng(1)
        p.w_h.value[...] = rng.normal(size=(3, 2))
        p.b_h.value[...] = rng.normal(size=3)
        p.b_z.value[...] = 50.0  # z ~= 1
        u = rng.normal(size=2)
        h, _ = gru_step(p, np.zeros(3), u)
        assert np.allclose(h, np.tanh(p.w_h.value @ u + p.b_h.value), atol=1e-12)

    def test_matches_independent_transcription(self):
        rng = np.random.default_rng(7)
        p = init_gru(rng, 3, 4)
        h_prev = rng.normal(size=4)
        u = rng.normal(size=3)
        h, _ = gru_step(p, h_prev, u)
        assert np.allclose(h, reference_gru_step(p, h_prev, u), atol=1e-12)

    def test_shape_error(self):
        p = init_gru(np.random.default_rng(0), 3, 4)
        with pytest.raises(ShapeError):
            gru_step(p, np.zeros(4), np.zeros(2))

    @given(st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_gates_strictly_inside_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        p = init_gru(rng, 2, 3)
        _, cache = gru_step(p, rng.normal(size=3) * 5, rng.normal(size=2) * 5)
        for g in (cache.z, cache.r):
            assert np.all(g > 0) and np.all(g < 1)

    @given(st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_state_stays_bounded_from_zero_init(self, seed):
        rng = np.random.default_rng(seed)
        p = init_gru(rng, 2, 3)
        h = np.zeros(3)
        for _ in range(20):
            h, _ = gru_step(p, h, rng.normal(size=2) * 3)
            assert np.all(np.abs(h) <= 1.0)


class TestMaskAndDelta:
    def test_mask_definition(self):
        assert compute_mask(3.2) == 1.0
        assert compute_mask(None) == 0.0
        assert compute_mask(float("nan")) == 0.0

    def test_mask_elementwise(self):
        assert np.array_equal(compute_mask([2.0, None, 1.5]), [1, 0, 1])

    def test_mask_rows(self):
        panel = np.array([[1.0, 2.0], [np.nan, np.nan]])
        assert np.array_equal(compute_mask(panel), [1, 0])

    @pytest.mark.parametrize("mask, expected", [
        ([1, 1, 1], [0, 1, 1]),
        ([1, 0, 0, 0], [0, 1, 2, 3]),
        ([0, 0, 1, 0], [0, 1, 2, 1]),
    ])
    def test_delta_recursion(self, mask, expected):
        assert np.array_equal(compute_delta(mask), expected)

    @given(st.lists(st.booleans(), min_size=2, max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_delta_properties(self, bits):
        m = np.array(bits, dtype=float)
        d = compute_delta(m)
        assert d[0] == 0
        for t in range(1, len(bits)):
            if m[t - 1] > 0:
                assert d[t] == 1
            else:
                assert d[t] == d[t - 1] + 1


class TestInputDecay:
    def test_zero_weights_give_unit_decay(self):
        assert np.allclose(input_decay(np.zeros(3), np.zeros(3), 17.0), 1.0)

    def test_unit_rate_at_delta_one(self):
        got = input_decay(np.ones(2), np.zeros(2), 1.0)
        assert np.allclose(got, math.exp(-1))

    def test_negative_bias_clips_to_one(self):
        assert np.allclose(input_decay(np.zeros(2), np.full(2, -100.0), 5.0), 1.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_range_and_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        w = np.abs(rng.normal(size=3))
        b = rng.normal(size=3)
        deltas = np.sort(rng.integers(0, 50, size=5))
        gammas = np.array([input_decay(w, b, float(d)) for d in deltas])
        assert np.all(gammas > 0) and np.all(gammas <= 1)
        assert np.all(np.diff(gammas, axis=0) <= 1e-15)  # non-increasing in delta


class TestGrudInput:
    def test_observed_passthrough(self):
        got = grud_input(1.0, np.array([9.0]), np.array([1.0]), np.array([2.0]), 0.3)
        assert got[0] == 9.0

    def test_gamma_one_returns_last_value(self):
        got = grud_input(0.0, np.array([9.0]), np.array([1.5]), np.array([2.0]), 1.0)
        assert got[0] == 1.5

    def test_halfway_blend(self):
        got = grud_input(0.0, np.array([0.0]), np.array([2.0]), np.array([4.0]), 0.5)
        assert got[0] == 3.0

    def test_gamma_zero_returns_mean(self):
        got = grud_input(0.0, np.array([9.0]), np.array([1.5]), np.array([2.0]), 0.0)
        assert got[0] == 2.0


def random_grud(rng, d_x=2, d_h=3):
    p = init_grud(rng, d_x, d_h, input_mean=rng.normal(size=d_x))
    # keep the decay pre-activation away from its clip point so finite
    # differences stay valid
    p.decay_b.value[...] = rng.uniform(0.1, 0.5, size=d_x) * rng.choice([-1, 1], size=d_x)
    return p


def reference_grud_step(p: GruDParams, h_prev, x, m, delta, x_last):
    gamma = np.exp(-np.maximum(0.0, p.decay_w.value * delta + p.decay_b.value))
    x_hat = m * x + (1 - m) * (gamma * x_last + (1 - gamma) * p.input_mean)
    u = np.concatenate([x_hat, [m]])
    return reference_gru_step(p.gru, h_prev, u)


class TestGrudStep:
    def test_fully_observed_matches_plain_gru_with_mask_channel(self):
        rng = np.random.default_rng(5)
        p = random_grud(rng)
        h = rng.normal(size=3)
        x = rng.normal(size=2)
        got, _ = grud_step(p, h, MaskedInput(x, 1.0, 0, np.zeros(2)))
        want, _ = gru_step(p.gru, h, np.concatenate([x, [1.0]]))
        assert np.allclose(got, want, atol=1e-14)

    def test_all_missing_with_vanishing_decay_feeds_the_mean(self):
        rng = np.random.default_rng(6)
        p = random_grud(rng)
        p.decay_w.value[...] = 50.0
        p.decay_b.value[...] = 0.3
        h = rng.normal(size=3)
        got, _ = grud_step(p, h, MaskedInput(np.full(2, np.nan), 0.0, 4, rng.normal(size=2)))
        want, _ = gru_step(p.gru, h, np.concatenate([p.input_mean, [0.0]]))
        assert np.allclose(got, want, atol=1e-12)

    def test_matches_independent_transcription(self):
        rng = np.random.default_rng(11)
        p = random_grud(rng)
        h = rng.normal(size=3)
        x = rng.normal(size=2)
        x_last = rng.normal(size=2)
        got, _ = grud_step(p, h, MaskedInput(x, 0.0, 3, x_last))
        want = reference_grud_step(p, h, x, 0.0, 3, x_last)
        assert np.allclose(got, want, atol=1e-12)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(2)
        p = init_gru(rng, 2, 3)
        h, cache = gru_step(p, rng.normal(size=3), rng.normal(size=2))
        dh_prev, du = gru_backward(p, cache, np.zeros(3))
        assert all(np.all(q.grad == 0) for q in p.params())
        assert np.all(dh_prev == 0) and np.all(du == 0)

    def test_single_step_gru_gradcheck(self):
        rng = np.random.default_rng(3)
        p = init_gru(rng, 2, 3)
        h0, u = rng.normal(size=3), rng.normal(size=2)
        target = rng.normal(size=3)

        def loss_fn():
            for q in p.params():
                q.zero_grad()
            h, cache = gru_step(p, h0, u)
            gru_backward(p, cache, 2 * (h - target))
            return float(((h - target) ** 2).sum())

        assert finite_diff_check(loss_fn, p.params(), 1e-5) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_unrolled_grud_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        p = random_grud(rng)
        t_len = 10
        xs = rng.normal(size=(t_len, 2))
        ms = (rng.random(t_len) < 0.6).astype(float)
        deltas = compute_delta(ms).astype(float)
        x_last = np.zeros((t_len, 2))
        last = p.input_mean.copy()
        for t in range(t_len):
            x_last[t] = last
            if ms[t] > 0:
                last = xs[t]
        target = rng.normal(size=3)

        def loss_fn():
            for q in p.params():
                q.zero_grad()
            h = np.zeros(3)
            caches = []
            for t in range(t_len):
                h, c = grud_step(p, h, MaskedInput(xs[t], ms[t], deltas[t], x_last[t]))
                caches.append(c)
            loss = float(((h - target) ** 2).sum())
            dh = 2 * (h - target)
            for t in reversed(range(t_len)):
                dh = grud_backward(p, caches[t], dh)
            return loss

        assert finite_diff_check(loss_fn, p.params(), 1e-5) < 1e-4

    def test_batched_backward_equals_sum_of_singles(self):
        rng = np.random.default_rng(9)
        p = init_gru(rng, 2, 3)
        h0 = rng.normal(size=(4, 3))
        u = rng.normal(size=(4, 2))
        dh = rng.normal(size=(4, 3))

        h_batch, cache = gru_step(p, h0, u)
        gru_backward(p, cache, dh)
        batch_grads = [q.grad.copy() for q in p.params()]
        for q in p.params():
            q.zero_grad()
        singles = np.zeros_like(h_batch)
        for i in range(4):
            h_i, c = gru_step(p, h0[i], u[i])
            singles[i] = h_i
            gru_backward(p, c, dh[i])
        assert np.allclose(h_batch, singles, atol=1e-14)
        for got, q in zip(batch_grads, p.params()):
            assert np.allclose(got, q.grad, atol=1e-12)
