import json
import math

import numpy as np
import pytest

from kanlb.errors import StateError
from kanlb.neural import (
    Adam,
    GaussianPolicy,
    GridSpec,
    KanActivation,
    KanLayer,
    Mlp,
    bspline_basis,
    bspline_basis_deriv,
    clip_grads_,
    effective_basis,
    load_checkpoint,
    save_checkpoint,
    silu,
)

GRID = GridSpec()


def naive_cox_de_boor(x, k, i, t):
    """Textbook recursive B-spline evaluation (order k, classical)."""
    if k == 1:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = 0.0
    if t[i + k - 1] != t[i]:
        left = (x - t[i]) / (t[i + k - 1] - t[i]) * naive_cox_de_boor(x, k - 1, i, t)
    right = 0.0
    if t[i + k] != t[i + 1]:
        right = (t[i + k] - x) / (t[i + k] - t[i + 1]) * naive_cox_de_boor(x, k - 1, i + 1, t)
    return left + right


def rel_err(a, b):
    scale = max(abs(a), abs(b))
    if scale < 1e-6:
        return abs(a - b)
    return abs(a - b) / scale


class TestBsplineBasis:
    def test_order_one_is_interval_indicator(self):
        t = np.array([0.0, 1.0, 2.0, 3.0])
        for x, expected in [(0.5, [1, 0, 0]), (1.5, [0, 1, 0]), (2.2, [0, 0, 1])]:
            assert bspline_basis(x, t, 1).tolist() == expected

    def test_partition_of_unity(self):
        rng = np.random.default_rng(0)
        xs = rng.uniform(GRID.lo, GRID.hi, 500)
        basis = bspline_basis(xs, GRID.knots, GRID.order)
        assert np.abs(basis.sum(axis=-1) - 1.0).max() < 1e-9

    def test_cubic_matches_naive_recursion(self):
        rng = np.random.default_rng(1)
        t = GRID.knots
        order = GRID.order
        xs = rng.uniform(GRID.lo, GRID.hi, 100)
        fast = bspline_basis(xs, t, order)
        for xi, row in zip(xs, fast):
            naive = [naive_cox_de_boor(float(xi), order, i, t)
                     for i in range(len(t) - order)]
            assert np.abs(row - np.array(naive)).max() < 1e-12

    def test_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        xs = rng.uniform(GRID.lo + 0.05, GRID.hi - 0.05, 50)
        h = 1e-6
        d = bspline_basis_deriv(xs, GRID.knots, GRID.order)
        fd = (bspline_basis(xs + h, GRID.knots, GRID.order)
              - bspline_basis(xs - h, GRID.knots, GRID.order)) / (2 * h)
        assert np.abs(d - fd).max() < 1e-5

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            bspline_basis(0.5, [0, 1, 2], 0)
        with pytest.raises(ValueError):
            bspline_basis(0.5, [0, 1, 1, 2], 2)


class TestKanActivation:
    def test_zero_parameters_give_zero(self):
        act = KanActivation(GRID, np.zeros(GRID.n_basis), 0.0, 0.0)
        xs = np.linspace(-3, 4, 50)
        assert np.all(act.value(xs) == 0.0)

    def test_constant_coefficients_reproduce_constant(self):
        c = 1.7
        act = KanActivation(GRID, np.full(GRID.n_basis, c), 0.0, 1.0)
        xs = np.linspace(GRID.lo, GRID.hi, 80)
        assert np.abs(act.value(xs) - c).max() < 1e-9

    def test_sine_fit_error_small_inside_grid(self):
        xs = np.linspace(GRID.lo, GRID.hi, 400)
        basis = bspline_basis(xs, GRID.knots, GRID.order)
        coeffs, *_ = np.linalg.lstsq(basis, np.sin(xs), rcond=None)
        act = KanActivation(GRID, coeffs, 0.0, 1.0)
        assert np.abs(act.value(xs) - np.sin(xs)).max() < 1e-3

    def test_extrapolation_is_linear_and_finite(self):
        rng = np.random.default_rng(3)
        act = KanActivation(GRID, rng.normal(0, 1, GRID.n_basis), 0.5, 1.0)
        for x in (-50.0, 50.0, 1e6):
            assert math.isfinite(float(act.value(x)))
        # beyond the grid the spline part continues with constant slope
        below = act.spline(np.array([GRID.lo - 1.0, GRID.lo - 2.0, GRID.lo - 3.0]))
        steps = np.diff(below)
        assert abs(steps[0] - steps[1]) < 1e-9


class TestKanLayer:
    def test_zero_layer_outputs_zero(self):
        layer = KanLayer(10, 1)
        layer.w_base[:] = 0.0
        layer.w_spline[:] = 0.0
        x = np.linspace(-1, 2, 30).reshape(3, 10)
        assert np.all(layer.forward(x) == 0.0)

    def test_forward_equals_sum_of_activations(self):
        rng = np.random.default_rng(4)
        layer = KanLayer(10, 1, rng=rng)
        x = rng.uniform(-1.5, 2.5, (6, 10))
        out = layer.forward(x)
        parts = np.stack(
            [layer.activation(p).value(x[:, p]) for p in range(10)], axis=1
        )
        assert np.abs(out[:, 0] - parts.sum(axis=1)).max() < 1e-12

    def test_separability(self):
        rng = np.random.default_rng(5)
        layer = KanLayer(10, 1, rng=rng)
        x = rng.uniform(0, 1, (1, 10))
        base = layer.forward(x).copy()
        x2 = x.copy()
        x2[0, 3] += 0.25
        moved = layer.forward(x2)
        expected_delta = (layer.activation(3).value(x2[0, 3])
                          - layer.activation(3).value(x[0, 3]))
        assert abs((moved - base)[0, 0] - expected_delta) < 1e-12

    def test_input_gradient_is_activation_derivative(self):
        rng = np.random.default_rng(6)
        layer = KanLayer(10, 1, rng=rng)
        x = rng.uniform(-0.5, 1.5, (4, 10))
        layer.forward(x)
        _, dx = layer.backward(np.ones((4, 1)))
        for p in range(10):
            expected = layer.activation(p).derivative(x[:, p])
            assert np.abs(dx[:, p] - expected).max() < 1e-12

    def test_backward_requires_forward(self):
        layer = KanLayer(10, 1)
        with pytest.raises(StateError):
            layer.backward(np.ones((1, 1)))


def finite_difference_check(params, grads, loss_fn, n_probe=25, h=1e-5, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in params.items():
        arr = np.atleast_1d(arr)
        g = np.atleast_1d(np.asarray(grads[name]))
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            up = loss_fn()
            flat[k] = old - h
            down = loss_fn()
            flat[k] = old
            worst = max(worst, rel_err(gf[k], (up - down) / (2 * h)))
    return worst


class TestGradients:
    def test_kan_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for trial in range(34):
            layer = KanLayer(10, 1, rng=rng)
            x = rng.uniform(-2.0, 3.0, (5, 10))
            g = rng.standard_normal((5, 1))
            layer.forward(x)
            grads, _ = layer.backward(g)

            def loss():
                return float((layer.forward(x) * g).sum())

            worst = max(worst, finite_difference_check(
                layer.parameters(), grads, loss, n_probe=6, seed=trial))
        assert worst < 1e-4

    def test_mlp_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for trial in range(33):
            net = Mlp((10, 16, 16, 1), rng=rng)
            x = rng.uniform(-1, 2, (5, 10))
            g = rng.standard_normal((5, 1))
            net.forward(x)
            grads, _ = net.backward(g)

            def loss():
                return float((net.forward(x) * g).sum())

            worst = max(worst, finite_difference_check(
                net.parameters(), grads, loss, n_probe=6, seed=trial))
        assert worst < 1e-4

    def test_policy_logprob_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for trial in range(33):
            kind = trial % 2
            net = (KanLayer(10, 1, rng=rng, w_base_init=0.1) if kind == 0
                   else Mlp((10, 16, 16, 1), rng=rng))
            policy = GaussianPolicy(net, log_std=float(rng.uniform(-1, 0.2)))
            x = rng.uniform(0, 1.2, (6, 10))
            actions = rng.uniform(-1.5, 1.5, 6)
            upstream = rng.standard_normal(6)
            policy.log_prob(x, actions)
            grads = policy.backward_log_prob(upstream)

            def loss():
                return float((policy.log_prob(x, actions) * upstream).sum())

            worst = max(worst, finite_difference_check(
                policy.parameters(), grads, loss, n_probe=6, seed=trial))
        assert worst < 1e-4

    def test_clamp_gradient_dead_outside(self):
        layer = KanLayer(10, 1)
        layer.w_base[:] = 0.0
        layer.w_spline[:] = 0.0
        policy = GaussianPolicy(layer, log_std=0.0)
        layer.w_spline[0, 0] = 1.0
        layer.coeffs[0, 0, :] = 3.0  # raw mean = 3 -> clamp saturates at 1
        x = np.full((1, 10), 0.5)
        with np.errstate(all="ignore"):
            policy.log_prob(x, np.array([0.2]))
        assert policy.last_raw()[0] > 1.0
        grads = policy.backward_log_prob(np.ones(1))
        assert np.all(grads["mean.coeffs"] == 0.0)
        assert np.all(grads["mean.w_base"] == 0.0)


class TestGaussianPolicy:
    def test_near_zero_std_sampling_is_deterministic(self):
        rng = np.random.default_rng(10)
        net = KanLayer(10, 1, rng=rng, w_base_init=0.1)
        policy = GaussianPolicy(net, log_std=-20.0)
        obs = rng.uniform(0, 1, 10)
        mean = policy.act(obs)
        action, _ = policy.sample(obs, np.random.default_rng(0))
        assert abs(action - mean) < 1e-6

    def test_logprob_at_mean(self):
        rng = np.random.default_rng(11)
        net = Mlp((10, 8, 1), rng=rng)
        for log_std in (-0.5, 0.0, 0.7):
            policy = GaussianPolicy(net, log_std=log_std)
            obs = rng.uniform(0, 1, 10)
            mean = policy.act(obs)
            lp = policy.log_prob(obs[None], np.array([mean]))[0]
            assert lp == pytest.approx(-log_std - 0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_sample_std_matches_log_std(self):
        rng = np.random.default_rng(12)
        net = Mlp((10, 8, 1), rng=rng)
        policy = GaussianPolicy(net, log_std=-0.7)
        obs = rng.uniform(0, 1, 10)
        samples = np.array([policy.sample(obs, rng)[0] for _ in range(100_000)])
        assert abs(samples.std() - math.exp(-0.7)) / math.exp(-0.7) < 0.02

    def test_entropy_formula(self):
        net = Mlp((10, 8, 1))
        policy = GaussianPolicy(net, log_std=0.3)
        assert policy.entropy() == pytest.approx(0.3 + 0.5 * (1 + math.log(2 * math.pi)))


class TestCritic:
    def test_zero_weights_give_zero(self):
        net = Mlp((10, 64, 64, 1))
        assert np.all(net.forward(np.ones((3, 10))) == 0.0)

    def test_matches_hand_rolled_two_layer_tanh(self):
        rng = np.random.default_rng(13)
        net = Mlp((10, 64, 64, 1), rng=rng)
        x = rng.uniform(-1, 1, (5, 10))
        w0, w1, w2 = net.weights
        b0, b1, b2 = net.biases
        by_hand = np.tanh(np.tanh(x @ w0.T + b0) @ w1.T + b1) @ w2.T + b2
        assert np.abs(net.forward(x) - by_hand).max() < 1e-12

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(14)
        net = Mlp((10, 64, 64, 1), rng=rng)
        x = rng.uniform(-1, 1, (4, 10))
        assert np.array_equal(net.forward(x), net.forward(x))


class TestOptimizer:
    def test_adam_reduces_quadratic(self):
        params = {"w": np.array([5.0, -3.0])}
        opt = Adam(params)
        for _ in range(500):
            grads = {"w": 2 * params["w"]}
            opt.step(grads, 0.05)
        assert np.abs(params["w"]).max() < 1e-2

    def test_grad_clip_scales_to_max_norm(self):
        grads = {"a": np.array([3.0, 4.0])}
        norm = clip_grads_(grads, 0.5)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(0.5)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(15)
        policy = GaussianPolicy(KanLayer(10, 1, rng=rng), log_std=-0.25)
        critic = Mlp((10, 64, 64, 1), rng=rng)
        path = save_checkpoint(tmp_path / "ckpt.json", "kan", policy, critic,
                               meta={"note": "test"})
        kind, policy2, critic2, meta = load_checkpoint(path)
        assert kind == "kan" and meta == {"note": "test"}
        for (k1, v1), (k2, v2) in zip(sorted(policy.parameters().items()),
                                      sorted(policy2.parameters().items())):
            assert k1 == k2 and np.array_equal(v1, v2)
        for (k1, v1), (k2, v2) in zip(sorted(critic.parameters().items()),
                                      sorted(critic2.parameters().items())):
            assert k1 == k2 and np.array_equal(v1, v2)

    def test_mlp_actor_roundtrip(self, tmp_path):
        rng = np.random.default_rng(16)
        policy = GaussianPolicy(Mlp((10, 64, 64, 1), rng=rng), log_std=0.1)
        critic = Mlp((10, 64, 64, 1), rng=rng)
        path = save_checkpoint(tmp_path / "ckpt.json", "mlp", policy, critic)
        kind, policy2, _, _ = load_checkpoint(path)
        assert kind == "mlp"
        x = rng.uniform(0, 1, (3, 10))
        assert np.array_equal(policy.mean_net.forward(x), policy2.mean_net.forward(x))

    def test_schema_guard(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"schema": "something-else"}))
        with pytest.raises(ValueError):
            load_checkpoint(bad)

    def test_grid_survives_roundtrip(self, tmp_path):
        grid = GridSpec(lo=-2.0, hi=3.0, intervals=7, spline_order=3)
        policy = GaussianPolicy(KanLayer(10, 1, grid=grid,
                                         rng=np.random.default_rng(0)))
        critic = Mlp((10, 8, 1))
        path = save_checkpoint(tmp_path / "c.json", "kan", policy, critic)
        _, policy2, _, _ = load_checkpoint(path)
        assert policy2.mean_net.grid == grid


class TestEffectiveBasis:
    def test_inside_matches_plain_basis(self):
        rng = np.random.default_rng(17)
        xs = rng.uniform(GRID.lo, GRID.hi, 50)
        b_eff, _ = effective_basis(xs, GRID)
        assert np.abs(b_eff - bspline_basis(xs, GRID.knots, GRID.order)).max() == 0.0

    def test_silu_shape(self):
        assert silu(np.array([0.0]))[0] == 0.0
        assert silu(np.array([30.0]))[0] == pytest.approx(30.0, rel=1e-9)
