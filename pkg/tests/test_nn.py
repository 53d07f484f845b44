import numpy as np
import pytest

from scribblefield import nn


def make_mlp(dims, seed=0, dtype=np.float64, out_act="identity"):
    rng = np.random.default_rng(seed)
    return nn.Mlp.create(dims, rng, output_activation=out_act, dtype=dtype)


class TestForward:
    def test_zero_weights_zero_bias_gives_zero(self):
        layer = nn.DenseLayer(np.zeros((4, 3)), np.zeros(4), "identity")
        mlp = nn.Mlp([layer])
        out, _ = mlp.forward(np.random.default_rng(0).normal(size=(5, 3)))
        assert np.all(out == 0)

    def test_identity_layer_passes_input_through(self):
        layer = nn.DenseLayer(np.eye(3), np.zeros(3), "identity")
        mlp = nn.Mlp([layer])
        x = np.random.default_rng(1).normal(size=(7, 3))
        out, _ = mlp.forward(x)
        np.testing.assert_allclose(out, x)

    def test_relu_kills_negative_preactivations(self):
        layer = nn.DenseLayer(np.eye(2), np.zeros(2), "relu")
        mlp = nn.Mlp([layer])
        out, _ = mlp.forward(np.array([[-1.0, -3.0], [-0.5, -0.1]]))
        assert np.all(out == 0)

    def test_forward_is_deterministic(self):
        mlp = make_mlp([3, 8, 2])
        x = np.random.default_rng(2).normal(size=(4, 3))
        a, _ = mlp.forward(x)
        b, _ = mlp.forward(x)
        np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch_rejected(self):
        mlp = make_mlp([3, 2])
        with pytest.raises(nn.ConfigurationError):
            mlp.forward(np.zeros((4, 5)))

    def test_inconsistent_layer_dims_rejected(self):
        a = nn.DenseLayer(np.zeros((4, 3)), np.zeros(4))
        b = nn.DenseLayer(np.zeros((2, 5)), np.zeros(2))
        with pytest.raises(nn.ConfigurationError):
            nn.Mlp([a, b])


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        mlp = make_mlp([3, 6, 2])
        x = np.random.default_rng(3).normal(size=(5, 3))
        out, cache = mlp.forward(x)
        grads, dx = mlp.backward(cache, np.zeros_like(out))
        assert np.all(dx == 0)
        for dw, db in grads:
            assert np.all(dw == 0) and np.all(db == 0)

    def test_scalar_linear_layer_weight_grad_is_input(self):
        # y = w*x: dy/dw = x
        layer = nn.DenseLayer(np.array([[2.0]]), np.array([0.0]), "identity")
        mlp = nn.Mlp([layer])
        out, cache = mlp.forward(np.array([[3.5]]))
        grads, _ = mlp.backward(cache, np.array([[1.0]]))
        np.testing.assert_allclose(grads[0][0], [[3.5]])

    def test_matches_finite_differences_on_random_net(self):
        mlp = make_mlp([4, 8, 8, 3], seed=7)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 4))
        target = rng.normal(size=(6, 3))
        params = mlp.parameters("net")

        def loss_fn(_):
            out, _c = mlp.forward(x)
            return float(np.sum((out - target) ** 2))

        out, cache = mlp.forward(x)
        grads, _ = mlp.backward(cache, 2 * (out - target))
        analytic = mlp.grad_dict(grads, "net")
        numeric = nn.finite_difference_grad(loss_fn, params)
        errs = nn.grad_relative_error(analytic, numeric)
        assert max(errs.values()) <= 1e-4, errs

    def test_stale_cache_rejected(self):
        mlp = make_mlp([3, 2])
        other = make_mlp([3, 2], seed=9)
        _, cache = other.forward(np.zeros((1, 3)))
        with pytest.raises(nn.UsageError):
            mlp.backward(cache, np.zeros((1, 2)))

    def test_wrong_upstream_shape_rejected(self):
        mlp = make_mlp([3, 2])
        _, cache = mlp.forward(np.zeros((4, 3)))
        with pytest.raises(nn.UsageError):
            mlp.backward(cache, np.zeros((3, 2)))


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        p = {"w": np.arange(6, dtype=np.float64).reshape(2, 3)}
        before = p["w"].copy()
        state = nn.AdamState(learning_rate=0.1)
        nn.adam_step(p, {"w": np.zeros((2, 3))}, state)
        np.testing.assert_array_equal(p["w"], before)

    def test_first_step_moves_by_lr_times_sign(self):
        # Bias-corrected moments cancel for a fresh state: m_hat = g,
        # v_hat = g^2, so the step is -lr * g / (|g| + eps).
        for g in (2.5, -0.03):
            p = {"w": np.array([1.0])}
            state = nn.AdamState(learning_rate=0.01)
            nn.adam_step(p, {"w": np.array([g])}, state)
            np.testing.assert_allclose(p["w"][0], 1.0 - 0.01 * np.sign(g), rtol=1e-6)

    def test_step_count_increments(self):
        p = {"w": np.zeros(3)}
        state = nn.AdamState(learning_rate=1e-3)
        for i in range(5):
            nn.adam_step(p, {"w": np.ones(3)}, state)
        assert state.step_count == 5

    def test_zero_learning_rate_is_bitwise_noop_on_params(self):
        rng = np.random.default_rng(11)
        p = {"w": rng.normal(size=(4, 4)).astype(np.float32)}
        before = p["w"].tobytes()
        state = nn.AdamState(learning_rate=0.0)
        nn.adam_step(p, {"w": rng.normal(size=(4, 4)).astype(np.float32)}, state)
        assert p["w"].tobytes() == before

    def test_nonfinite_gradient_rejected_with_group_name(self):
        p = {"grid.level3": np.zeros(2)}
        state = nn.AdamState(learning_rate=1e-3)
        bad = {"grid.level3": np.array([np.nan, 0.0])}
        with pytest.raises(ValueError, match="grid.level3"):
            nn.adam_step(p, bad, state)


class TestFiniteDifferenceOracle:
    def test_quadratic_loss(self):
        p = {"p": np.array([3.0])}
        grads = nn.finite_difference_grad(lambda d: 0.5 * float(d["p"][0]) ** 2, p, h=1e-4)
        np.testing.assert_allclose(grads["p"][0], 3.0, atol=1e-6)

    def test_unused_parameter_gets_zero(self):
        p = {"used": np.array([2.0]), "unused": np.array([5.0])}
        grads = nn.finite_difference_grad(lambda d: float(d["used"][0] ** 2), p)
        assert grads["unused"][0] == 0.0

    def test_restores_parameters(self):
        p = {"p": np.array([1.0, 2.0])}
        nn.finite_difference_grad(lambda d: float(np.sum(d["p"] ** 2)), p)
        np.testing.assert_array_equal(p["p"], [1.0, 2.0])

    def test_index_subset(self):
        p = {"p": np.array([1.0, 2.0, 3.0])}
        grads = nn.finite_difference_grad(
            lambda d: float(np.sum(d["p"] ** 2)), p, indices={"p": np.array([1])}
        )
        np.testing.assert_allclose(grads["p"], [0.0, 4.0, 0.0], atol=1e-8)
