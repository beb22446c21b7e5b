import numpy as np
import pytest

from rlmesh.container import load_container, save_container
from rlmesh.errors import (
    CheckpointIntegrityError,
    ConfigurationError,
    ContractViolationError,
    NumericFaultError,
)
from rlmesh.funcapprox import (
    AdamState,
    Gradient,
    MLPSpec,
    ParamVector,
    adam_step,
    clip_grad_norm,
    init_params,
    mlp_backward,
    mlp_forward,
    polyak_update,
)

from oracles import assert_gradients_match, central_differences, mlp_forward_bruteforce


def linear_spec(n_in, n_out):
    return MLPSpec(n_in, (), n_out)


class TestSpec:
    def test_param_count(self):
        spec = MLPSpec(4, (8,), 2, activation="tanh")
        assert spec.param_count() == (4 + 1) * 8 + (8 + 1) * 2

    def test_rejects_bad_dims(self):
        with pytest.raises(ConfigurationError):
            MLPSpec(0, (4,), 2)
        with pytest.raises(ConfigurationError):
            MLPSpec(3, (4,), 2, activation="sigmoid")
        with pytest.raises(ConfigurationError):
            MLPSpec(3, (4,), 2, output_activation="relu")


class TestForward:
    def test_zero_weights_return_bias(self):
        spec = linear_spec(3, 2)
        values = np.zeros(spec.param_count())
        values[-2:] = [0.5, -1.5]
        params = ParamVector(values)
        for x in (np.zeros(3), np.ones(3), np.array([3.0, -2.0, 7.0])):
            assert np.array_equal(mlp_forward(spec, params, x), [0.5, -1.5])

    def test_identity_weights(self):
        spec = linear_spec(3, 3)
        values = np.zeros(spec.param_count())
        values[:9] = np.eye(3).ravel()
        x = np.array([1.0, -2.0, 0.25])
        assert np.array_equal(mlp_forward(spec, values, x), x)

    def test_matches_matrix_product_oracle(self):
        spec = MLPSpec(4, (8,), 2, activation="tanh")
        params = init_params(spec, seed=123)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 4))
        ours = mlp_forward(spec, params, x)
        theirs = mlp_forward_bruteforce(spec, params.values, x)
        assert np.max(np.abs(ours - theirs)) <= 1e-12

    def test_referentially_transparent(self):
        spec = MLPSpec(5, (7, 3), 2, activation="relu")
        params = init_params(spec, seed=9)
        x = np.random.default_rng(4).standard_normal((6, 5))
        a = mlp_forward(spec, params, x)
        b = mlp_forward(spec, params, x)
        assert np.array_equal(a, b)

    def test_dimension_mismatch(self):
        spec = linear_spec(3, 2)
        params = init_params(spec, seed=0)
        with pytest.raises(ConfigurationError):
            mlp_forward(spec, params, np.zeros(4))
        with pytest.raises(ConfigurationError):
            mlp_forward(spec, params.values[:-1], np.zeros(3))


class TestBackward:
    def test_linear_closed_form(self):
        spec = linear_spec(3, 2)
        params = init_params(spec, seed=5)
        x = np.array([1.0, 2.0, -1.0])
        c = np.array([0.7, -0.3])
        grad = mlp_backward(spec, params, x, c)
        w_grad = grad.values[:6].reshape(2, 3)
        b_grad = grad.values[6:]
        assert np.allclose(w_grad, np.outer(c, x), atol=1e-15)
        assert np.allclose(b_grad, c, atol=1e-15)

    def test_zero_upstream_gives_zero_gradient(self):
        spec = MLPSpec(3, (5,), 1)
        params = init_params(spec, seed=2)
        grad = mlp_backward(spec, params, np.ones((4, 3)), np.zeros((4, 1)))
        assert np.array_equal(grad.values, np.zeros(spec.param_count()))

    def test_finite_differences_3_5_1(self):
        spec = MLPSpec(3, (5,), 1, activation="tanh")
        params = init_params(spec, seed=77)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((4, 3))
        upstream = rng.standard_normal((4, 1))

        grad = mlp_backward(spec, params, x, upstream)

        def loss(theta):
            return float(np.sum(mlp_forward(spec, theta, x) * upstream) / x.shape[0])

        numeric = central_differences(loss, params.values, step=1e-6)
        assert_gradients_match(grad.values, numeric, rtol=1e-5)

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_finite_differences_randomized_specs(self, activation):
        rng = np.random.default_rng(31 if activation == "tanh" else 32)
        for trial in range(100):
            n_in = int(rng.integers(1, 5))
            n_out = int(rng.integers(1, 4))
            hidden = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(0, 3)))
            out_act = "tanh" if rng.random() < 0.3 else "none"
            spec = MLPSpec(n_in, hidden, n_out, activation=activation, output_activation=out_act)
            # random dense parameters (zero biases put relu pre-activations
            # exactly on the kink, where finite differences are undefined)
            params = 0.5 * rng.standard_normal(spec.param_count())
            x = rng.standard_normal((3, n_in))
            upstream = rng.standard_normal((3, n_out))
            grad = mlp_backward(spec, params, x, upstream)

            def loss(theta, x=x, upstream=upstream, spec=spec):
                return float(np.sum(mlp_forward(spec, theta, x) * upstream) / x.shape[0])

            numeric = central_differences(loss, params, step=1e-6)
            assert_gradients_match(grad.values, numeric, rtol=1e-5)

    def test_input_gradient(self):
        spec = MLPSpec(4, (6,), 2, activation="tanh")
        params = init_params(spec, seed=3)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((2, 4))
        upstream = rng.standard_normal((2, 2))
        _, input_grad = mlp_backward(spec, params, x, upstream, return_input_grad=True)
        # per-sample, unaveraged: check row b against finite differences in x_b
        for b in range(2):
            def loss(xb, b=b):
                xs = x.copy()
                xs[b] = xb
                return float(np.sum(mlp_forward(spec, params, xs) * upstream))

            numeric = central_differences(loss, x[b], step=1e-6)
            assert_gradients_match(input_grad[b], numeric, rtol=1e-5)


class TestInit:
    def test_deterministic(self):
        spec = MLPSpec(4, (8,), 2)
        a = init_params(spec, seed=11)
        b = init_params(spec, seed=11)
        assert np.array_equal(a.values, b.values)
        c = init_params(spec, seed=12)
        assert not np.array_equal(a.values, c.values)

    def test_orthogonal_rows(self):
        spec = MLPSpec(8, (), 4, activation="relu")
        params = init_params(spec, seed=1, output_gain=1.0)
        w = params.values[:32].reshape(4, 8)
        assert np.allclose(w @ w.T, np.eye(4), atol=1e-12)

    def test_output_gain(self):
        spec = MLPSpec(6, (), 6)
        small = init_params(spec, seed=4, output_gain=0.01)
        w = small.values[:36].reshape(6, 6)
        assert np.allclose(w @ w.T, 1e-4 * np.eye(6), atol=1e-14)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        params = ParamVector(np.array([1.0, -2.0, 3.0]))
        state = AdamState.zeros(3)
        zero = Gradient(np.zeros(3))
        current = params
        for k in range(5):
            current, state = adam_step(current, zero, state, lr=0.01)
            assert np.array_equal(current.values, params.values)
            assert current.version == k + 1
            assert state.step_count == k + 1

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -1.7, 2.2, -0.01])
        params = ParamVector(np.zeros(4))
        lr = 2.5e-4
        new, _ = adam_step(params, Gradient(g), AdamState.zeros(4), lr=lr)
        # m_hat = g, v_hat = g^2 on the first step, so the move is -lr*sign(g)
        # up to the eps correction.
        expected = -lr * g / (np.abs(g) + 1e-8)
        assert np.allclose(new.values, expected, atol=1e-12)
        assert np.allclose(np.abs(new.values), lr, rtol=1e-5)

    def test_two_steps_match_handrolled_oracle(self):
        rng = np.random.default_rng(6)
        g = rng.standard_normal(5)
        theta = rng.standard_normal(5)
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8

        m = np.zeros(5)
        v = np.zeros(5)
        expected = theta.copy()
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected = expected - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

        params = ParamVector(theta)
        state = AdamState.zeros(5)
        for _ in range(2):
            params, state = adam_step(params, Gradient(g), state, lr, b1, b2, eps)
        assert np.max(np.abs(params.values - expected)) <= 1e-12

    def test_nan_gradient_rejected(self):
        params = ParamVector(np.zeros(2))
        bad = Gradient(np.array([np.nan, 0.0]))
        with pytest.raises(NumericFaultError):
            adam_step(params, bad, AdamState.zeros(2), lr=0.1)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolationError):
            adam_step(ParamVector(np.zeros(2)), Gradient(np.zeros(3)), AdamState.zeros(2), 0.1)
        with pytest.raises(ConfigurationError):
            adam_step(ParamVector(np.zeros(2)), Gradient(np.zeros(2)), AdamState.zeros(2), 0.0)


class TestClip:
    def test_below_threshold_unchanged(self):
        g = Gradient(np.array([0.3, 0.0]))
        assert clip_grad_norm(g, 0.5) is g

    def test_three_four_five(self):
        g = Gradient(np.array([3.0, 4.0]))
        clipped = clip_grad_norm(g, 0.5)
        assert np.allclose(clipped.values, [0.3, 0.4], atol=1e-15)
        assert abs(np.linalg.norm(clipped.values) - 0.5) <= 1e-12

    def test_zero_passthrough(self):
        g = Gradient(np.zeros(4))
        assert np.array_equal(clip_grad_norm(g, 0.5).values, np.zeros(4))

    def test_norm_and_direction_property(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            g = Gradient(rng.standard_normal(rng.integers(1, 20)) * rng.uniform(0, 10))
            max_norm = float(rng.uniform(0.01, 2.0))
            clipped = clip_grad_norm(g, max_norm)
            assert np.linalg.norm(clipped.values) <= max_norm + 1e-12
            norm = np.linalg.norm(g.values)
            if norm > 0:
                cos = float(
                    g.values @ clipped.values / (norm * np.linalg.norm(clipped.values))
                )
                assert abs(cos - 1.0) <= 1e-12


class TestPolyak:
    def test_endpoints_and_midpoint(self):
        target = ParamVector(np.array([2.0, 0.0]))
        source = ParamVector(np.array([0.0, 2.0]))
        assert np.array_equal(polyak_update(target, source, 0.0).values, source.values)
        assert np.array_equal(polyak_update(target, source, 1.0).values, target.values)
        assert np.array_equal(polyak_update(target, source, 0.5).values, [1.0, 1.0])

    def test_contraction_toward_source(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            target = rng.standard_normal(n)
            source = rng.standard_normal(n)
            tau = float(rng.uniform(0, 1))
            blended = polyak_update(target, source, tau)
            lhs = np.linalg.norm(blended - source)
            rhs = tau * np.linalg.norm(target - source)
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, rhs)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolationError):
            polyak_update(np.zeros(3), np.zeros(4), 0.5)


class TestContainer:
    def test_roundtrip_byte_identical(self, tmp_path):
        path = tmp_path / "model.ckpt"
        meta = {"spec": {"input_dim": 3}, "version": 7, "step": 1234}
        arrays = {
            "params": np.random.default_rng(0).standard_normal(10),
            "first_moment": np.zeros(10),
        }
        save_container(path, meta, arrays)
        first = path.read_bytes()
        loaded_meta, loaded_arrays = load_container(path)
        assert loaded_meta == meta
        assert np.array_equal(loaded_arrays["params"], arrays["params"])
        save_container(path, loaded_meta, loaded_arrays)
        assert path.read_bytes() == first

    def test_truncated_file_raises(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_container(path, {"x": 1}, {"a": np.arange(5.0)})
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointIntegrityError):
            load_container(path)

    def test_corrupt_byte_raises(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_container(path, {"x": 1}, {"a": np.arange(5.0)})
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointIntegrityError):
            load_container(path)
