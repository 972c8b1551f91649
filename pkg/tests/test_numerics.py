import numpy as np
import pytest

from hybridlt.errors import ConfigurationError, DegenerateInputError, NonFiniteError, StateError
from hybridlt.losses import LogitsBatch, ce_loss
from hybridlt.numerics import (DenseLayer, L2Normalize, ParamTensor, SgdConfig, SgdMomentum,
                               clip_gradient_norm, dense_forward, finite_diff_gradient,
                               l2_normalize_rows, max_relative_error, named_rng, sgd_step)


def _dense(weights, bias):
    return ParamTensor("w", np.array(weights, dtype=float)), ParamTensor("b", np.array([bias], dtype=float))


class TestDense:
    """Dense forward / backward"""

    def test_forward_examples(self):
        """identity weights, bias passthrough and a hand product"""
        w, b = _dense([[1, 0], [0, 1]], [0, 0])
        np.testing.assert_array_equal(dense_forward([[1, 2]], w, b), [[1, 2]])
        w, b = _dense([[5, -2], [7, 1]], [3, -1])
        np.testing.assert_array_equal(dense_forward([[0, 0]], w, b), [[3, -1]])
        w, b = _dense([[2, 0], [0, 3]], [1, 1])
        np.testing.assert_array_equal(dense_forward([[1, 1]], w, b), [[3, 4]])

    def test_shape_mismatch(self):
        w, b = _dense([[1, 0], [0, 1]], [0, 0])
        with pytest.raises(ConfigurationError):
            dense_forward([[1, 2, 3]], w, b)

    def test_scalar_chain_rule(self):
        """input=2, W=3, upstream=1 -> dW=2, dInput=3"""
        layer = DenseLayer("scalar", 1, 1)
        layer.weights.value = np.array([[3.0]])
        layer.forward([[2.0]])
        d_input = layer.backward(np.array([[1.0]]))
        assert layer.weights.grad[0, 0] == 2.0
        assert d_input[0, 0] == 3.0

    def test_zero_upstream(self, rng):
        layer = DenseLayer("z", 3, 4, rng)
        layer.forward(rng.normal(size=(5, 3)))
        d_input = layer.backward(np.zeros((5, 4)))
        assert not d_input.any() and not layer.weights.grad.any() and not layer.bias.grad.any()

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            DenseLayer("fresh", 2, 2).backward(np.ones((1, 2)))

    def test_random_layer_matches_finite_differences(self, rng):
        layer = DenseLayer("fd", 3, 4, rng)
        x = rng.normal(size=(6, 3))
        probe = rng.normal(size=(6, 4))
        layer.forward(x)
        d_input = layer.backward(probe)

        numeric_x = finite_diff_gradient(lambda v: float(np.sum(layer.forward(v) * probe)), x)

        def loss_of_weights(values):
            saved = layer.weights.value
            layer.weights.value = values
            try:
                return float(np.sum(layer.forward(x) * probe))
            finally:
                layer.weights.value = saved

        numeric_w = finite_diff_gradient(loss_of_weights, layer.weights.value)
        assert max_relative_error(d_input, numeric_x) <= 1e-6
        assert max_relative_error(layer.weights.grad, numeric_w) <= 1e-6

    def test_backward_accumulates(self, rng):
        layer = DenseLayer("acc", 2, 2, rng)
        layer.forward(np.ones((1, 2)))
        layer.backward(np.ones((1, 2)))
        layer.backward(np.ones((1, 2)))
        np.testing.assert_array_equal(layer.bias.grad, [[2.0, 2.0]])

    def test_bias_starts_at_zero(self):
        layer = DenseLayer("plain", 3, 2, np.random.default_rng(0))
        np.testing.assert_array_equal(layer.bias.value, np.zeros((1, 2)))

    def test_bias_draw_leaves_weights_alone(self):
        plain = DenseLayer("plain", 3, 2, np.random.default_rng(5))
        drawn = DenseLayer("drawn", 3, 2, np.random.default_rng(5), bias_std=0.01)
        np.testing.assert_array_equal(drawn.weights.value, plain.weights.value)
        assert np.all(drawn.bias.value != 0.0)
        assert np.max(np.abs(drawn.bias.value)) < 0.1

    def test_negative_bias_std(self):
        with pytest.raises(ConfigurationError):
            DenseLayer("bad", 2, 2, bias_std=-1.0)


class TestL2Normalize:
    """Row normalization and its Jacobian"""

    def test_forward_examples(self):
        np.testing.assert_allclose(l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]])
        unit = np.array([[0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(l2_normalize_rows(unit), unit)
        np.testing.assert_allclose(l2_normalize_rows([[1.0, 1.0]]), [[0.7071, 0.7071]], atol=1e-4)

    def test_near_zero_row_is_an_error(self):
        with pytest.raises(DegenerateInputError) as info:
            l2_normalize_rows([[1.0, 0.0], [1e-15, 0.0]])
        assert info.value.row == 1

    def test_hand_jacobian(self):
        """r=[3,4], g=[1,0] -> [0.128, -0.096]"""
        layer = L2Normalize()
        layer.forward([[3.0, 4.0]])
        np.testing.assert_allclose(layer.backward(np.array([[1.0, 0.0]])), [[0.128, -0.096]],
                                   atol=1e-15)

    def test_radial_upstream_vanishes(self, rng):
        layer = L2Normalize()
        z = layer.forward(rng.normal(size=(4, 5)))
        np.testing.assert_allclose(layer.backward(3.0 * z), 0.0, atol=1e-14)

    def test_random_batch_matches_finite_differences(self, rng):
        x = rng.normal(size=(4, 8))
        probe = rng.normal(size=(4, 8))
        layer = L2Normalize()
        layer.forward(x)
        analytic = layer.backward(probe)
        numeric = finite_diff_gradient(lambda v: float(np.sum(l2_normalize_rows(v) * probe)), x)
        assert max_relative_error(analytic, numeric) <= 1e-6


class TestSgd:
    """SGD with momentum and weight decay"""

    def test_plain_gradient_descent(self):
        p = ParamTensor("w", np.array([[1.0, -2.0]]), np.array([[0.5, 1.0]]))
        sgd_step([p], SgdConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0), {})
        np.testing.assert_allclose(p.value, [[0.95, -2.1]])

    def test_zero_gradient_is_a_no_op(self):
        p = ParamTensor("w", np.array([[1.5]]))
        sgd_step([p], SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0), {})
        assert p.value[0, 0] == 1.5

    def test_two_momentum_steps(self):
        """w=1, g=1, lr=0.1, m=0.9 -> 0.9 then 0.71"""
        p = ParamTensor("w", np.array([[1.0]]))
        optimizer = SgdMomentum(SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0))
        p.grad[:] = 1.0
        optimizer.step([p])
        assert p.value[0, 0] == pytest.approx(0.9, abs=1e-15)
        optimizer.step([p])
        assert p.value[0, 0] == pytest.approx(0.71, abs=1e-15)

    def test_weight_decay_enters_velocity(self):
        p = ParamTensor("w", np.array([[2.0]]))
        state = {}
        sgd_step([p], SgdConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.5), state)
        assert p.value[0, 0] == pytest.approx(1.0)
        assert state["w"][0, 0] == pytest.approx(1.0)

    def test_non_finite_gradient_names_parameter(self):
        good = ParamTensor("good", np.ones((1, 2)))
        bad = ParamTensor("bad", np.ones((1, 2)), np.array([[np.nan, 0.0]]))
        with pytest.raises(NonFiniteError) as info:
            sgd_step([good, bad], SgdConfig(), {})
        assert info.value.parameter == "bad"
        np.testing.assert_array_equal(good.value, np.ones((1, 2)))

    def test_invalid_momentum(self):
        with pytest.raises(ConfigurationError):
            SgdConfig(momentum=1.0)


class TestGradientClipping:
    """Joint L2 norm clipping over a parameter list"""

    def test_large_norm_is_rescaled(self):
        a = ParamTensor("a", np.zeros((1, 2)), np.array([[3.0, 0.0]]))
        b = ParamTensor("b", np.zeros((1, 1)), np.array([[4.0]]))
        assert clip_gradient_norm([a, b], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(a.grad, [[0.6, 0.0]])
        np.testing.assert_allclose(b.grad, [[0.8]])

    def test_small_norm_is_untouched(self):
        a = ParamTensor("a", np.zeros((1, 2)), np.array([[0.3, 0.4]]))
        assert clip_gradient_norm([a], 1.0) == pytest.approx(0.5)
        np.testing.assert_array_equal(a.grad, [[0.3, 0.4]])

    def test_direction_is_kept(self, rng):
        a = ParamTensor("a", np.zeros((4, 3)), rng.normal(scale=50.0, size=(4, 3)))
        before = a.grad.copy()
        clip_gradient_norm([a], 2.0)
        assert np.linalg.norm(a.grad) == pytest.approx(2.0)
        np.testing.assert_allclose(a.grad / np.linalg.norm(a.grad), before / np.linalg.norm(before))

    def test_non_finite_left_for_sgd(self):
        bad = ParamTensor("bad", np.ones((1, 2)), np.array([[np.inf, 1.0]]))
        assert not np.isfinite(clip_gradient_norm([bad], 1.0))
        assert bad.grad[0, 1] == 1.0
        with pytest.raises(NonFiniteError):
            sgd_step([bad], SgdConfig(), {})

    def test_max_norm_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            clip_gradient_norm([ParamTensor("a", np.zeros((1, 1)))], 0.0)


class TestFiniteDifferences:
    """Central-difference oracle"""

    def test_square(self):
        grad = finite_diff_gradient(lambda x: float(x[0, 0] ** 2), np.array([[3.0]]), h=1e-4)
        assert grad[0, 0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        np.testing.assert_array_equal(finite_diff_gradient(lambda x: 4.2, np.ones((2, 3))), 0.0)

    def test_matches_cross_entropy(self, rng):
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        _, analytic = ce_loss(LogitsBatch(logits, labels))
        numeric = finite_diff_gradient(lambda s: ce_loss(LogitsBatch(s, labels))[0], logits)
        assert max_relative_error(analytic, numeric) <= 1e-6

    def test_point_is_not_modified(self):
        point = np.array([[1.0, 2.0]])
        finite_diff_gradient(lambda x: float(x.sum()), point)
        np.testing.assert_array_equal(point, [[1.0, 2.0]])


class TestNamedRng:
    def test_streams_are_stable_and_distinct(self):
        a = named_rng(3, "stream.a").normal(size=4)
        np.testing.assert_array_equal(a, named_rng(3, "stream.a").normal(size=4))
        assert not np.array_equal(a, named_rng(3, "stream.b").normal(size=4))
        assert not np.array_equal(a, named_rng(4, "stream.a").normal(size=4))
