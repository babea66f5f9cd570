"""
Tests for diffcore: primitives, gradients and Hessian-vector products
checked against closed forms and finite differences.
"""
import numpy as np
import pytest

from diffcore import (
    Graph,
    GradientVector,
    as_tensor,
    col2im,
    const,
    conv2d,
    dot,
    evaluate,
    finite_difference_grad,
    finite_difference_hvp,
    grad,
    hvp,
    im2col,
    leaf,
    log_softmax,
    matmul,
    mean_pool,
    mul,
    relative_error,
    softmax_cross_entropy,
    sum_all,
    tanh,
    value_and_grad,
    value_grad_hvp,
)
from netmodel import build_cnn, build_mlp, build_quadratic, make_blobs
from utils import ShapeError


def _square_graph(n: int) -> Graph:
    return Graph(lambda leaves: sum_all(mul(leaves["x"], leaves["x"])), {"x": (n,)})


def _random_vector(params: GradientVector, seed: int) -> GradientVector:
    rng = np.random.default_rng(seed)
    return params.unflatten(rng.normal(size=params.size))


# =============================================================================
# PRIMITIVES
# =============================================================================

class TestPrimitives:
    def test_as_tensor_rejects_wrong_shape(self):
        with pytest.raises(ShapeError):
            as_tensor([1.0, 2.0], shape=(3,))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(const(np.ones((2, 3))), const(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            const(np.ones(2)) + const(np.ones(3))

    def test_log_softmax_normalizes_rows(self):
        rng = np.random.default_rng(0)
        out = log_softmax(const(rng.normal(size=(4, 5)) * 30))
        np.testing.assert_allclose(np.exp(out.value).sum(axis=1), np.ones(4), atol=1e-12)

    def test_cross_entropy_of_uniform_logits(self):
        loss = softmax_cross_entropy(const(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert float(loss.value) == pytest.approx(np.log(4.0), abs=1e-14)

    def test_temperature_divides_logits(self):
        logits = np.array([[2.0, -1.0, 0.5]])
        tempered = softmax_cross_entropy(const(logits), np.array([1]), temperature=4.0)
        plain = softmax_cross_entropy(const(logits / 4.0), np.array([1]))
        assert float(tempered.value) == pytest.approx(float(plain.value), abs=1e-14)

    def test_conv2d_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 3, 2))
        w = rng.normal(size=(3, 3, 2, 5))
        out = conv2d(const(x), const(w)).value

        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        expected = np.zeros((2, 4, 3, 5))
        for i in range(4):
            for j in range(3):
                patch = padded[:, i:i + 3, j:j + 3, :]
                expected[:, i, j, :] = np.einsum("nabc,abcf->nf", patch, w)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_im2col_col2im_are_adjoint(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 3, 2))
        cols = im2col(const(x), 3).value
        y = rng.normal(size=cols.shape)
        lhs = np.sum(cols * y)
        rhs = np.sum(x * col2im(const(y), 3, x.shape).value)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_conv2d_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            conv2d(const(np.ones((1, 3, 3, 1))), const(np.ones((2, 2, 1, 1))))

    def test_mean_pool(self):
        x = np.arange(2 * 2 * 2 * 3, dtype=float).reshape(2, 2, 2, 3)
        np.testing.assert_allclose(mean_pool(const(x)).value, x.mean(axis=(1, 2)))


# =============================================================================
# GRADIENTS
# =============================================================================

class TestGradient:
    def test_square_closed_form(self):
        params = GradientVector({"x": [1.0, -2.0, 0.5]})
        loss, g = value_and_grad(_square_graph(3), params)
        assert loss == pytest.approx(5.25)
        np.testing.assert_allclose(g["x"], [2.0, -4.0, 1.0])

    def test_non_scalar_output_rejected(self):
        graph = Graph(lambda leaves: tanh(leaves["x"]), {"x": (2,)})
        with pytest.raises(ShapeError):
            evaluate(graph, GradientVector({"x": [0.1, 0.2]}))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            grad(_square_graph(3), GradientVector({"x": [1.0, 2.0]}))

    def test_unreachable_parameter_gets_zero(self):
        graph = Graph(lambda leaves: sum_all(mul(leaves["a"], leaves["a"])), {"a": (2,), "b": (3,)})
        g = grad(graph, GradientVector({"a": [1.0, 2.0], "b": [1.0, 1.0, 1.0]}))
        np.testing.assert_array_equal(g["b"], np.zeros(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_mlp_matches_finite_differences(self, seed):
        net = build_mlp([3, 5, 4, 3], "tanh", seed=seed)
        data = make_blobs(3, 3, 4, 0.5, seed)
        graph = net.loss_graph(data, temperature=2.0)
        assert relative_error(grad(graph, net.params), finite_difference_grad(graph, net.params)) < 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_relu_mlp_matches_finite_differences(self, seed):
        # random blobs keep every pre-activation well away from the kink
        net = build_mlp([3, 5, 4, 3], "relu", seed=seed)
        graph = net.loss_graph(make_blobs(3, 3, 4, 0.5, seed))
        assert relative_error(grad(graph, net.params), finite_difference_grad(graph, net.params)) < 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_cnn_matches_finite_differences(self, seed):
        net = build_cnn([3, 2], kernel=3, classes=3, seed=seed, input_shape=(3, 3, 1), activation="tanh")
        data = make_blobs(3, 9, 2, 0.5, seed)
        graph = net.loss_graph(data, temperature=2.0)
        assert relative_error(grad(graph, net.params), finite_difference_grad(graph, net.params)) < 1e-6

    def test_sigma_gradient_is_nonzero(self):
        net = build_mlp([3, 4, 3], "tanh", seed=0)
        g = grad(net.loss_graph(make_blobs(3, 3, 3, 0.5, 0)), net.params)
        assert np.any(g["fc1.sigma"] != 0.0)


# =============================================================================
# HESSIAN-VECTOR PRODUCTS
# =============================================================================

class TestHvp:
    def test_quadratic_is_exact(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        model = build_quadratic(A, [0.3, -0.7])
        v = GradientVector({"theta": [1.0, 2.0]})
        np.testing.assert_allclose(hvp(model.loss_graph(), model.params, v)["theta"], A @ [1.0, 2.0], atol=1e-14)

    def test_default_vector_is_gradient(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        theta = np.array([1.0, -1.0])
        model = build_quadratic(A, theta)
        _, g, hg = value_grad_hvp(model.loss_graph(), model.params)
        np.testing.assert_allclose(g["theta"], A @ theta, atol=1e-14)
        np.testing.assert_allclose(hg["theta"], A @ A @ theta, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_mlp_matches_finite_difference_of_gradients(self, seed):
        net = build_mlp([3, 4, 3], "tanh", seed=seed)
        graph = net.loss_graph(make_blobs(3, 3, 4, 0.5, seed), temperature=2.0)
        v = _random_vector(net.params, seed + 100)
        assert relative_error(hvp(graph, net.params, v), finite_difference_hvp(graph, net.params, v)) < 1e-5

    def test_cnn_matches_finite_difference_of_gradients(self):
        net = build_cnn([2], kernel=3, classes=3, seed=4, input_shape=(3, 3, 1), activation="tanh")
        graph = net.loss_graph(make_blobs(3, 9, 2, 0.5, 4))
        v = _random_vector(net.params, 7)
        assert relative_error(hvp(graph, net.params, v), finite_difference_hvp(graph, net.params, v)) < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetry(self, seed):
        net = build_mlp([3, 4, 3], "tanh", seed=seed)
        graph = net.loss_graph(make_blobs(3, 3, 4, 0.5, seed))
        u = _random_vector(net.params, 2 * seed)
        v = _random_vector(net.params, 2 * seed + 1)
        uhv = dot(u, hvp(graph, net.params, v))
        vhu = dot(v, hvp(graph, net.params, u))
        assert abs(uhv - vhu) <= 1e-9 * max(1.0, abs(uhv))

    @pytest.mark.parametrize("seed", range(3))
    def test_linear_in_the_vector(self, seed):
        net = build_mlp([3, 4, 3], "tanh", seed=seed)
        graph = net.loss_graph(make_blobs(3, 3, 4, 0.5, seed))
        u = _random_vector(net.params, 2 * seed)
        v = _random_vector(net.params, 2 * seed + 1)
        alpha, beta = 1.7, -0.6
        combined = net.params.unflatten(alpha * u.flatten() + beta * v.flatten())
        expected = alpha * hvp(graph, net.params, u).flatten() + beta * hvp(graph, net.params, v).flatten()
        assert relative_error(hvp(graph, net.params, combined), net.params.unflatten(expected)) < 1e-10

    def test_layout_mismatch_rejected(self):
        model = build_quadratic(np.eye(2), [1.0, 1.0])
        with pytest.raises(ShapeError):
            hvp(model.loss_graph(), model.params, GradientVector({"theta": [1.0, 2.0, 3.0]}))

    def test_linear_loss_has_zero_hessian(self):
        graph = Graph(lambda leaves: sum_all(mul(leaves["x"], const([1.0, 2.0]))), {"x": (2,)})
        params = GradientVector({"x": [0.5, 0.5]})
        np.testing.assert_array_equal(hvp(graph, params, params)["x"], np.zeros(2))


class TestGradientVector:
    def test_flatten_roundtrip_order(self):
        v = GradientVector({"a": [[1.0, 2.0], [3.0, 4.0]], "b": [5.0]})
        np.testing.assert_array_equal(v.flatten(), [1.0, 2.0, 3.0, 4.0, 5.0])
        np.testing.assert_array_equal(v.unflatten(v.flatten() * 2)["a"], [[2.0, 4.0], [6.0, 8.0]])

    def test_dot_rejects_layout_mismatch(self):
        with pytest.raises(ShapeError):
            dot(GradientVector({"a": [1.0]}), GradientVector({"b": [1.0]}))

    def test_leaf_is_differentiable(self):
        assert leaf([1.0]).requires_grad
        assert not const([1.0]).requires_grad
