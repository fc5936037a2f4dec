"""Backward-pass contracts: graph traversal, gradient accumulation,
SGD updates, and finite-difference verification of every layer op."""

import numpy as np
import pytest

from chroma.tensor import (
    Tensor,
    ShapeError,
    OptimizerState,
    no_grad,
    conv2d,
    deconv2d,
    maxpool2d,
    global_avgpool,
    batchnorm,
    RunningStats,
    relu,
    channel_softmax,
    vector_softmax,
    concat_channels,
    crop_spatial,
    fully_connected,
    cross_entropy,
    tensor_sum,
    sgd_step,
    finite_diff_check,
)


class TestBackwardContract:
    def test_sum_gradient_is_all_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        tensor_sum(w).backward()
        assert np.array_equal(w.grad, np.ones((2, 3)))

    def test_leaf_off_the_path_has_zero_gradient(self):
        w = Tensor(np.ones(3), requires_grad=True)
        other = Tensor(np.ones(3), requires_grad=True)
        tensor_sum(w).backward()
        assert np.array_equal(other.grad, np.zeros(3))

    def test_repeated_backward_raises(self):
        w = Tensor(np.ones(3), requires_grad=True)
        loss = tensor_sum(w)
        loss.backward()
        with pytest.raises(RuntimeError, match="already run"):
            loss.backward()

    def test_non_scalar_backward_raises(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            relu(w).backward()

    def test_nan_in_graph_names_the_node(self):
        w = Tensor(np.array([1.0, np.nan]), requires_grad=True)
        loss = tensor_sum(relu(w))
        with pytest.raises(FloatingPointError, match="leaf"):
            loss.backward()

    def test_gradients_accumulate_across_graphs(self):
        w = Tensor(np.ones(2), requires_grad=True)
        tensor_sum(w).backward()
        tensor_sum(w).backward()
        assert np.array_equal(w.grad, np.full(2, 2.0))

    def test_seed_scales_the_gradient(self):
        w = Tensor(np.ones(4), requires_grad=True)
        tensor_sum(w).backward(seed=0.25)
        assert np.array_equal(w.grad, np.full(4, 0.25))

    def test_no_grad_detaches(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = relu(w)
        assert not out.requires_grad and out._parents == ()

    def test_shared_node_visited_once(self):
        # diamond: loss = sum(relu(x) concat relu(x)); d/dx = 2 per entry
        x = Tensor(np.ones((2, 2, 1)), requires_grad=True)
        h = relu(x)
        tensor_sum(concat_channels(h, h)).backward()
        assert np.array_equal(x.grad, np.full((2, 2, 1), 2.0))


class TestSgdStep:
    def test_plain_step(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimizerState(learning_rate=0.1, momentum=0.0)
        sgd_step({"w": w}, {"w": np.array([0.5])}, state)
        assert np.allclose(w.data, [0.95])
        assert state.velocities == {}

    def test_zero_gradient_leaves_parameters_unchanged(self):
        w = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        state = OptimizerState(learning_rate=0.1, momentum=0.9)
        sgd_step({"w": w}, {"w": np.zeros(2)}, state)
        assert np.array_equal(w.data, np.array([2.0, -1.0]))

    def test_two_momentum_steps_hand_applied(self):
        # v1 = 0.5, w = 1 - 0.05 = 0.95
        # v2 = 0.9*0.5 + 0.5 = 0.95, w = 0.95 - 0.095 = 0.855
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimizerState(learning_rate=0.1, momentum=0.9)
        for _ in range(2):
            sgd_step({"w": w}, {"w": np.array([0.5])}, state)
        assert np.allclose(w.data, [0.855])

    def test_shape_mismatch_raises(self):
        w = Tensor(np.ones(3), requires_grad=True)
        state = OptimizerState(learning_rate=0.1)
        with pytest.raises(ShapeError):
            sgd_step({"w": w}, {"w": np.ones(4)}, state)

    def test_velocity_exists_iff_momentum_positive(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with_mu = OptimizerState(learning_rate=0.1, momentum=0.5)
        sgd_step({"w": w}, {"w": np.ones(2)}, with_mu)
        assert "w" in with_mu.velocities

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            OptimizerState(learning_rate=-1.0)
        with pytest.raises(ValueError):
            OptimizerState(learning_rate=0.1, momentum=1.0)


class TestFiniteDiffCheck:
    def test_linear_op_is_nearly_exact(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        err = finite_diff_check(lambda: tensor_sum(global_avgpool(x)), x)
        assert err < 1e-10

    def test_relu_away_from_zero(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(3, 3, 2))
        vals[np.abs(vals) < 0.2] = 0.5
        x = Tensor(vals, requires_grad=True)
        err = finite_diff_check(lambda: tensor_sum(relu(x)), x)
        assert err < 1e-6

    def test_rejects_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            finite_diff_check(lambda: relu(x), x)


def _check(fn, wrt, tol=1e-4, eps=1e-5):
    err = finite_diff_check(fn, wrt, eps=eps)
    assert err < tol, f"gradient error {err:.3g} >= {tol}"


class TestLayerGradients:
    """Central finite differences for every differentiable op (64-bit)."""

    def test_conv2d_gradients(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(5, 5, 2)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)

        def loss():
            return tensor_sum(relu(conv2d(x, k, b, stride=2, padding=1)))

        for wrt in (x, k, b):
            _check(loss, wrt)

    def test_deconv2d_gradients(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 3, 3, 2)), requires_grad=True)

        def loss():
            return tensor_sum(relu(deconv2d(x, k, stride=2)))

        for wrt in (x, k):
            _check(loss, wrt)

    def test_maxpool_gradient(self):
        rng = np.random.default_rng(22)
        x = Tensor(rng.normal(size=(7, 7, 2)), requires_grad=True)
        _check(lambda: tensor_sum(maxpool2d(x, 3, 2)), x)

    def test_maxpool_ceil_gradient(self):
        rng = np.random.default_rng(23)
        x = Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
        _check(lambda: tensor_sum(maxpool2d(x, 3, 2, ceil_mode=True)), x)

    def test_batchnorm_gradients_train_mode(self):
        rng = np.random.default_rng(24)
        x = Tensor(rng.normal(size=(4, 4, 3)), requires_grad=True)
        gamma = Tensor(rng.normal(size=3) + 1.0, requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)

        def loss():
            stats = RunningStats.create(3)
            h = batchnorm(x, gamma, beta, stats, mode="train")
            return tensor_sum(relu(h))

        for wrt in (x, gamma, beta):
            _check(loss, wrt)

    def test_batchnorm_gradients_eval_mode(self):
        rng = np.random.default_rng(25)
        x = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        gamma = Tensor(np.array([1.3, 0.7]), requires_grad=True)
        beta = Tensor(np.array([0.1, -0.2]), requires_grad=True)
        stats = RunningStats(np.array([0.3, -0.1]), np.array([1.5, 0.8]))

        def loss():
            return tensor_sum(relu(batchnorm(x, gamma, beta, stats, mode="eval")))

        for wrt in (x, gamma, beta):
            _check(loss, wrt)

    def test_softmax_gradients(self):
        rng = np.random.default_rng(26)
        x = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=5), requires_grad=True)
        weights = Tensor(rng.normal(size=(4, 1)))

        def map_loss():
            p = channel_softmax(x)
            # weight the probabilities so the gradient is not trivially zero
            return tensor_sum(conv2d(p, Tensor(weights.data.reshape(1, 1, 4, 1)),
                                     Tensor(np.zeros(1))))

        _check(map_loss, x)
        _check(lambda: cross_entropy(vector_softmax(v), 2), v)

    def test_concat_gradient_splits(self):
        rng = np.random.default_rng(27)
        a = Tensor(rng.normal(size=(3, 3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 3, 1)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, 1, 3, 2)))

        def loss():
            return tensor_sum(relu(conv2d(concat_channels(a, b), w,
                                          Tensor(np.zeros(2)))))

        for wrt in (a, b):
            _check(loss, wrt)

    def test_crop_gradient(self):
        rng = np.random.default_rng(28)
        x = Tensor(rng.normal(size=(5, 5, 2)), requires_grad=True)
        _check(lambda: tensor_sum(relu(crop_spatial(x, 4, 3))), x)

    def test_fully_connected_gradients(self):
        rng = np.random.default_rng(29)
        x = Tensor(rng.normal(size=4), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)

        def loss():
            return cross_entropy(vector_softmax(fully_connected(x, w, b)), 1)

        for wrt in (x, w, b):
            _check(loss, wrt)
