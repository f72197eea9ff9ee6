import numpy as np
import orjson
import pytest

from errors import ShapeError, TrainingError
from models import Activation, OptimizerKind
from nn_core import (
    GradTape,
    Mlp,
    Optimizer,
    backward,
    clip_grad_norm,
    forward,
    forward_raw,
    init_mlp,
    mlp_from_dict,
    mlp_to_dict,
    sgd_step,
)
from storage import dumps


def _loss(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> float:
    return float(np.sum(upstream * forward(net, x)))


def _finite_difference(net: Mlp, x: np.ndarray, upstream: np.ndarray, h: float = 1e-6):
    params = net.parameters()
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (_loss(net.with_parameters(plus), x, upstream) - _loss(net.with_parameters(minus), x, upstream)) / (
                2 * h
            )
        grads.append(g)
    return grads


class TestInit:
    def test_same_seed_same_network(self):
        a = init_mlp([4, 16, 16, 2], np.random.default_rng(17))
        b = init_mlp([4, 16, 16, 2], np.random.default_rng(17))
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)
        x = np.random.default_rng(0).normal(size=(8, 4))
        np.testing.assert_array_equal(forward(a, x), forward(b, x))

    def test_different_seeds_differ(self):
        a = init_mlp([4, 16, 2], np.random.default_rng(17))
        b = init_mlp([4, 16, 2], np.random.default_rng(18))
        assert not np.array_equal(a.weights[0], b.weights[0])


class TestForward:
    def test_single_and_batch_shapes(self, rng):
        net = init_mlp([3, 8, 2], rng)
        assert forward(net, np.zeros(3)).shape == (2,)
        assert forward(net, np.zeros((5, 3))).shape == (5, 2)

    def test_dimension_mismatch_raises(self, rng):
        net = init_mlp([3, 8, 2], rng)
        with pytest.raises(ShapeError):
            forward(net, np.zeros(4))

    def test_non_finite_input_raises(self, rng):
        net = init_mlp([2, 4, 1], rng)
        with pytest.raises(ShapeError):
            forward(net, np.array([np.nan, 0.0]))

    def test_mismatched_layers_rejected(self):
        with pytest.raises(ShapeError):
            Mlp(weights=[np.zeros((4, 3)), np.zeros((1, 5))], biases=[np.zeros(4), np.zeros(1)])

    def test_clip_output_needs_bounds(self):
        with pytest.raises(ShapeError):
            Mlp(weights=[np.eye(2)], biases=[np.zeros(2)], output_activation=Activation.CLIP)

    def test_relu_network_by_hand(self):
        net = Mlp(
            weights=[np.array([[1.0, -1.0], [2.0, 0.0]]), np.array([[1.0, 3.0]])],
            biases=[np.array([0.0, -1.0]), np.array([0.5])],
        )
        # hidden = relu([1 - 2, 2 - 1]) = [0, 1]
        assert forward(net, np.array([1.0, 2.0]))[0] == pytest.approx(3.5)

    def test_clip_and_raw_outputs(self):
        net = Mlp(
            weights=[np.array([[10.0]])],
            biases=[np.array([0.0])],
            output_activation=Activation.CLIP,
            output_low=[-1.0],
            output_high=[1.0],
        )
        assert forward(net, np.array([0.5]))[0] == 1.0
        assert forward_raw(net, np.array([0.5]))[0] == 5.0


class TestBackward:
    @pytest.mark.parametrize("activation", [Activation.RELU, Activation.TANH])
    def test_matches_finite_differences_on_random_nets(self, activation):
        rng = np.random.default_rng(42)
        for _ in range(50):
            sizes = [int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 3))]
            net = init_mlp(sizes, rng, hidden_activation=activation, output_gain=1.0)
            net = net.with_parameters([p + rng.normal(0.0, 0.1, p.shape) for p in net.parameters()])
            x = rng.normal(size=(3, sizes[0]))
            upstream = rng.normal(size=(3, sizes[-1]))

            tape = backward(net, x, upstream)
            numeric = _finite_difference(net, x, upstream)
            for analytic, fd in zip(tape.gradients(), numeric):
                scale = max(np.linalg.norm(analytic) + np.linalg.norm(fd), 1e-8)
                assert np.linalg.norm(analytic - fd) / scale <= 1e-5

    def test_clip_masks_saturated_outputs(self):
        net = Mlp(
            weights=[np.array([[1.0]])],
            biases=[np.array([0.0])],
            output_activation=Activation.CLIP,
            output_low=[-1.0],
            output_high=[1.0],
        )
        x = np.array([[0.5], [3.0]])
        tape = backward(net, x, np.ones((2, 1)))
        assert tape.weights[0][0, 0] == pytest.approx(0.5)
        raw = backward(net, x, np.ones((2, 1)), raw_output=True)
        assert raw.weights[0][0, 0] == pytest.approx(3.5)

    def test_upstream_shape_checked(self, rng):
        net = init_mlp([2, 3, 2], rng)
        with pytest.raises(ShapeError):
            backward(net, np.zeros((1, 2)), np.zeros((1, 3)))


class TestOptimizers:
    def test_sgd_step(self, rng):
        net = init_mlp([2, 3, 1], rng)
        tape = GradTape.zeros_like(net)
        tape.biases[-1] = np.array([2.0])
        updated = sgd_step(net, tape, 0.1)
        assert updated.biases[-1][0] == pytest.approx(net.biases[-1][0] - 0.2)
        np.testing.assert_array_equal(updated.weights[0], net.weights[0])

    def test_adam_first_step_moves_by_lr(self):
        opt = Optimizer(kind=OptimizerKind.ADAM)
        (p,) = opt.step([np.array([1.0, 1.0])], [np.array([3.0, -0.2])], 0.01)
        np.testing.assert_allclose(p, [0.99, 1.01], atol=1e-6)

    def test_momentum_accumulates(self):
        opt = Optimizer(kind=OptimizerKind.MOMENTUM, momentum=0.5)
        (p,) = opt.step([np.array([0.0])], [np.array([1.0])], 1.0)
        (p,) = opt.step([p], [np.array([1.0])], 1.0)
        assert p[0] == pytest.approx(-2.5)

    def test_non_positive_learning_rate_rejected(self):
        with pytest.raises(TrainingError):
            Optimizer().step([np.zeros(1)], [np.zeros(1)], 0.0)

    def test_non_finite_gradient_rejected(self, rng):
        net = init_mlp([2, 3, 1], rng)
        tape = GradTape.zeros_like(net)
        tape.weights[0][0, 0] = np.nan
        with pytest.raises(TrainingError):
            sgd_step(net, tape, 0.1)

    def test_clip_grad_norm(self):
        grads = clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
        assert np.sqrt(sum(float(g @ g) for g in grads)) == pytest.approx(1.0)
        untouched = clip_grad_norm([np.array([0.3])], 1.0)
        assert untouched[0][0] == 0.3


class TestSerialization:
    def test_json_round_trip_is_bit_exact(self, rng):
        net = init_mlp([4, 16, 16, 1], rng, output_activation=Activation.CLIP, output_low=[-3.0], output_high=[3.0])
        restored = mlp_from_dict(orjson.loads(dumps(mlp_to_dict(net))))
        for a, b in zip(net.parameters(), restored.parameters()):
            np.testing.assert_array_equal(a, b)
        x = rng.normal(size=(10, 4))
        np.testing.assert_array_equal(forward(net, x), forward(restored, x))

    def test_unknown_version_rejected(self, rng):
        payload = mlp_to_dict(init_mlp([2, 2], rng))
        payload["version"] = 99
        with pytest.raises(ShapeError):
            mlp_from_dict(payload)
