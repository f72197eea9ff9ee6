import numpy as np
import orjson
import pytest

from approx_measure import sample_buffer
from buffer_geometry import enumerate_vertices
from errors import NotAffineError, ShapeError, UnsupportedArchitectureError
from models import Activation
from nn_core import Mlp, init_mlp, pre_activations
from police_policy import (
    PolicedPolicy,
    affine_residual,
    controls_within_bounds,
    enforce_affine_region,
    extract_affine_map,
    policy_from_affine,
    policy_from_dict,
    policy_to_dict,
)
from storage import dumps


def _random_policed(spec, rng, hidden=(64, 64), scale=None):
    net = init_mlp([spec.n, *hidden, 1], rng, output_gain=1.0)
    return enforce_affine_region(net, enumerate_vertices(spec), scale)


class TestEnforcement:
    def test_hidden_units_keep_one_sign_over_vertices(self, pendulum_spec, rng):
        policy = _random_policed(pendulum_spec, rng)
        zs = pre_activations(policy.net, policy.region_vertices * policy.input_scale)
        for z in zs[:-1]:
            assert np.all((z.min(axis=0) >= -1e-12) | (z.max(axis=0) <= 1e-12))

    @pytest.mark.parametrize("hidden", [(16,), (64, 64), (32, 32, 32)])
    def test_affine_on_buffer_samples(self, pendulum_spec, rng, hidden):
        policy = _random_policed(pendulum_spec, rng, hidden, scale=[5.0, 0.5, 1.0, 1.0])
        samples = sample_buffer(pendulum_spec, 10000, seed=3)
        assert affine_residual(policy, samples) <= 1e-9

    def test_shuttle_buffer(self, shuttle_spec, rng):
        policy = _random_policed(shuttle_spec, rng, (128, 128, 128), scale=[1 / 500, 1 / 100, 1.0])
        D, e = extract_affine_map(policy)
        assert D.shape == (1, 3) and e.shape == (1,)
        assert affine_residual(policy, sample_buffer(shuttle_spec, 2000, seed=5), D, e) <= 1e-9

    def test_enforcement_is_idempotent(self, pendulum_spec, rng):
        policy = _random_policed(pendulum_spec, rng)
        again = enforce_affine_region(policy.net, policy.region_vertices, policy.input_scale)
        for a, b in zip(policy.net.biases, again.net.biases):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_weights_untouched(self, pendulum_spec, rng):
        net = init_mlp([4, 32, 1], rng)
        policy = enforce_affine_region(net, enumerate_vertices(pendulum_spec))
        for a, b in zip(net.weights, policy.net.weights):
            np.testing.assert_array_equal(a, b)

    def test_rejects_tanh_networks(self, pendulum_spec, rng):
        net = init_mlp([4, 8, 1], rng, hidden_activation=Activation.TANH)
        with pytest.raises(UnsupportedArchitectureError):
            enforce_affine_region(net, enumerate_vertices(pendulum_spec))

    def test_rejects_wrong_vertex_dimension(self, rng):
        net = init_mlp([4, 8, 1], rng)
        with pytest.raises(ShapeError):
            enforce_affine_region(net, np.zeros((3, 2)))

    def test_non_positive_input_scale_rejected(self, rng):
        net = init_mlp([2, 4, 1], rng)
        with pytest.raises(ShapeError):
            PolicedPolicy(net=net, region_vertices=np.zeros((1, 2)), input_scale=[1.0, 0.0])


class TestSingleUnit:
    @staticmethod
    def _net(w: float, b: float) -> Mlp:
        return Mlp(weights=[np.array([[w]]), np.array([[3.0]])], biases=[np.array([b]), np.array([0.25])])

    def test_mostly_active_unit_is_lifted(self):
        verts = np.array([[0.0], [1.0], [2.0]])
        # z = x - 0.5 is positive at two of three vertices, so the bias rises to 0
        policy = enforce_affine_region(self._net(1.0, -0.5), verts)
        assert policy.net.biases[0][0] == pytest.approx(0.0)
        D, e = extract_affine_map(policy)
        np.testing.assert_allclose(D, [[3.0]], atol=1e-12)
        np.testing.assert_allclose(e, [0.25], atol=1e-12)
        np.testing.assert_allclose(policy(np.array([[1.5]])), [[4.75]])

    def test_mostly_inactive_unit_is_lowered(self):
        verts = np.array([[0.0], [1.0], [2.0]])
        # z = 0.5 - x is negative at two of three vertices, so the bias drops to 0
        policy = enforce_affine_region(self._net(-1.0, 0.5), verts)
        assert policy.net.biases[0][0] == pytest.approx(0.0)
        D, e = extract_affine_map(policy)
        np.testing.assert_allclose(D, [[0.0]], atol=1e-12)
        np.testing.assert_allclose(e, [0.25], atol=1e-12)


class TestAffineMap:
    def test_matches_policy_at_vertices(self, pendulum_spec, rng):
        policy = _random_policed(pendulum_spec, rng)
        D, e = extract_affine_map(policy)
        verts = policy.region_vertices
        np.testing.assert_allclose(verts @ D.T + e, np.atleast_2d(policy(verts)), atol=1e-9)

    def test_unenforced_relu_net_is_not_affine(self, pendulum_spec):
        # relu(p + p_dot) kinks across the cart box
        net = Mlp(
            weights=[np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([[1.0]])],
            biases=[np.array([0.0]), np.array([0.0])],
        )
        policy = PolicedPolicy(net=net, region_vertices=enumerate_vertices(pendulum_spec), input_scale=np.ones(4))
        with pytest.raises(NotAffineError):
            extract_affine_map(policy)

    def test_hand_policy(self, hand_policy):
        D, e = extract_affine_map(hand_policy)
        np.testing.assert_allclose(D, [[0.0, -1.0]], atol=1e-12)
        np.testing.assert_allclose(e, [-1.2], atol=1e-12)
        assert hand_policy.enforced


class TestControlBounds:
    def test_hand_policy_inside_box(self, hand_policy, double_integrator):
        ok, worst = controls_within_bounds(hand_policy, double_integrator.u_low, double_integrator.u_high)
        assert ok
        assert worst == pytest.approx(-2.8)

    def test_raw_output_outside_box_detected(self, unit_spec):
        policy = policy_from_affine(
            np.array([[0.0, -10.0]]), np.array([0.0]), enumerate_vertices(unit_spec), low=[-5.0], high=[5.0]
        )
        ok, worst = controls_within_bounds(policy, np.array([-5.0]), np.array([5.0]))
        assert not ok
        assert worst == pytest.approx(5.0)


class TestSerialization:
    def test_round_trip(self, pendulum_spec, rng):
        policy = _random_policed(pendulum_spec, rng, scale=[5.0, 0.5, 1.0, 1.0])
        restored = policy_from_dict(orjson.loads(dumps(policy_to_dict(policy))))
        assert restored.enforced
        samples = sample_buffer(pendulum_spec, 100, seed=1)
        np.testing.assert_array_equal(policy(samples), restored(samples))
