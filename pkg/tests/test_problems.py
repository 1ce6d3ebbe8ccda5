from dataclasses import replace
from math import cos, exp

import numpy as np
import pytest

from bseries_sde.bseries import FiniteDifferenceOracle
from bseries_sde.exceptions import ConfigError, FiniteTimeExplosionError
from bseries_sde.problems import (
    PROBLEMS,
    RigidBodyParams,
    build_problem,
    cross_matrix,
    exact_flow_reference,
    fatigue_solution,
    make_fatigue,
    make_kubo,
    rotate,
)


@pytest.mark.unit
class TestRigidBody:
    def test_field_is_poisson(self, rigid_body, random_states):
        assert np.allclose(rigid_body.vector_field(random_states), rigid_body.poisson.field(random_states), atol=1e-14)

    def test_structure_is_skew(self, random_states):
        matrices = cross_matrix(random_states)
        assert np.allclose(matrices, -np.swapaxes(matrices, -1, -2))

    def test_casimir_gradient_in_kernel(self, random_states):
        # grad C = 2x and B(x) x = x cross x = 0
        kernel = np.einsum("...ij,...j->...i", cross_matrix(random_states), 2.0 * random_states)
        assert np.allclose(kernel, 0.0)

    def test_invariants_orthogonal_to_field(self, rigid_body, random_states):
        f = rigid_body.vector_field(random_states)
        weights = 1.0 / np.array([0.345, 0.653, 1.0])
        assert np.allclose(np.sum(f * random_states, axis=-1), 0.0, atol=1e-14)
        assert np.allclose(np.sum(f * weights * random_states, axis=-1), 0.0, atol=1e-14)

    def test_derivatives_match_finite_differences(self, rigid_body):
        x = np.array([0.4, -0.7, 0.2])
        u, v = np.array([1.0, 0.5, -0.3]), np.array([-0.2, 0.1, 0.8])
        numeric = FiniteDifferenceOracle(rigid_body.vector_field, dimension=3)
        assert np.allclose(rigid_body.oracle.contract(x, [u]), numeric.contract(x, [u]), atol=1e-8)
        assert np.allclose(rigid_body.oracle.contract(x, [u, v]), numeric.contract(x, [u, v]), atol=1e-4)
        assert np.array_equal(rigid_body.oracle.contract(x, [u, v, u]), np.zeros(3))

    def test_parameters_validated(self):
        with pytest.raises(ConfigError):
            RigidBodyParams(0.0, 1.0, 1.0)
        with pytest.raises(ConfigError):
            build_problem("rigid-body", x0=[1.0, 0.0])

    def test_certified_flow_conserves_invariants(self, rigid_body):
        s = np.array([0.3, -0.5, 1.2])
        x0 = np.broadcast_to(rigid_body.x0, (3, 3))
        flow = exact_flow_reference(rigid_body, x0, s)
        for invariant in rigid_body.invariants.values():
            assert np.allclose(invariant(flow), invariant(rigid_body.x0), atol=1e-12)

    def test_certified_flow_is_a_flow(self, rigid_body):
        # phi_{a+b} = phi_b o phi_a
        once = exact_flow_reference(rigid_body, rigid_body.x0, np.array(0.7))
        twice = exact_flow_reference(rigid_body, exact_flow_reference(rigid_body, rigid_body.x0, np.array(0.3)), np.array(0.4))
        assert np.allclose(once, twice, atol=1e-11)

    def test_initial_invariants(self, rigid_body):
        # 0.5 * (0.64 / 0.345 + 0.36 / 0.653)
        assert float(rigid_body.invariants["H"](rigid_body.x0)) == pytest.approx(1.2031870741, abs=1e-9)
        assert float(rigid_body.invariants["C"](rigid_body.x0)) == pytest.approx(1.0, rel=1e-15)

    def test_zero_time_flow(self, rigid_body):
        assert np.allclose(exact_flow_reference(rigid_body, rigid_body.x0, np.array(0.0)), rigid_body.x0)


@pytest.mark.unit
class TestKubo:
    def test_flow_is_rotation(self, kubo):
        x = kubo.exact_flow(np.array([1.0, 0.0]), np.array(np.pi / 2))
        assert np.allclose(x, [0.0, 1.0], atol=1e-15)

    def test_certified_integration_matches_rotation(self, kubo):
        generic = replace(kubo, exact_flow=None)
        x0 = np.array([1.0, 0.0])
        s = np.array([0.3, -0.3, 1.7, -1.7])
        flows = exact_flow_reference(generic, x0, s, strict=True)
        assert np.allclose(flows, rotate(x0, s), rtol=0.0, atol=1e-12)

    def test_field(self, kubo):
        assert np.array_equal(kubo.vector_field(np.array([1.0, 2.0])), np.array([-2.0, 1.0]))

    def test_weak_target_second_moment(self, kubo):
        # E[X1^2] = (1 + e^{-2 sigma^2 T} cos 2 lam T) / 2 from x0 = (1, 0)
        value = kubo.weak_targets["X1^2"](1, 0.5, 1.0)
        assert value == pytest.approx(0.5 + 0.5 * exp(-0.5) * cos(2.0), abs=1e-15)
        assert value == pytest.approx(0.3737966, abs=1e-6)

    def test_weak_targets_against_quadrature(self, kubo):
        # integrate g(rotate(x0, mu)) over the Gaussian law of mu
        lam, sigma, T = 1, 0.7, 0.8
        nodes, weights = np.polynomial.hermite_e.hermegauss(60)
        mu = lam * T + sigma * np.sqrt(T) * nodes
        states = rotate(np.broadcast_to(kubo.x0, (60, 2)), mu)
        for name in ("X1^2", "X2^2", "X1*X2", "H"):
            expected = np.dot(weights, kubo.observables[name](states)) / weights.sum()
            assert kubo.weak_targets[name](lam, sigma, T) == pytest.approx(expected, abs=1e-12)

    def test_general_initial_state(self):
        problem = make_kubo((0.3, -0.4))
        lam, sigma, T = 1, 0.5, 1.3
        nodes, weights = np.polynomial.hermite_e.hermegauss(60)
        states = rotate(np.broadcast_to(problem.x0, (60, 2)), lam * T + sigma * np.sqrt(T) * nodes)
        expected = np.dot(weights, states[:, 0] * states[:, 1]) / weights.sum()
        assert problem.weak_targets["X1*X2"](lam, sigma, T) == pytest.approx(expected, abs=1e-12)

    def test_energy_is_conserved_by_flow(self, kubo):
        s = np.linspace(-3.0, 3.0, 7)
        states = kubo.exact_flow(np.broadcast_to(kubo.x0, (7, 2)), s)
        assert np.allclose(kubo.invariants["H"](states), 0.5)


@pytest.mark.unit
class TestFatigue:
    def test_driver_override(self, fatigue):
        assert fatigue.driver_override == (1, 0.5)

    def test_closed_form_solution(self, fatigue):
        # p = 2, a = 1: X(t) = 1 / (1/x0 - mu)
        assert fatigue_solution(fatigue, 0.5, 0.4) == pytest.approx(1.0 / (2.0 - 0.7))

    def test_blow_up(self, fatigue):
        with pytest.raises(FiniteTimeExplosionError):
            fatigue_solution(fatigue, 2.5, 0.0)

    def test_flow_matches_certified_integration(self):
        problem = make_fatigue(a=1.0, b=0.5, p=3.0, x0=0.5)
        s = np.array([0.1, -0.4, 0.6])
        closed = problem.exact_flow(np.broadcast_to(problem.x0, (3, 1)), s)
        integrated = exact_flow_reference(replace(problem, exact_flow=None), problem.x0, s)
        assert np.allclose(closed, integrated, atol=1e-10)

    def test_strict_reference_raises(self, fatigue):
        with pytest.raises(FiniteTimeExplosionError):
            exact_flow_reference(fatigue, fatigue.x0, np.array(3.0), strict=True)

    def test_derivatives(self, fatigue):
        x = np.array([0.7])
        assert fatigue.oracle.contract(x, [np.array([1.0])]) == pytest.approx(2.0 * 0.7)
        assert fatigue.oracle.contract(x, [np.array([1.0]), np.array([1.0])]) == pytest.approx(2.0)
        assert fatigue.oracle.contract(x, [np.array([1.0])] * 3) == pytest.approx(0.0)

    @pytest.mark.parametrize("kwargs", [{"p": 1.0}, {"a": 0.0}, {"x0": -0.1}])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            make_fatigue(**kwargs)


@pytest.mark.unit
class TestRegistry:
    def test_names(self):
        assert set(PROBLEMS) == {"rigid-body", "kubo", "fatigue"}

    def test_none_means_default(self):
        problem = build_problem("rigid-body", inertia=None, x0=None)
        assert np.array_equal(problem.x0, [0.8, 0.6, 0.0])

    def test_unknown_problem(self):
        with pytest.raises(ConfigError):
            build_problem("pendulum")

    def test_unknown_parameter(self):
        with pytest.raises(ConfigError) as excinfo:
            build_problem("kubo", inertia=[1.0, 1.0, 1.0])
        assert excinfo.value.key == "problem.inertia"
