from math import sqrt

import numpy as np
import pytest

from bseries_sde.bseries import evaluate_bseries, exact_weights
from bseries_sde.exceptions import CapabilityError, ConfigError, NonConvergenceError
from bseries_sde.harness import fit_order
from bseries_sde.methods import (
    EULER,
    GAUSS2,
    GAUSS3,
    HEUN,
    METHOD_NAMES,
    MIDPOINT,
    RK4,
    TABLEAUX,
    ButcherTableau,
    SolverSettings,
    avf_step,
    build_cutoff_field,
    cutoff_weight,
    detect_deterministic_order,
    elementary_weight,
    ep_step,
    gauss_tableau,
    mollifier,
    resolve_method,
    rk_step,
    solve_implicit,
)
from bseries_sde.trees import LEAF, MAX_TREE_ORDER, RootedTree

TOL = 1e-13
SETTINGS = SolverSettings(tolerance=TOL, max_iter=200)
SYMMETRIC = ["midpoint", "gauss2", "gauss3", "avf", "eps1", "eps2", "eps3"]


@pytest.mark.unit
class TestTableaux:
    def test_row_sum_convention_enforced(self):
        with pytest.raises(ConfigError):
            ButcherTableau(A=[[0.0, 0.0], [1.0, 0.0]], b=[0.5, 0.5], c=[0.0, 0.5], name="bad")

    def test_explicit_flags(self):
        assert EULER.explicit and HEUN.explicit and RK4.explicit
        assert not MIDPOINT.explicit and not GAUSS2.explicit and not GAUSS3.explicit

    def test_gauss_one_stage_is_midpoint(self):
        tableau = gauss_tableau(1)
        assert np.allclose(tableau.A, MIDPOINT.A)
        assert np.allclose(tableau.b, MIDPOINT.b)

    def test_gauss2_coefficients(self):
        offset = sqrt(3.0) / 6.0
        assert np.allclose(GAUSS2.c, [0.5 - offset, 0.5 + offset])
        assert np.allclose(GAUSS2.A, [[0.25, 0.25 - offset], [0.25 + offset, 0.25]])


@pytest.mark.unit
class TestOrderConditions:
    def test_euler_weights(self):
        assert elementary_weight(EULER, LEAF) == 1.0
        assert elementary_weight(EULER, RootedTree.from_string("[.]")) == 0.0

    def test_rk4_weight(self):
        assert elementary_weight(RK4, RootedTree.from_string("[.]")) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("tableau, deterministic, stochastic", [
        (EULER, 1, 0),
        (HEUN, 2, 1),
        (MIDPOINT, 2, 1),
        (RK4, 4, 2),
        (GAUSS2, 4, 2),
        (GAUSS3, 6, 3),
    ])
    def test_detected_orders(self, tableau, deterministic, stochastic):
        report = detect_deterministic_order(tableau)
        assert report.deterministic_order == deterministic
        assert report.stochastic_order == stochastic

    def test_failing_tree_reported(self):
        report = detect_deterministic_order(EULER)
        assert report.failing_tree == "[.]"
        assert report.residual == pytest.approx(0.5)

    def test_all_conditions_hold_below_n_max(self):
        report = detect_deterministic_order(RK4, n_max=3)
        assert report.deterministic_order == 3
        assert report.failing_tree is None


@pytest.mark.unit
class TestSolver:
    def test_affine_contraction(self):
        y, iterations = solve_implicit(lambda y: 0.5 * y + 1.0, np.zeros(1), tolerance=1e-13, max_iter=100)
        assert y[0] == pytest.approx(2.0, abs=1e-12)
        assert iterations <= 50

    def test_zero_map(self):
        _, iterations = solve_implicit(lambda y: np.zeros_like(y), np.zeros(2))
        assert iterations == 1

    def test_expansion_fails(self):
        with pytest.raises(NonConvergenceError):
            solve_implicit(lambda y: 2.0 * y + 1.0, np.zeros(1), max_iter=30)

    def test_partial_marks_only_failing_rows(self):
        scale = np.array([0.5, 2.0, 0.25])[:, None]
        y, _ = solve_implicit(lambda y: scale * y + 1.0, np.zeros((3, 1)), max_iter=60, core_ndim=1, partial=True)
        assert y[0, 0] == pytest.approx(2.0)
        assert np.isnan(y[1, 0])
        assert y[2, 0] == pytest.approx(4.0 / 3.0)

    def test_rows_do_not_depend_on_batch(self):
        scale = np.array([0.5, 0.9])[:, None]
        batch, _ = solve_implicit(lambda y: scale * y + 1.0, np.zeros((2, 1)), core_ndim=1, max_iter=500)
        alone, _ = solve_implicit(lambda y: 0.5 * y + 1.0, np.zeros((1, 1)), core_ndim=1, max_iter=500)
        assert batch[0, 0] == alone[0, 0]


@pytest.mark.unit
class TestSteppers:
    @pytest.mark.parametrize("name", METHOD_NAMES)
    def test_zero_step_is_identity(self, rigid_body, name):
        x = np.array([0.8, 0.6, 0.0])
        assert np.allclose(resolve_method(name).step(rigid_body, x, 0.0), x, rtol=0.0, atol=0.0)

    def test_euler_scalar(self):
        assert rk_step(EULER, lambda x: x, np.array([1.0]), 0.5)[0] == 1.5

    def test_midpoint_is_cayley_rotation_on_kubo(self, kubo):
        h = 0.2
        result = rk_step(MIDPOINT, kubo.vector_field, np.array([1.0, 0.0]), h, SETTINGS)
        expected = np.array([1.0 - h * h / 4.0, h]) / (1.0 + h * h / 4.0)
        assert np.allclose(result, expected, atol=1e-12)
        assert result[0] == pytest.approx(0.980198, abs=1e-6)
        assert result[1] == pytest.approx(0.198019, abs=1e-6)

    def test_avf_equals_midpoint_for_linear_fields(self, kubo):
        x = np.array([0.3, -1.2])
        avf = avf_step(kubo.vector_field, x, 0.15, settings=SETTINGS)
        midpoint = rk_step(MIDPOINT, kubo.vector_field, x, 0.15, SETTINGS)
        assert np.allclose(avf, midpoint, atol=1e-12)

    def test_avf_quadratic_scalar(self):
        result = avf_step(lambda x: x ** 2, np.array([1.0]), 0.1, quadrature_points=2, settings=SETTINGS)
        # x1 = 1 + 0.1 (1 + x1 + x1^2) / 3, i.e. x1^2 - 29 x1 + 31 = 0
        assert result[0] == pytest.approx((29.0 - sqrt(717.0)) / 2.0, abs=1e-12)

    def test_eps1_equals_midpoint_on_kubo(self, kubo):
        x = np.array([0.3, -1.2])
        ep = ep_step(kubo.poisson, x, 0.15, stages=1, settings=SETTINGS)
        midpoint = rk_step(MIDPOINT, kubo.vector_field, x, 0.15, SETTINGS)
        assert np.allclose(ep, midpoint, atol=1e-12)

    def test_ep_requires_poisson_structure(self, fatigue):
        with pytest.raises(CapabilityError):
            resolve_method("eps1").step(fatigue, fatigue.x0, 0.01)

    def test_ep_quadrature_must_cover_stages(self, rigid_body):
        with pytest.raises(ConfigError):
            ep_step(rigid_body.poisson, rigid_body.x0, 0.1, stages=3, quadrature_points=2)

    @pytest.mark.parametrize("name", ["rk4", "gauss2", "eps2"])
    def test_batched_step_matches_rows(self, rigid_body, random_states, random_steps, name):
        method = resolve_method(name, settings=SETTINGS)
        batched = method.step(rigid_body, random_states, random_steps)
        rows = np.stack([method.step(rigid_body, x, h) for x, h in zip(random_states, random_steps)])
        assert np.allclose(batched, rows, rtol=0.0, atol=1e-12)

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            resolve_method("rk5")
        with pytest.raises(ConfigError):
            resolve_method("rk4.clipped")

    def test_registry(self):
        assert set(TABLEAUX) <= set(METHOD_NAMES)
        assert resolve_method("eps3").deterministic_order == 6
        assert resolve_method("avf").stochastic_order == 1
        assert resolve_method("gauss2.cutoff").cutoff


@pytest.mark.unit
class TestGeometricProperties:
    @pytest.mark.parametrize("name", ["midpoint", "gauss2", "gauss3"])
    def test_gauss_preserves_quadratic_invariants(self, rigid_body, random_states, random_steps, name):
        method = resolve_method(name, settings=SETTINGS)
        result = method.step(rigid_body, random_states, random_steps)
        for invariant in rigid_body.invariants.values():
            assert np.max(np.abs(invariant(result) - invariant(random_states))) <= 10 * TOL

    @pytest.mark.parametrize("name", ["eps1", "eps2", "eps3"])
    def test_ep_preserves_energy_and_casimir(self, rigid_body, random_states, random_steps, name):
        method = resolve_method(name, settings=SETTINGS)
        result = method.step(rigid_body, random_states, random_steps)
        for invariant in rigid_body.invariants.values():
            assert np.max(np.abs(invariant(result) - invariant(random_states))) <= 10 * TOL

    @pytest.mark.parametrize("name", SYMMETRIC)
    def test_symmetry(self, rigid_body, random_states, random_steps, name):
        method = resolve_method(name, settings=SETTINGS)
        forward = method.step(rigid_body, random_states, random_steps)
        back = method.step(rigid_body, forward, -random_steps)
        assert np.max(np.abs(back - random_states)) <= 10 * TOL

    def test_rk4_does_not_preserve_energy(self, rigid_body, random_states):
        result = resolve_method("rk4").step(rigid_body, random_states, 0.1)
        drift = np.abs(rigid_body.invariants["H"](result) - rigid_body.invariants["H"](random_states))
        assert np.max(drift) > 1e-8


def _local_ladder(order):
    # high orders need larger steps to stay above rounding
    if order >= 6:
        return [2.0 ** -k for k in range(2, 6)]
    if order >= 4:
        return [2.0 ** -k for k in range(3, 7)]
    return [2.0 ** -k for k in range(4, 9)]


@pytest.mark.unit
@pytest.mark.parametrize("name", ["euler", "heun", "midpoint", "rk4", "gauss2", "gauss3", "avf", "eps1", "eps2", "eps3"])
def test_local_error_against_exact_series(rigid_body, name):
    method = resolve_method(name, settings=SolverSettings(tolerance=1e-14, max_iter=500))
    order = method.deterministic_order
    x = rigid_body.x0
    steps = _local_ladder(order)
    errors = []
    for delta in steps:
        exact = evaluate_bseries(exact_weights(delta), rigid_body.oracle, x, n_max=min(order + 4, MAX_TREE_ORDER))
        errors.append(np.max(np.abs(method.step(rigid_body, x, delta) - exact)))
    assert fit_order(steps, errors).slope >= order + 0.8


@pytest.mark.unit
class TestCutoff:
    def test_mollifier(self):
        assert mollifier(0.0) == 0.0
        assert mollifier(-1.0) == 0.0
        assert mollifier(1.0) == pytest.approx(np.exp(-1.0))

    @pytest.mark.parametrize("level, expected", [(0.5, 1.0), (2.0, 1.0), (3.0, 0.5), (4.0, 0.0), (7.0, 0.0)])
    def test_weight(self, level, expected):
        assert cutoff_weight(np.array(level), 1.0) == expected

    def test_field_inside_outside_and_halfway(self, rigid_body):
        casimir = rigid_body.invariants["C"]
        reference = float(casimir(rigid_body.x0))
        field = build_cutoff_field(rigid_body.vector_field, casimir, reference)
        direction = np.array([0.3, 0.5, -0.2])
        direction = direction / np.linalg.norm(direction)
        for ratio, factor in [(1.0, 1.0), (2.0, 1.0), (3.0, 0.5), (4.0, 0.0), (5.0, 0.0)]:
            x = direction * np.sqrt(ratio * reference)
            assert np.array_equal(field(x), rigid_body.vector_field(x) * factor)

    def test_cutoff_is_neutral_on_the_level_set(self, rigid_body, random_steps):
        x = np.broadcast_to(rigid_body.x0, (100, 3))
        plain = resolve_method("eps2", settings=SETTINGS).step(rigid_body, x, random_steps)
        wrapped = resolve_method("eps2.cutoff", settings=SETTINGS).step(rigid_body, x, random_steps)
        assert np.max(np.abs(plain - wrapped)) <= TOL

    def test_hamiltonian_cutoff(self, rigid_body):
        method = resolve_method("midpoint.cutoff", cutoff_invariant="H")
        x = rigid_body.x0
        assert np.allclose(method.step(rigid_body, x, 0.05), resolve_method("midpoint").step(rigid_body, x, 0.05))

    def test_nonpositive_reference(self, rigid_body):
        with pytest.raises(ConfigError):
            build_cutoff_field(rigid_body.vector_field, rigid_body.invariants["C"], 0.0)
