"""
One-step integrators driven by a (possibly random) step size.

Every stepper takes a state array ``x`` whose last axis is the dimension and
a step ``delta_mu`` that is either a scalar or an array over the leading axes
of ``x``. Replacing the deterministic step h by lam*h + sigma*dW turns any of
them into a scheme for the single-integrand SDE.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss

from .exceptions import CapabilityError, ConfigError, NonConvergenceError
from .problems import PoissonStructure, Problem
from .trees import RootedTree, enumerate_trees, gamma, rho

logger = logging.getLogger(__name__)

Array = np.ndarray
Field = Callable[[Array], Array]

ORDER_TOLERANCE = 1e-10


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-13
    max_iter: int = 100
    # mark rows that fail to converge as NaN instead of raising
    partial: bool = False

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ConfigError(f"Solver tolerance must be positive, got {self.tolerance}.", key="solver_tol")
        if self.max_iter < 1:
            raise ConfigError(f"Solver needs at least one iteration, got {self.max_iter}.", key="solver_max_iter")


def solve_implicit(
    residual_map: Callable[[Array], Array],
    initial_guess: Array,
    tolerance: float = 1e-13,
    max_iter: int = 100,
    core_ndim: Optional[int] = None,
    step_size: float = float("nan"),
    partial: bool = False,
) -> Tuple[Array, int]:
    """
    Fixed-point iteration y <- residual_map(y) until the sup-norm update drops below ``tolerance``.

    With ``core_ndim`` set, the trailing ``core_ndim`` axes form one unknown
    and the leading axes are independent rows: each row is frozen at its first
    converged iterate. Rows that turn non-finite stop iterating and are left
    to the caller.

    Returns:
        The iterate and the number of iterations used.

    Raises:
        NonConvergenceError: if some row is still moving after ``max_iter``
            iterations. With ``partial`` those rows are set to NaN instead.
    """
    y = np.array(initial_guess, dtype=float)
    if core_ndim is None:
        core_ndim = y.ndim
    core_axes = tuple(range(y.ndim - core_ndim, y.ndim))
    pending = np.ones(y.shape[: y.ndim - core_ndim], dtype=bool)
    expand = (Ellipsis,) + (None,) * core_ndim
    for iteration in range(1, max_iter + 1):
        update = np.asarray(residual_map(y), dtype=float)
        with np.errstate(invalid="ignore"):
            change = np.max(np.abs(update - y), axis=core_axes) if core_axes else np.abs(update - y)
            y = np.where(pending[expand], update, y)
            pending = pending & (change > tolerance)
        if not pending.any():
            return y, iteration
    failed = int(np.count_nonzero(pending))
    logger.warning(f"Fixed-point iteration failed for {failed} row(s) after {max_iter} iterations, |dM|={step_size:.3e}")
    if partial:
        return np.where(pending[expand], np.nan, y), max_iter
    raise NonConvergenceError(
        f"Fixed-point iteration did not converge in {max_iter} iterations (|dM| = {step_size:.3e}); the step is too large.",
        step_size=step_size,
        iterations=max_iter,
        failed=pending,
        iterate=y,
    )


# --- Tableaux ---

@dataclass(frozen=True, eq=False)
class ButcherTableau:
    A: Array
    b: Array
    c: Array
    name: str = ""

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        s = b.shape[0]
        if A.shape != (s, s) or c.shape != (s,):
            raise ConfigError(f"Tableau {self.name}: inconsistent shapes A{A.shape}, b{b.shape}, c{c.shape}.")
        if np.max(np.abs(A.sum(axis=1) - c)) > 1e-14:
            raise ConfigError(f"Tableau {self.name}: abscissae are not the row sums of A.")

    @property
    def stages(self) -> int:
        return self.b.shape[0]

    @property
    def explicit(self) -> bool:
        return bool(np.all(np.triu(self.A) == 0.0))


def gauss_legendre(n: int) -> Tuple[Array, Array]:
    """n-point Gauss-Legendre nodes and weights on [0, 1]."""
    if n < 1:
        raise ConfigError(f"Quadrature needs at least one point, got {n}.", key="quadrature_points")
    nodes, weights = leggauss(n)
    return (nodes + 1.0) / 2.0, weights / 2.0


@lru_cache(maxsize=None)
def _lagrange_basis(stages: int) -> Tuple[Polynomial, ...]:
    nodes, _ = gauss_legendre(stages)
    basis = []
    for j, node in enumerate(nodes):
        others = np.delete(nodes, j)
        polynomial = Polynomial.fromroots(others) if others.size else Polynomial([1.0])
        basis.append(polynomial / polynomial(node))
    return tuple(basis)


def integrated_basis(stages: int, points: Array) -> Array:
    """M[p, j] = integral of the j-th Lagrange polynomial (Gauss nodes) from 0 to points[p]."""
    return np.array([[ell.integ(lbnd=0.0)(point) for ell in _lagrange_basis(stages)] for point in points])


def basis_values(stages: int, points: Array) -> Array:
    return np.array([[ell(point) for ell in _lagrange_basis(stages)] for point in points])


def gauss_tableau(stages: int) -> ButcherTableau:
    nodes, weights = gauss_legendre(stages)
    return ButcherTableau(A=integrated_basis(stages, nodes), b=weights, c=nodes, name=f"gauss{stages}")


EULER = ButcherTableau(A=[[0.0]], b=[1.0], c=[0.0], name="euler")
HEUN = ButcherTableau(A=[[0.0, 0.0], [1.0, 0.0]], b=[0.5, 0.5], c=[0.0, 1.0], name="heun")
RK4 = ButcherTableau(
    A=[[0.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
    b=[1 / 6, 1 / 3, 1 / 3, 1 / 6],
    c=[0.0, 0.5, 0.5, 1.0],
    name="rk4",
)
MIDPOINT = ButcherTableau(A=[[0.5]], b=[1.0], c=[0.5], name="midpoint")
GAUSS2 = gauss_tableau(2)
GAUSS3 = gauss_tableau(3)

TABLEAUX: Dict[str, ButcherTableau] = {
    "euler": EULER,
    "heun": HEUN,
    "rk4": RK4,
    "midpoint": MIDPOINT,
    "gauss2": GAUSS2,
    "gauss3": GAUSS3,
}


# --- Order conditions ---

@lru_cache(maxsize=None)
def _stage_weights(tableau: ButcherTableau, tree: RootedTree) -> Array:
    weights = np.ones(tableau.stages)
    for child in tree.children:
        weights = weights * (tableau.A @ _stage_weights(tableau, child))
    return weights


def elementary_weight(tableau: ButcherTableau, tree: RootedTree) -> float:
    """Phi(tree) = sum_i b_i Phi_i(tree) with Phi_i([t_1..t_k]) = prod_k sum_j A_ij Phi_j(t_k)."""
    if tree.empty:
        return 1.0
    return float(tableau.b @ _stage_weights(tableau, tree))


@dataclass(frozen=True)
class OrderReport:
    method: str
    deterministic_order: int
    failing_tree: Optional[str] = None
    residual: Optional[float] = None

    @property
    def stochastic_order(self) -> int:
        return self.deterministic_order // 2


def detect_deterministic_order(tableau: ButcherTableau, n_max: int = 8) -> OrderReport:
    """Largest p <= n_max with |Phi - 1/gamma| <= 1e-10 on every tree of order <= p."""
    for tree in enumerate_trees(n_max):
        residual = abs(elementary_weight(tableau, tree) - 1.0 / gamma(tree))
        if residual > ORDER_TOLERANCE:
            report = OrderReport(tableau.name, rho(tree) - 1, str(tree), residual)
            logger.debug(f"{tableau.name}: order condition fails at {tree} (residual {residual:.3e})")
            return report
    return OrderReport(tableau.name, n_max)


# --- Steppers ---

def _batch_shape(x: Array, delta_mu) -> Tuple[int, ...]:
    return np.broadcast_shapes(x.shape[:-1], np.shape(delta_mu))


def rk_step(
    tableau: ButcherTableau,
    f: Field,
    x: Array,
    delta_mu,
    settings: Optional[SolverSettings] = None,
) -> Array:
    """One Runge-Kutta step of size ``delta_mu``; implicit tableaux iterate on the stage values."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(delta_mu, dtype=float)[..., None]
    if tableau.explicit:
        slopes: List[Array] = []
        for i in range(tableau.stages):
            stage = x
            for j in range(i):
                if tableau.A[i, j] != 0.0:
                    stage = stage + h * (tableau.A[i, j] * slopes[j])
            slopes.append(f(stage))
        increment = sum(tableau.b[i] * slopes[i] for i in range(tableau.stages))
        return x + h * increment

    settings = settings or SolverSettings()
    anchor = x[..., None, :]
    stage_h = h[..., None]

    def stage_map(stages):
        return anchor + stage_h * np.einsum("ij,...jd->...id", tableau.A, f(stages))

    initial = np.broadcast_to(anchor, _batch_shape(x, delta_mu) + (tableau.stages, x.shape[-1]))
    stages, _ = solve_implicit(
        stage_map,
        initial,
        settings.tolerance,
        settings.max_iter,
        core_ndim=2,
        step_size=float(np.max(np.abs(h), initial=0.0)),
        partial=settings.partial,
    )
    return x + h * np.einsum("i,...id->...d", tableau.b, f(stages))


def avf_step(f: Field, x: Array, delta_mu, quadrature_points: int = 3, settings: Optional[SolverSettings] = None) -> Array:
    """Averaged vector field: x1 = x + dM * int_0^1 f(x + t (x1 - x)) dt by Gauss-Legendre quadrature."""
    settings = settings or SolverSettings()
    x = np.asarray(x, dtype=float)
    h = np.asarray(delta_mu, dtype=float)[..., None]
    nodes, weights = gauss_legendre(quadrature_points)

    def average_map(x1):
        secant = x1 - x
        average = sum(weight * f(x + node * secant) for node, weight in zip(nodes, weights))
        return x + h * average

    initial = np.broadcast_to(x, _batch_shape(x, delta_mu) + x.shape[-1:])
    result, _ = solve_implicit(
        average_map, initial, settings.tolerance, settings.max_iter, core_ndim=1,
        step_size=float(np.max(np.abs(h), initial=0.0)),
        partial=settings.partial,
    )
    return result


@lru_cache(maxsize=None)
def _ep_coefficients(stages: int, quadrature_points: int):
    nodes, weights = gauss_legendre(stages)
    q_nodes, q_weights = gauss_legendre(quadrature_points)
    at_nodes = integrated_basis(stages, nodes)
    at_quadrature = integrated_basis(stages, q_nodes)
    # (1/b_i) * w_q * l_i(t_q)
    projection = (q_weights[:, None] * basis_values(stages, q_nodes)) / weights[None, :]
    return weights, at_nodes, at_quadrature, projection


def ep_step(
    poisson: Optional[PoissonStructure],
    x: Array,
    delta_mu,
    stages: int = 1,
    quadrature_points: Optional[int] = None,
    settings: Optional[SolverSettings] = None,
) -> Array:
    """
    Energy-preserving collocation EP(s) for x' = B(x) grad H(x).

    Stage slopes D_i = B(u(c_i)) (1/b_i) int_0^1 l_i(t) grad H(u(t)) dt define the
    polynomial u(t) = x + dM sum_j D_j int_0^t l_j; the step returns u(1).
    """
    if poisson is None:
        raise CapabilityError("Energy-preserving methods need a Poisson structure (B, grad H).")
    quadrature_points = quadrature_points or max(stages, 3)
    if quadrature_points < stages:
        raise ConfigError(
            f"EP({stages}) needs at least {stages} quadrature points, got {quadrature_points}.",
            key="quadrature_points",
        )
    settings = settings or SolverSettings()
    x = np.asarray(x, dtype=float)
    h = np.asarray(delta_mu, dtype=float)[..., None]
    weights, at_nodes, at_quadrature, projection = _ep_coefficients(stages, quadrature_points)
    anchor = x[..., None, :]
    stage_h = h[..., None]

    def slope_map(slopes):
        collocation = anchor + stage_h * np.einsum("pj,...jd->...pd", at_nodes, slopes)
        quadrature = anchor + stage_h * np.einsum("qj,...jd->...qd", at_quadrature, slopes)
        averaged = np.einsum("qi,...qd->...id", projection, poisson.gradient(quadrature))
        return np.einsum("...ij,...j->...i", poisson.matrix(collocation), averaged)

    shape = _batch_shape(x, delta_mu) + (stages, x.shape[-1])
    slopes, _ = solve_implicit(
        slope_map, np.zeros(shape), settings.tolerance, settings.max_iter, core_ndim=2,
        step_size=float(np.max(np.abs(h), initial=0.0)),
        partial=settings.partial,
    )
    return x + h * np.einsum("i,...id->...d", weights, slopes)


# --- Mollifier cutoff ---

def mollifier(r: Array) -> Array:
    """phi(r) = exp(-1/r) for r > 0, else 0."""
    r = np.asarray(r, dtype=float)
    positive = r > 0.0
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(positive, np.exp(-1.0 / np.where(positive, r, 1.0)), 0.0)


def cutoff_weight(level: Array, reference: float) -> Array:
    """1 for level <= 2*reference, 0 for level >= 4*reference, smooth in between."""
    inner = mollifier(4.0 * reference - level)
    outer = mollifier(level - 2.0 * reference)
    denominator = outer + inner
    # the two arguments sum to 2*reference > 0, so one of them is positive
    assert not np.any(denominator <= 0.0)
    return inner / denominator


def build_cutoff_field(f: Field, invariant: Callable[[Array], Array], reference: float) -> Field:
    """f~(x) = f(x) * phi(4C0 - C(x)) / (phi(C(x) - 2C0) + phi(4C0 - C(x)))."""
    if reference <= 0.0:
        raise ConfigError(f"Cutoff reference level must be positive, got {reference}.", key="cutoff")

    def cutoff_field(x):
        return f(x) * cutoff_weight(invariant(x), reference)[..., None]

    return cutoff_field


def build_cutoff_structure(poisson: PoissonStructure, invariant: Callable[[Array], Array], reference: float) -> PoissonStructure:
    """Same cutoff applied to B, so that B~ grad H = f~ stays skew."""
    if reference <= 0.0:
        raise ConfigError(f"Cutoff reference level must be positive, got {reference}.", key="cutoff")

    def matrix(x):
        return poisson.matrix(x) * cutoff_weight(invariant(x), reference)[..., None, None]

    return PoissonStructure(matrix=matrix, gradient=poisson.gradient)


# --- Method specification and registry ---

@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str  # "rk" | "avf" | "ep"
    tableau: Optional[ButcherTableau] = None
    stages: int = 1
    quadrature_points: Optional[int] = None
    cutoff: bool = False
    cutoff_invariant: str = "C"
    settings: SolverSettings = field(default_factory=SolverSettings)

    @property
    def deterministic_order(self) -> int:
        if self.kind == "rk":
            return detect_deterministic_order(self.tableau).deterministic_order
        if self.kind == "avf":
            return 2
        return 2 * self.stages

    @property
    def stochastic_order(self) -> int:
        return self.deterministic_order // 2

    def _cutoff_reference(self, problem: Problem) -> Tuple[Callable[[Array], Array], float]:
        if self.cutoff_invariant not in problem.invariants:
            raise CapabilityError(f"Problem {problem.name} has no invariant '{self.cutoff_invariant}' for the cutoff.")
        invariant = problem.invariants[self.cutoff_invariant]
        return invariant, float(invariant(problem.x0))

    def step(self, problem: Problem, x: Array, delta_mu) -> Array:
        f = problem.vector_field
        poisson = problem.poisson
        if self.cutoff:
            invariant, reference = self._cutoff_reference(problem)
            f = build_cutoff_field(f, invariant, reference)
            if poisson is not None:
                poisson = build_cutoff_structure(poisson, invariant, reference)
        if self.kind == "rk":
            return rk_step(self.tableau, f, x, delta_mu, self.settings)
        if self.kind == "avf":
            return avf_step(f, x, delta_mu, self.quadrature_points or 3, self.settings)
        if self.kind == "ep":
            if poisson is None:
                raise CapabilityError(f"Method {self.name} needs a Poisson structure; {problem.name} has none.")
            return ep_step(poisson, x, delta_mu, self.stages, self.quadrature_points, self.settings)
        raise ConfigError(f"Unknown method kind '{self.kind}'.")


METHOD_NAMES = ("euler", "heun", "rk4", "midpoint", "gauss2", "gauss3", "avf", "eps1", "eps2", "eps3")


def resolve_method(
    name: str,
    quadrature_points: Optional[int] = None,
    settings: Optional[SolverSettings] = None,
    cutoff_invariant: str = "C",
) -> MethodSpec:
    """Registry lookup; a ``.cutoff`` suffix enables the mollifier wrapper."""
    base, _, suffix = name.partition(".")
    if suffix not in ("", "cutoff") or base not in METHOD_NAMES:
        raise ConfigError(f"Unknown method '{name}'. Known methods: {', '.join(METHOD_NAMES)} (optionally with '.cutoff').", key="methods.names")
    settings = settings or SolverSettings()
    common = dict(name=name, cutoff=bool(suffix), cutoff_invariant=cutoff_invariant, settings=settings)
    if base in TABLEAUX:
        return MethodSpec(kind="rk", tableau=TABLEAUX[base], **common)
    if base == "avf":
        return MethodSpec(kind="avf", quadrature_points=quadrature_points or 3, **common)
    stages = int(base[-1])
    return MethodSpec(kind="ep", stages=stages, quadrature_points=quadrature_points or max(stages, 3), **common)
