"""
Example single-integrand systems: the stochastic rigid body, the Kubo
oscillator and the fatigue-cracking model.

Each problem bundles its vector field (as a ``DerivativeOracle``), optional
Poisson structure, invariants, observables and whatever exact references are
available in closed form.
"""
import logging
from dataclasses import dataclass, field
from math import cos, exp, sin
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .bseries import DerivativeOracle
from .exceptions import ConfigError, FiniteTimeExplosionError, ReferenceAccuracyError

logger = logging.getLogger(__name__)

Array = np.ndarray
StateFunction = Callable[[Array], Array]


@dataclass(frozen=True, eq=False)
class PoissonStructure:
    """f(x) = matrix(x) @ gradient(x) with a skew-symmetric matrix."""
    matrix: Callable[[Array], Array]
    gradient: StateFunction

    def field(self, x: Array) -> Array:
        return np.einsum("...ij,...j->...i", self.matrix(x), self.gradient(x))


@dataclass(frozen=True, eq=False)
class Problem:
    name: str
    dimension: int
    x0: Array
    oracle: DerivativeOracle
    poisson: Optional[PoissonStructure] = None
    invariants: Dict[str, StateFunction] = field(default_factory=dict)
    observables: Dict[str, StateFunction] = field(default_factory=dict)
    # flow of dy/dt = f(y) at signed times s, batched over leading axes
    exact_flow: Optional[Callable[[Array, Array], Array]] = None
    # closed-form E[g(X(T))] as a function of (lam, sigma, T)
    weak_targets: Dict[str, Callable[[int, float, float], float]] = field(default_factory=dict)
    # (lam, sigma) forced on the driver when the problem rescales its noise
    driver_override: Optional[Tuple[int, float]] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def vector_field(self, x: Array) -> Array:
        return self.oracle.field(x)

    def __call__(self, x: Array) -> Array:
        return self.oracle.field(x)


# --- Rigid body ---

@dataclass(frozen=True)
class RigidBodyParams:
    I1: float = 0.345
    I2: float = 0.653
    I3: float = 1.0

    def __post_init__(self):
        if min(self.I1, self.I2, self.I3) <= 0.0:
            raise ConfigError(f"Moments of inertia must be positive, got {self.inertia}.", key="inertia")

    @property
    def inertia(self) -> Tuple[float, float, float]:
        return (self.I1, self.I2, self.I3)


def cross_matrix(x: Array) -> Array:
    """Skew matrix with first row (0, -x3, x2), batched over leading axes."""
    x = np.asarray(x, dtype=float)
    zero = np.zeros_like(x[..., 0])
    return np.stack(
        [
            np.stack([zero, -x[..., 2], x[..., 1]], axis=-1),
            np.stack([x[..., 2], zero, -x[..., 0]], axis=-1),
            np.stack([-x[..., 1], x[..., 0], zero], axis=-1),
        ],
        axis=-2,
    )


class RigidBodyOracle(DerivativeOracle):
    """f(X) = X x (X / I); quadratic, so f'' is constant and f''' vanishes."""

    dimension = 3
    max_order = None

    def __init__(self, params: RigidBodyParams):
        self.weights = 1.0 / np.asarray(params.inertia, dtype=float)

    def field(self, x):
        x = np.asarray(x, dtype=float)
        return np.cross(x, self.weights * x)

    def derivative(self, x, vectors):
        x = np.asarray(x, dtype=float)
        if len(vectors) == 1:
            (v,) = vectors
            return np.cross(v, self.weights * x) + np.cross(x, self.weights * v)
        if len(vectors) == 2:
            u, v = vectors
            return np.cross(u, self.weights * v) + np.cross(v, self.weights * u)
        return np.zeros(np.broadcast_shapes(x.shape, *(np.shape(v) for v in vectors)))


def make_rigid_body(params: Optional[RigidBodyParams] = None, x0: Sequence[float] = (0.8, 0.6, 0.0)) -> Problem:
    params = params or RigidBodyParams()
    weights = 1.0 / np.asarray(params.inertia, dtype=float)

    def hamiltonian(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(weights * x * x, axis=-1)

    def casimir(x):
        x = np.asarray(x, dtype=float)
        return np.sum(x * x, axis=-1)

    def component_square(index):
        return lambda x: np.asarray(x, dtype=float)[..., index] ** 2

    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (3,):
        raise ConfigError(f"Rigid body needs a 3-component x0, got {x0.tolist()}.", key="x0")

    return Problem(
        name="rigid-body",
        dimension=3,
        x0=x0,
        oracle=RigidBodyOracle(params),
        poisson=PoissonStructure(matrix=cross_matrix, gradient=lambda x: weights * np.asarray(x, dtype=float)),
        invariants={"H": hamiltonian, "C": casimir},
        observables={
            "X1^2": component_square(0),
            "X2^2": component_square(1),
            "X3^2": component_square(2),
            "H": hamiltonian,
            "C": casimir,
            "one": lambda x: np.ones(np.shape(x)[:-1]),
        },
        weak_targets={
            "H": lambda lam, sigma, T: float(hamiltonian(x0)),
            "C": lambda lam, sigma, T: float(casimir(x0)),
            "one": lambda lam, sigma, T: 1.0,
        },
        params={"inertia": list(params.inertia), "x0": x0.tolist()},
    )


# --- Kubo oscillator ---

KUBO_STRUCTURE = np.array([[0.0, -1.0], [1.0, 0.0]])


class LinearOracle(DerivativeOracle):
    """f(x) = L x."""

    max_order = None

    def __init__(self, matrix: Array):
        self.matrix = np.asarray(matrix, dtype=float)
        self.dimension = self.matrix.shape[0]

    def field(self, x):
        return np.einsum("ij,...j->...i", self.matrix, np.asarray(x, dtype=float))

    def derivative(self, x, vectors):
        if len(vectors) == 1:
            return np.einsum("ij,...j->...i", self.matrix, np.asarray(vectors[0], dtype=float))
        return np.zeros(np.broadcast_shapes(np.shape(x), *(np.shape(v) for v in vectors)))


def rotate(x: Array, angle: Array) -> Array:
    x = np.asarray(x, dtype=float)
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * x[..., 0] - s * x[..., 1], s * x[..., 0] + c * x[..., 1]], axis=-1)


def make_kubo(x0: Sequence[float] = (1.0, 0.0)) -> Problem:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (2,):
        raise ConfigError(f"Kubo oscillator needs a 2-component x0, got {x0.tolist()}.", key="x0")
    a, b = float(x0[0]), float(x0[1])
    radius = a * a + b * b
    split = a * a - b * b

    def damping(sigma, T):
        return exp(-2.0 * sigma * sigma * T)

    # E[cos 2mu] = e^{-2 sigma^2 T} cos(2 lam T) and likewise for sin.
    def second_moment_x1(lam, sigma, T):
        return 0.5 * radius + 0.5 * damping(sigma, T) * (split * cos(2 * lam * T) - 2 * a * b * sin(2 * lam * T))

    def second_moment_x2(lam, sigma, T):
        return 0.5 * radius - 0.5 * damping(sigma, T) * (split * cos(2 * lam * T) - 2 * a * b * sin(2 * lam * T))

    def cross_moment(lam, sigma, T):
        return damping(sigma, T) * (0.5 * split * sin(2 * lam * T) + a * b * cos(2 * lam * T))

    def hamiltonian(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1)

    return Problem(
        name="kubo",
        dimension=2,
        x0=x0,
        oracle=LinearOracle(KUBO_STRUCTURE),
        poisson=PoissonStructure(
            matrix=lambda x: np.broadcast_to(KUBO_STRUCTURE, np.shape(x)[:-1] + (2, 2)),
            gradient=lambda x: np.asarray(x, dtype=float),
        ),
        invariants={"H": hamiltonian},
        observables={
            "X1^2": lambda x: np.asarray(x, dtype=float)[..., 0] ** 2,
            "X2^2": lambda x: np.asarray(x, dtype=float)[..., 1] ** 2,
            "X1*X2": lambda x: np.asarray(x, dtype=float)[..., 0] * np.asarray(x, dtype=float)[..., 1],
            "H": hamiltonian,
            "one": lambda x: np.ones(np.shape(x)[:-1]),
        },
        exact_flow=rotate,
        weak_targets={
            "X1^2": second_moment_x1,
            "X2^2": second_moment_x2,
            "X1*X2": cross_moment,
            "H": lambda lam, sigma, T: 0.5 * radius,
            "one": lambda lam, sigma, T: 1.0,
        },
        params={"x0": x0.tolist()},
    )


# --- Fatigue cracking ---

class ScalarPowerOracle(DerivativeOracle):
    """f(x) = coefficient * x**exponent in one dimension."""

    dimension = 1
    max_order = None

    def __init__(self, coefficient: float, exponent: float):
        self.coefficient = float(coefficient)
        self.exponent = float(exponent)

    def field(self, x):
        x = np.asarray(x, dtype=float)
        return self.coefficient * x ** self.exponent

    def derivative(self, x, vectors):
        x = np.asarray(x, dtype=float)
        k = len(vectors)
        falling = 1.0
        for j in range(k):
            falling *= self.exponent - j
        if falling == 0.0:
            return np.zeros(np.broadcast_shapes(x.shape, *(np.shape(v) for v in vectors)))
        value = self.coefficient * falling * x ** (self.exponent - k)
        for v in vectors:
            value = value * np.asarray(v, dtype=float)
        return value


def make_fatigue(a: float = 1.0, b: float = 0.5, p: float = 2.0, x0: float = 0.5) -> Problem:
    """
    dX = a X^p dt + b X^p o dW, rewritten as dX = (a X^p)(dt + (b/a) o dW).

    The driver is forced to lam = 1, sigma = b / a.
    """
    if p <= 1.0:
        raise ConfigError(f"Fatigue exponent p must exceed 1, got {p}.", key="p")
    if a == 0.0:
        raise ConfigError("Fatigue drift coefficient a must be nonzero.", key="a")
    x0_value = float(np.ravel(x0)[0])
    if x0_value <= 0.0:
        raise ConfigError(f"Fatigue initial crack length must be positive, got {x0_value}.", key="x0")

    def flow(x, s):
        x = np.asarray(x, dtype=float)
        s = np.asarray(s, dtype=float)
        base = x[..., 0] ** (1.0 - p) - (p - 1.0) * a * s
        with np.errstate(invalid="ignore", divide="ignore"):
            value = np.where(base > 0.0, np.abs(base) ** (1.0 / (1.0 - p)), np.nan)
        return value[..., None]

    return Problem(
        name="fatigue",
        dimension=1,
        x0=np.array([x0_value]),
        oracle=ScalarPowerOracle(a, p),
        observables={
            "X": lambda x: np.asarray(x, dtype=float)[..., 0],
            "X^2": lambda x: np.asarray(x, dtype=float)[..., 0] ** 2,
            "one": lambda x: np.ones(np.shape(x)[:-1]),
        },
        exact_flow=flow,
        weak_targets={"one": lambda lam, sigma, T: 1.0},
        driver_override=(1, b / a),
        params={"a": a, "b": b, "p": p, "x0": x0_value},
    )


def fatigue_solution(problem: Problem, t: float, w: float) -> float:
    """X(t) for a fatigue problem given W(t) = w; raises on blow-up."""
    _, sigma = problem.driver_override
    value = problem.exact_flow(problem.x0, t + sigma * w)
    if not np.all(np.isfinite(value)):
        raise FiniteTimeExplosionError(f"Fatigue solution explodes before t={t} (W(t)={w}).")
    return float(value[0])


# --- Reference flow ---

def exact_flow_reference(
    problem: Problem,
    x0: Array,
    s: Array,
    tolerance: float = 1e-12,
    initial_substeps: int = 8,
    max_halvings: int = 12,
    solver_tol: float = 1e-14,
    strict: bool = False,
) -> Array:
    """
    Flow of dy/dt = f(y) to signed times ``s`` (one per leading index of ``x0``).

    Closed-form flows are used when the problem has one. Otherwise Gauss
    collocation with s=3 at a fixed number of substeps, doubled until two
    successive results agree to ``tolerance``. Rows that blow up come back as
    NaN unless ``strict`` is set.
    """
    from .methods import GAUSS3, SolverSettings, rk_step

    x0 = np.asarray(x0, dtype=float)
    s = np.asarray(s, dtype=float)
    if problem.exact_flow is not None:
        result = problem.exact_flow(x0, s)
    else:
        settings = SolverSettings(tolerance=solver_tol, max_iter=200)

        def integrate(substeps):
            x = np.broadcast_to(x0, np.broadcast_shapes(x0.shape, s.shape + (problem.dimension,))).copy()
            step = s / substeps
            for _ in range(substeps):
                x = rk_step(GAUSS3, problem.oracle.field, x, step, settings)
            return x

        substeps = initial_substeps
        previous = integrate(substeps)
        for _ in range(max_halvings):
            substeps *= 2
            current = integrate(substeps)
            finite = np.isfinite(current) & np.isfinite(previous)
            change = float(np.max(np.abs(current - previous)[finite], initial=0.0))
            logger.debug(f"Reference flow with {substeps} substeps changed by {change:.3e}")
            if change < tolerance:
                result = current
                break
            previous = current
        else:
            raise ReferenceAccuracyError(
                f"Reference flow for {problem.name} did not reach {tolerance:g} after {max_halvings} halvings."
            )
    if strict and not np.all(np.isfinite(result)):
        raise FiniteTimeExplosionError(f"Reference flow for {problem.name} is not finite.")
    return result


# --- Registry ---

def _rigid_body(inertia=(0.345, 0.653, 1.0), x0=(0.8, 0.6, 0.0)):
    if len(inertia) != 3:
        raise ConfigError(f"Rigid body needs three moments of inertia, got {list(inertia)}.", key="inertia")
    return make_rigid_body(RigidBodyParams(*inertia), x0)


def _kubo(x0=(1.0, 0.0)):
    return make_kubo(x0)


def _fatigue(a=1.0, b=0.5, p=2.0, x0=0.5):
    if isinstance(x0, (list, tuple)):
        x0 = x0[0]
    return make_fatigue(a, b, p, x0)


PROBLEMS: Dict[str, Callable[..., Problem]] = {
    "rigid-body": _rigid_body,
    "kubo": _kubo,
    "fatigue": _fatigue,
}


def build_problem(name: str, **params) -> Problem:
    """Look up a problem by registry name; ``params`` with value None fall back to defaults."""
    if name not in PROBLEMS:
        raise ConfigError(f"Unknown problem '{name}'. Known problems: {', '.join(PROBLEMS)}.", key="problem.name")
    params = {key: value for key, value in params.items() if value is not None}
    factory = PROBLEMS[name]
    accepted = factory.__code__.co_varnames[: factory.__code__.co_argcount]
    unknown = sorted(set(params) - set(accepted))
    if unknown:
        raise ConfigError(f"Problem '{name}' does not take parameter(s): {', '.join(unknown)}.", key=f"problem.{unknown[0]}")
    return factory(**params)
