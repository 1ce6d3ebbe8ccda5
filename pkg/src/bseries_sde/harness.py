"""
Convergence experiments for random-step B-series methods.

Mean-square errors are measured at the horizon against a per-path reference;
weak errors compare expectations of observables with closed-form targets or a
large flow-oracle Monte Carlo. Samples are processed in fixed-size chunks in
sample-index order, so results do not depend on the thread count.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import sqrt
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .drivers import (
    DriverConfig,
    DriverPath,
    discrete_increment_support,
    fine_step_count,
    sample_discrete_increments,
    sample_paths,
    sample_terminal_times,
)
from .exceptions import (
    BSeriesSDEError,
    CapabilityError,
    ConfigError,
    InsufficientDataError,
    InvalidSampleError,
    NonConvergenceError,
    SizeLimitError,
)
from .methods import MethodSpec, SolverSettings, resolve_method
from .problems import Problem, build_problem, exact_flow_reference
from .schemas import ConvergenceReport, ConvergenceRow, ExperimentConfig, OrderFit

logger = logging.getLogger(__name__)

Array = np.ndarray

CHUNK_SIZE = 50
TARGET_CHUNK_SIZE = 1000
DEFAULT_ENUMERATION_CAP = 2_000_000
PROBABILITY_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class Experiment:
    """A validated config resolved into problem, driver and steppers."""
    config: ExperimentConfig
    problem: Problem
    driver: DriverConfig
    methods: Dict[str, MethodSpec]
    reference_method: Optional[MethodSpec]

    def fine_factor(self, h: float) -> int:
        return int(round(h / self.config.driver.fine_step))


def build_experiment(config: ExperimentConfig, partial: bool = True) -> Experiment:
    """
    Resolve problem, driver and methods from a config.

    With ``partial`` the implicit solvers mark non-converged rows as NaN so a
    single bad sample is counted as invalid instead of aborting the batch.
    """
    run = config.run
    problem = build_problem(config.problem.name, **config.problem.params())
    lam, sigma = config.driver.lam, config.driver.sigma
    if problem.driver_override is not None:
        lam, sigma = problem.driver_override
        if (lam, sigma) != (config.driver.lam, config.driver.sigma):
            logger.info(f"Problem {problem.name} rescales the driver to lam={lam}, sigma={sigma:g}")
    driver = DriverConfig(
        lam=int(lam), sigma=float(sigma), seed=config.driver.seed,
        scheme=config.driver.scheme, points=config.driver.points,
    )
    settings = SolverSettings(tolerance=run.solver_tol, max_iter=run.solver_max_iter, partial=partial)
    methods = {}
    for name in config.methods.names:
        resolved = name
        if config.problem.cutoff and not name.endswith(".cutoff"):
            resolved = f"{name}.cutoff"
        methods[name] = resolve_method(
            resolved, run.quadrature_points, settings, cutoff_invariant=config.problem.cutoff_invariant
        )
    reference_method = None
    if run.reference == "scheme":
        reference_method = resolve_method(run.reference_method, run.quadrature_points, settings)
    return Experiment(config=config, problem=problem, driver=driver, methods=methods, reference_method=reference_method)


def resolve_observables(problem: Problem, names: Sequence[str]) -> Dict[str, Callable[[Array], Array]]:
    unknown = [name for name in names if name not in problem.observables]
    if unknown:
        raise ConfigError(
            f"Problem {problem.name} has no observable(s) {', '.join(unknown)}. "
            f"Available: {', '.join(problem.observables)}.",
            key="run.observables",
        )
    return {name: problem.observables[name] for name in names}


# --- Integration ---

def integrate(method: MethodSpec, problem: Problem, x0: Array, increments: Array) -> Array:
    """Terminal state after stepping through ``increments`` (..., n_steps)."""
    increments = np.asarray(increments, dtype=float)
    x = np.broadcast_to(np.asarray(x0, dtype=float), increments.shape[:-1] + (problem.dimension,)).copy()
    for k in range(increments.shape[-1]):
        x = method.step(problem, x, increments[..., k])
    return x


def integrate_path(method: MethodSpec, problem: Problem, x0: Array, increments: Sequence[float]) -> Array:
    """
    States Y_0..Y_n along one path, shape (n + 1, d).

    Solver failures abort with the failing step index.
    """
    x = np.asarray(x0, dtype=float)
    states = [x]
    for k, delta_mu in enumerate(increments):
        try:
            x = method.step(problem, x, float(delta_mu))
        except NonConvergenceError as err:
            raise NonConvergenceError(
                f"{method.name} failed at step {k + 1} (dM={delta_mu:.3e}): {err}",
                step_size=err.step_size,
                iterations=err.iterations,
            ) from err
        states.append(x)
    return np.stack(states)


def reference_states(experiment: Experiment, paths: DriverPath) -> Array:
    """Per-path reference X(T): the flow at mu(T), or a fine scheme on the same path."""
    problem = experiment.problem
    run = experiment.config.run
    if experiment.reference_method is not None:
        factor = experiment.fine_factor(run.reference_step)
        return integrate(experiment.reference_method, problem, problem.x0, paths.time_increments(factor))
    x0 = np.broadcast_to(problem.x0, paths.increments.shape[:-1] + (problem.dimension,))
    return exact_flow_reference(problem, x0, paths.terminal_time())


def _chunks(count: int, size: int) -> List[range]:
    return [range(start, min(start + size, count)) for start in range(0, count, size)]


def _map_chunks(function, chunks: List[range], threads: int) -> list:
    # pool.map keeps chunk order, so reductions see samples in index order
    if threads <= 1 or len(chunks) <= 1:
        return [function(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(function, chunks))


def _terminal_states(experiment: Experiment, indices: range, steps: List[float], with_reference: bool):
    """Terminal states for every method and step size on the samples ``indices``."""
    run, driver, problem = experiment.config.run, experiment.driver, experiment.problem
    reference = None
    if driver.scheme == "gaussian":
        paths = sample_paths(driver, run.T, fine_step_count(run.T, experiment.config.driver.fine_step), indices)
        increments = [paths.time_increments(experiment.fine_factor(h)) for h in steps]
        if with_reference:
            reference = reference_states(experiment, paths)
    else:
        if with_reference:
            raise ConfigError("Mean-square runs need a Gaussian driver.", key="driver.scheme")
        increments = [sample_discrete_increments(driver, h, int(round(run.T / h)), indices) for h in steps]
    states = {
        name: [integrate(method, problem, problem.x0, dm) for dm in increments]
        for name, method in experiment.methods.items()
    }
    return reference, states


def _check_invalid(invalid: int, total: int, limit: float, label: str) -> None:
    if invalid > limit * total:
        raise InvalidSampleError(
            f"{label}: {invalid} of {total} samples invalid, more than the allowed fraction {limit:g}."
        )
    if invalid:
        logger.warning(f"{label}: {invalid} of {total} samples invalid and excluded")


def mean_square_error(squared: Array) -> Tuple[float, float]:
    """
    sqrt(mean ||Y - X||^2) and its standard error.

    The standard error follows from the sample variance of the squared errors
    through the delta method: se(sqrt(m)) = se(m) / (2 sqrt(m)).
    """
    squared = np.asarray(squared, dtype=float)
    n = squared.size
    mean = float(np.mean(squared))
    error = sqrt(mean)
    if n < 2:
        return error, float("nan")
    spread = float(np.std(squared, ddof=1)) / sqrt(n)
    return error, (spread / (2.0 * error) if error > 0.0 else 0.0)


# --- Order fits ---

class LineFit(NamedTuple):
    slope: float
    intercept: float
    residual: float


def fit_order(step_sizes: Sequence[float], errors: Sequence[float]) -> LineFit:
    """Least-squares line through (log h, log error); residual is the RMS misfit in log space."""
    h = np.asarray(step_sizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    usable = np.isfinite(h) & np.isfinite(e) & (h > 0.0) & (e > 0.0)
    if usable.sum() < 3:
        raise InsufficientDataError(f"Need at least 3 positive finite (h, error) pairs, got {int(usable.sum())}.")
    log_h, log_e = np.log(h[usable]), np.log(e[usable])
    slope, intercept = np.polyfit(log_h, log_e, 1)
    residual = sqrt(float(np.mean((log_e - (slope * log_h + intercept)) ** 2)))
    return LineFit(float(slope), float(intercept), residual)


def _fit_rows(rows: List[ConvergenceRow], family: str, error_of) -> List[OrderFit]:
    fits = []
    for method in dict.fromkeys(row.method for row in rows):
        selected = [row for row in rows if row.method == method]
        h = [row.h for row in selected]
        errors = [error_of(row) for row in selected]
        try:
            line = fit_order(h, errors)
        except InsufficientDataError as err:
            logger.warning(f"No {family} slope for {method}: {err}")
            continue
        logger.info(f"{method} {family}: slope {line.slope:.3f} (residual {line.residual:.3f})")
        fits.append(OrderFit(
            method=method, family=family, slope=line.slope, intercept=line.intercept,
            residual=line.residual, points=len(selected),
        ))
    return fits


def check_acceptance(report: ConvergenceReport, bands: Dict[str, Tuple[float, float]]) -> List[str]:
    """Messages for every method whose fitted slope leaves its band; empty when all pass."""
    violations = []
    for method, (low, high) in bands.items():
        fits = [fit for fit in report.fits if fit.method == method]
        if not fits:
            violations.append(f"{method}: no fitted slope for band [{low}, {high}]")
        for fit in fits:
            if not low <= fit.slope <= high:
                violations.append(f"{method} {fit.family}: slope {fit.slope:.3f} outside [{low}, {high}]")
    return violations


# --- Mean-square convergence ---

def run_ms_convergence(config: ExperimentConfig, threads: int = 1) -> ConvergenceReport:
    run = config.run
    experiment = build_experiment(config)
    steps = run.step_ladder()
    chunks = _chunks(run.samples, CHUNK_SIZE)
    logger.info(
        f"Mean-square run: {experiment.problem.name}, {len(experiment.methods)} method(s), "
        f"{len(steps)} step sizes, {run.samples} samples, reference={run.reference}"
    )

    def squared_errors(indices):
        reference, states = _terminal_states(experiment, indices, steps, with_reference=True)
        return {
            name: [np.sum((terminal - reference) ** 2, axis=-1) for terminal in per_step]
            for name, per_step in states.items()
        }

    results = _map_chunks(squared_errors, chunks, threads)
    rows = []
    for name in experiment.methods:
        for level, h in enumerate(steps):
            squared = np.concatenate([chunk[name][level] for chunk in results])
            valid = np.isfinite(squared)
            invalid = int((~valid).sum())
            _check_invalid(invalid, squared.size, run.invalid_fraction, f"{name} at h={h:g}")
            error, stderr = mean_square_error(squared[valid])
            logger.info(f"{name} h={h:g}: ms error {error:.6e} +/- {stderr:.2e} ({invalid} invalid)")
            rows.append(ConvergenceRow(
                method=name, h=h, samples=int(squared.size), invalid=invalid, ms_error=error, ms_stderr=stderr,
            ))
    return ConvergenceReport(mode="ms", rows=rows, fits=_fit_rows(rows, "ms", lambda row: row.ms_error))


# --- Weak convergence ---

def weak_targets(experiment: Experiment, observables: Dict[str, Callable], threads: int = 1) -> Dict[str, Tuple[float, float]]:
    """
    E[g(X(T))] with its standard error for each observable.

    Closed forms are exact (standard error 0); the rest share one flow-oracle
    Monte Carlo over exactly drawn mu(T).
    """
    problem, driver, run = experiment.problem, experiment.driver, experiment.config.run
    targets = {
        name: (float(problem.weak_targets[name](driver.lam, driver.sigma, run.T)), 0.0)
        for name in observables if name in problem.weak_targets
    }
    missing = [name for name in observables if name not in targets]
    if not missing:
        return targets
    logger.info(f"Monte Carlo target for {', '.join(missing)} with {run.target_samples} flow samples")

    def flow_states(indices):
        times = sample_terminal_times(driver, run.T, indices)
        x0 = np.broadcast_to(problem.x0, times.shape + (problem.dimension,))
        return exact_flow_reference(problem, x0, times)

    states = np.concatenate(_map_chunks(flow_states, _chunks(run.target_samples, TARGET_CHUNK_SIZE), threads))
    valid = np.all(np.isfinite(states), axis=-1)
    _check_invalid(int((~valid).sum()), valid.size, run.invalid_fraction, "flow target")
    for name in missing:
        values = observables[name](states[valid])
        targets[name] = (float(np.mean(values)), float(np.std(values, ddof=1)) / sqrt(values.size))
    return targets


def run_weak_convergence(config: ExperimentConfig, threads: int = 1) -> ConvergenceReport:
    run = config.run
    experiment = build_experiment(config)
    observables = resolve_observables(experiment.problem, run.observables)
    targets = weak_targets(experiment, observables, threads)
    for name, (value, stderr) in targets.items():
        logger.info(f"Target E[{name}] = {value:.12g} +/- {stderr:.2e}")
    if run.weak_estimator == "enumeration":
        rows = _weak_rows_enumerated(experiment, observables, targets)
    else:
        rows = _weak_rows_sampled(experiment, observables, targets, threads)
    fits = []
    for name in observables:
        fits.extend(_fit_rows([row for row in rows if row.weak_obs == name], name, lambda row: row.weak_error))
    return ConvergenceReport(mode="weak", rows=rows, fits=fits)


def _weak_rows_sampled(experiment, observables, targets, threads) -> List[ConvergenceRow]:
    run = experiment.config.run
    steps = run.step_ladder()
    results = _map_chunks(
        lambda indices: _terminal_states(experiment, indices, steps, with_reference=False)[1],
        _chunks(run.samples, CHUNK_SIZE),
        threads,
    )
    rows = []
    for method in experiment.methods:
        for level, h in enumerate(steps):
            states = np.concatenate([chunk[method][level] for chunk in results])
            valid = np.all(np.isfinite(states), axis=-1)
            invalid = int((~valid).sum())
            _check_invalid(invalid, valid.size, run.invalid_fraction, f"{method} at h={h:g}")
            for name, g in observables.items():
                values = g(states[valid])
                estimate = float(np.mean(values))
                target, target_stderr = targets[name]
                stderr = sqrt(float(np.var(values, ddof=1)) / values.size + target_stderr ** 2)
                error = abs(estimate - target)
                logger.info(f"{method} h={h:g} {name}: weak error {error:.6e} +/- {stderr:.2e} ({invalid} invalid)")
                rows.append(ConvergenceRow(
                    method=method, h=h, samples=int(valid.size), invalid=invalid,
                    weak_obs=name, weak_error=error, weak_stderr=stderr,
                ))
    return rows


def _weak_rows_enumerated(experiment, observables, targets) -> List[ConvergenceRow]:
    run, driver = experiment.config.run, experiment.driver
    rows = []
    for method_name, method in experiment.methods.items():
        for n_steps in run.steps:
            h = run.T / n_steps
            support = discrete_increment_support(driver.points, h, driver.lam, driver.sigma)
            distribution = enumerate_discrete_distribution(
                method, experiment.problem, support, n_steps, cap=run.enumeration_cap
            )
            invalid_mass = distribution.invalid_mass
            if invalid_mass > run.invalid_fraction:
                raise InvalidSampleError(
                    f"{method_name} with {n_steps} steps: probability {invalid_mass:.3g} on invalid outcomes."
                )
            for name, g in observables.items():
                target, target_stderr = targets[name]
                error = abs(distribution.expectation(g) - target)
                logger.info(f"{method_name} n={n_steps} {name}: weak error {error:.6e} (exact enumeration)")
                rows.append(ConvergenceRow(
                    method=method_name, h=h, samples=distribution.size, invalid=distribution.invalid_count,
                    weak_obs=name, weak_error=error, weak_stderr=target_stderr,
                ))
    return rows


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Leaves of the increment tree: terminal states and their probabilities."""
    states: Array
    probabilities: Array

    @property
    def size(self) -> int:
        return int(self.probabilities.size)

    @property
    def _finite(self) -> Array:
        return np.all(np.isfinite(self.states), axis=-1)

    @property
    def invalid_count(self) -> int:
        return int((~self._finite).sum())

    @property
    def invalid_mass(self) -> float:
        return float(self.probabilities[~self._finite].sum())

    def expectation(self, g: Callable[[Array], Array]) -> float:
        """Exact E[g(Y)] over the finite leaves, renormalized by their mass."""
        finite = self._finite
        weights = self.probabilities[finite]
        return float(np.sum(weights * g(self.states[finite])) / np.sum(weights))


def merge_support(support: Sequence[Tuple[float, float]]) -> Tuple[Array, Array]:
    """Combine equal increment values, summing their probabilities."""
    values = np.array([value for value, _ in support], dtype=float)
    probabilities = np.array([probability for _, probability in support], dtype=float)
    unique, inverse = np.unique(values, return_inverse=True)
    return unique, np.bincount(inverse.ravel(), weights=probabilities, minlength=unique.size)


def enumerate_discrete_distribution(
    method: MethodSpec,
    problem: Problem,
    support: Sequence[Tuple[float, float]],
    n_steps: int,
    cap: int = DEFAULT_ENUMERATION_CAP,
    x0: Optional[Array] = None,
) -> DiscreteDistribution:
    """
    Every sequence of ``n_steps`` increments drawn from ``support``, pushed through ``method``.

    Leaf ``i`` follows the increments given by the base-k digits of ``i``.
    """
    if n_steps < 0:
        raise ConfigError(f"Number of steps must be non-negative, got {n_steps}.", key="run.steps")
    values, probabilities = merge_support(support)
    k = values.size
    if k ** n_steps > cap:
        raise SizeLimitError(
            f"{k}^{n_steps} = {k ** n_steps} outcomes exceed the enumeration cap {cap}; "
            "use fewer steps or weak_estimator: monte-carlo."
        )
    x0 = problem.x0 if x0 is None else x0
    states = np.asarray(x0, dtype=float).reshape(1, problem.dimension)
    weights = np.ones(1)
    for _ in range(n_steps):
        states = method.step(problem, np.repeat(states, k, axis=0), np.tile(values, weights.size))
        weights = np.repeat(weights, k) * np.tile(probabilities, weights.size)
    total = float(weights.sum())
    if abs(total - 1.0) > PROBABILITY_TOLERANCE:
        raise BSeriesSDEError(f"Enumerated probabilities sum to {total!r}, not 1.")
    return DiscreteDistribution(states=states, probabilities=weights)


# --- Invariant drift ---

def run_invariant_drift(config: ExperimentConfig) -> pd.DataFrame:
    """Deviation of every problem invariant from its initial value along one sampled path."""
    run = config.run
    steps = run.step_ladder()
    if len(config.methods.names) != 1:
        raise ConfigError("Invariant drift runs take exactly one method.", key="methods.names")
    if len(steps) != 1:
        raise ConfigError("Invariant drift runs take exactly one step size.", key="run.step_sizes")
    experiment = build_experiment(config, partial=False)
    problem, driver = experiment.problem, experiment.driver
    if not problem.invariants:
        raise CapabilityError(f"Problem {problem.name} has no invariants to track.")
    (name, method), = experiment.methods.items()
    h = steps[0]
    n_steps = int(round(run.T / h))
    if driver.scheme == "gaussian":
        path = sample_paths(driver, run.T, fine_step_count(run.T, config.driver.fine_step), [0])
        increments = path.time_increments(experiment.fine_factor(h))[0]
    else:
        increments = sample_discrete_increments(driver, h, n_steps, [0])[0]

    states = integrate_path(method, problem, problem.x0, increments)
    frame = pd.DataFrame({"t": h * np.arange(n_steps + 1)})
    for invariant_name, invariant in problem.invariants.items():
        levels = invariant(states)
        frame[f"d{invariant_name}"] = levels - levels[0]
        logger.info(f"{name} h={h:g}: max |d{invariant_name}| = {np.max(np.abs(frame[f'd{invariant_name}'])):.3e}")
    return frame
