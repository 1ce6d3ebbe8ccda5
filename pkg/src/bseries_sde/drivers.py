"""
Random time increments dM = lam*h + sigma*(W(t+h) - W(t)).

Gaussian paths are sampled once on a fine grid and coarsened by summation so
that every step size sees the same Brownian path (common random numbers).
Weak studies may instead use discrete increments whose low moments match the
Gaussian ones.
"""
import logging
from dataclasses import dataclass
from math import comb, sqrt
from typing import List, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_FINE_STEP = 2.0 ** -14
DISCRETE_POINTS = (2, 3, 4)


@dataclass(frozen=True)
class DriverConfig:
    lam: int = 1
    sigma: float = 0.5
    seed: int = 0
    scheme: str = "gaussian"
    points: int = 3

    def __post_init__(self):
        if self.lam not in (0, 1):
            raise ConfigError(f"lam must be 0 or 1, got {self.lam}.", key="driver.lam")
        if self.scheme not in ("gaussian", "discrete"):
            raise ConfigError(f"Unknown driver scheme '{self.scheme}'.", key="driver.scheme")
        if self.scheme == "discrete" and self.points not in DISCRETE_POINTS:
            raise ConfigError(f"Discrete drivers support {DISCRETE_POINTS} points, got {self.points}.", key="driver.points")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"Seed must be a 64-bit unsigned integer, got {self.seed}.", key="driver.seed")


def substream(seed: int, sample_index: int) -> np.random.Generator:
    """Independent generator for one sample, derived from (seed, sample_index) only."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(sample_index,))))


def fine_step_count(T: float, fine_step: float = DEFAULT_FINE_STEP) -> int:
    count = T / fine_step
    if T <= 0.0 or abs(count - round(count)) > 1e-9 * max(count, 1.0):
        raise ConfigError(f"Horizon {T} is not a whole number of fine steps {fine_step}.", key="run.T")
    return int(round(count))


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
    """
    Sum consecutive blocks of ``factor`` fine increments along the last axis.

    Power-of-two factors sum pairwise level by level, so a block of 4 is
    bitwise the sum of its two blocks of 2.
    """
    n = increments.shape[-1]
    if factor < 1 or n % factor:
        raise ConfigError(f"Coarsening factor {factor} does not divide {n} fine steps.", key="run.step_sizes")
    if _is_power_of_two(factor):
        while factor > 1:
            increments = increments[..., 0::2] + increments[..., 1::2]
            factor //= 2
        return increments
    return increments.reshape(increments.shape[:-1] + (n // factor, factor)).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class DriverPath:
    """Fine Wiener increments over [0, horizon]; leading axes index samples."""
    horizon: float
    increments: np.ndarray
    lam: int
    sigma: float

    @property
    def n_fine(self) -> int:
        return self.increments.shape[-1]

    def wiener_increments(self, factor: int) -> np.ndarray:
        return coarsen(self.increments, factor)

    def step_size(self, factor: int) -> float:
        return self.horizon / (self.n_fine // factor)

    def time_increments(self, factor: int) -> np.ndarray:
        """All dM at one coarsening level, shape (..., n_fine // factor)."""
        return self.lam * self.step_size(factor) + self.sigma * self.wiener_increments(factor)

    def terminal_wiener(self) -> np.ndarray:
        if _is_power_of_two(self.n_fine):
            return coarsen(self.increments, self.n_fine)[..., 0]
        return self.increments.sum(axis=-1)

    def terminal_time(self) -> np.ndarray:
        """mu(T) = lam*T + sigma*W(T)."""
        return self.lam * self.horizon + self.sigma * self.terminal_wiener()


def sample_path(config: DriverConfig, T: float, n_fine: int, sample_index: int) -> DriverPath:
    if n_fine < 1 or T <= 0.0:
        raise ConfigError(f"Need T > 0 and at least one fine step, got T={T}, n_fine={n_fine}.")
    rng = substream(config.seed, sample_index)
    increments = rng.standard_normal(n_fine) * sqrt(T / n_fine)
    return DriverPath(horizon=T, increments=increments, lam=config.lam, sigma=config.sigma)


def sample_paths(config: DriverConfig, T: float, n_fine: int, sample_indices: Sequence[int]) -> DriverPath:
    """Stack of independent paths, one row per sample index."""
    rows = [sample_path(config, T, n_fine, index).increments for index in sample_indices]
    increments = np.stack(rows) if rows else np.zeros((0, n_fine))
    return DriverPath(horizon=T, increments=increments, lam=config.lam, sigma=config.sigma)


def increment(path: DriverPath, step_index: int, factor: int) -> np.ndarray:
    """dM over coarse step ``step_index`` at coarsening ``factor``."""
    steps = path.n_fine // factor if factor >= 1 and path.n_fine % factor == 0 else None
    if steps is None:
        raise ConfigError(f"Coarsening factor {factor} does not divide {path.n_fine} fine steps.", key="run.step_sizes")
    if not 0 <= step_index < steps:
        raise ConfigError(f"Step index {step_index} outside 0..{steps - 1}.")
    return path.time_increments(factor)[..., step_index]


def standard_support(k: int) -> Tuple[np.ndarray, np.ndarray]:
    """k-point Gauss-Hermite abscissae and probabilities for a standard normal."""
    if k not in DISCRETE_POINTS:
        raise ConfigError(f"Discrete drivers support {DISCRETE_POINTS} points, got {k}.", key="driver.points")
    nodes, weights = hermegauss(k)
    return nodes, weights / weights.sum()


def discrete_increment_support(k: int, h: float, lam: int, sigma: float) -> List[Tuple[float, float]]:
    """
    Values lam*h + sigma*sqrt(h)*xi_j with Gauss-Hermite probabilities.

    The first 2k-1 moments equal those of the Gaussian dM.
    """
    nodes, probabilities = standard_support(k)
    return [(lam * h + sigma * sqrt(h) * node, probability) for node, probability in zip(nodes, probabilities)]


def sample_discrete_increments(
    config: DriverConfig, h: float, n_steps: int, sample_indices: Sequence[int]
) -> np.ndarray:
    """Monte Carlo draws from the discrete support, shape (len(sample_indices), n_steps)."""
    nodes, probabilities = standard_support(config.points)
    rows = [substream(config.seed, index).choice(nodes, size=n_steps, p=probabilities) for index in sample_indices]
    xi = np.stack(rows) if rows else np.zeros((0, n_steps))
    return config.lam * h + config.sigma * sqrt(h) * xi


def normal_moment(order: int) -> int:
    """E[Z^order] for a standard normal: (order-1)!! for even order, 0 otherwise."""
    if order % 2:
        return 0
    value = 1
    for j in range(order - 1, 0, -2):
        value *= j
    return value


def gaussian_increment_moment(order: int, h: float, lam: int, sigma: float) -> float:
    """E[(lam*h + sigma*sqrt(h)*Z)^order] in closed form."""
    return sum(
        comb(order, j) * (lam * h) ** (order - j) * (sigma * sqrt(h)) ** j * normal_moment(j)
        for j in range(order + 1)
    )


def discrete_increment_moment(order: int, k: int, h: float, lam: int, sigma: float) -> float:
    return sum(probability * value ** order for value, probability in discrete_increment_support(k, h, lam, sigma))


# Separate stream family for closed-form-free weak targets, so they never
# share draws with the per-sample paths.
_TARGET_STREAM = 1


def sample_terminal_times(config: DriverConfig, T: float, sample_indices: Sequence[int]) -> np.ndarray:
    """Exact draws of mu(T) = lam*T + sigma*W(T), one per sample index."""
    draws = [
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(index, _TARGET_STREAM)))).standard_normal()
        for index in sample_indices
    ]
    return config.lam * T + config.sigma * sqrt(T) * np.asarray(draws, dtype=float)
