"""
Elementary differentials and truncated B-series.

Vector fields are described by a ``DerivativeOracle``: the field itself plus
multilinear derivative contractions f^(k)(x)(v_1, ..., v_k). States are numpy
arrays whose last axis is the dimension, so everything here works on batches.
"""
import logging
from abc import ABC, abstractmethod
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .exceptions import CapabilityError
from .trees import RootedTree, alpha, canonicalize, enumerate_trees, gamma, rho

logger = logging.getLogger(__name__)


class DerivativeOracle(ABC):
    """
    A vector field f with derivative contractions.

    ``max_order`` is the highest available derivative order; ``None`` means
    every order is available (derivatives past a polynomial degree are zero).
    """

    dimension: int
    max_order: Optional[int] = None

    @abstractmethod
    def field(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def derivative(self, x: np.ndarray, vectors: Sequence[np.ndarray]) -> np.ndarray:
        """f^(k)(x)(v_1, ..., v_k) with k = len(vectors) >= 1."""

    def contract(self, x: np.ndarray, vectors: Sequence[np.ndarray]) -> np.ndarray:
        if not vectors:
            return self.field(x)
        if self.max_order is not None and len(vectors) > self.max_order:
            raise CapabilityError(
                f"Derivative of order {len(vectors)} requested, oracle provides up to {self.max_order}."
            )
        return self.derivative(x, vectors)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.field(x)


class FiniteDifferenceOracle(DerivativeOracle):
    """
    Central finite differences of a plain field, for validating analytic oracles in tests.

    Higher derivatives nest the first-order stencil, so accuracy degrades with k.
    """

    def __init__(self, field: Callable[[np.ndarray], np.ndarray], dimension: int, max_order: int = 2):
        self._field = field
        self.dimension = dimension
        self.max_order = max_order

    def field(self, x):
        return np.asarray(self._field(np.asarray(x, dtype=float)), dtype=float)

    def derivative(self, x, vectors):
        x = np.asarray(x, dtype=float)
        *head, direction = [np.asarray(v, dtype=float) for v in vectors]
        size = np.max(np.abs(direction))
        if size == 0.0:
            return np.zeros_like(x)
        step = np.cbrt(np.finfo(float).eps) * (1.0 + np.max(np.abs(x))) / size
        forward = self.contract(x + step * direction, head)
        backward = self.contract(x - step * direction, head)
        return (forward - backward) / (2.0 * step)


class WeightFunction:
    """Tree -> real coefficient of a B-series; the empty tree always weighs 1."""

    def __init__(self, weight: Callable[[RootedTree], float]):
        self._weight = weight

    def __call__(self, tree: RootedTree) -> float:
        if tree.empty:
            return 1.0
        return self._weight(tree)


def elementary_differential(
    tree: RootedTree,
    oracle: DerivativeOracle,
    x: np.ndarray,
    memo: Optional[Dict[RootedTree, np.ndarray]] = None,
) -> np.ndarray:
    """
    F(tree)(x): F(empty) = x, F(leaf) = f(x), F([t_1..t_k]) = f^(k)(x)(F(t_1), .., F(t_k)).

    ``memo`` caches subtree values for one evaluation point.
    """
    tree = canonicalize(tree)
    if memo is None:
        memo = {}
    if tree in memo:
        return memo[tree]
    if tree.empty:
        value = np.asarray(x, dtype=float)
    else:
        k = len(tree.children)
        if oracle.max_order is not None and k > oracle.max_order:
            raise CapabilityError(
                f"Tree {tree} needs derivative order {k}, oracle provides up to {oracle.max_order}."
            )
        arguments = [elementary_differential(child, oracle, x, memo) for child in tree.children]
        value = oracle.contract(x, arguments)
    memo[tree] = value
    return value


def exact_weight(tree: RootedTree, delta_mu: float) -> float:
    """Exact-flow weight delta_mu**rho / gamma."""
    if tree.empty:
        return 1.0
    return delta_mu ** rho(tree) / gamma(tree)


def exact_weights(delta_mu: float) -> WeightFunction:
    return WeightFunction(lambda tree: exact_weight(tree, delta_mu))


def evaluate_bseries(
    weights: WeightFunction,
    oracle: DerivativeOracle,
    x: np.ndarray,
    n_max: int,
) -> np.ndarray:
    """Sum of alpha * weight * F over all trees with rho <= n_max, the empty tree included."""
    x = np.asarray(x, dtype=float)
    total = x.copy()
    memo: Dict[RootedTree, np.ndarray] = {}
    for tree in enumerate_trees(n_max):
        coefficient = float(alpha(tree)) * weights(tree)
        if coefficient == 0.0:
            continue
        total = total + coefficient * elementary_differential(tree, oracle, x, memo)
    return total
