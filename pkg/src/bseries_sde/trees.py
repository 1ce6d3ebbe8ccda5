"""
Rooted trees and their combinatorial coefficients.

A tree is the root plus an unordered collection of subtrees. The canonical
representative keeps its children sorted by descending ``sort_key`` so that
isomorphic trees compare and hash equal.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial
from typing import Dict, Iterator, List, Tuple, Union

from .exceptions import ConfigError, SizeLimitError

logger = logging.getLogger(__name__)

MAX_TREE_ORDER = 10


@dataclass(frozen=True)
class RootedTree:
    children: Tuple["RootedTree", ...] = ()
    empty: bool = False

    def __post_init__(self):
        if self.empty and self.children:
            raise ValueError("The empty tree has no children.")

    def __str__(self) -> str:
        if self.empty:
            return "∅"
        if not self.children:
            return "."
        return "[" + ",".join(str(child) for child in self.children) + "]"

    def __repr__(self) -> str:
        return f"RootedTree({self})"

    @classmethod
    def from_string(cls, text: str) -> "RootedTree":
        """Parse the nested-bracket notation, e.g. ``"[[.],.]"``. The result keeps the given child order."""
        text = text.replace(" ", "")
        if text in ("∅", ""):
            return EMPTY_TREE
        tree, position = _parse(text, 0)
        if position != len(text):
            raise ConfigError(f"Trailing characters in tree notation: {text!r}")
        return tree


EMPTY_TREE = RootedTree(empty=True)
LEAF = RootedTree()


def _parse(text: str, position: int) -> Tuple[RootedTree, int]:
    if position >= len(text):
        raise ConfigError(f"Unexpected end of tree notation: {text!r}")
    if text[position] == ".":
        return LEAF, position + 1
    if text[position] != "[":
        raise ConfigError(f"Unexpected character {text[position]!r} in tree notation: {text!r}")
    position += 1
    children = []
    while True:
        child, position = _parse(text, position)
        children.append(child)
        if position >= len(text):
            raise ConfigError(f"Unbalanced brackets in tree notation: {text!r}")
        if text[position] == ",":
            position += 1
            continue
        if text[position] == "]":
            return RootedTree(children=tuple(children)), position + 1
        raise ConfigError(f"Unexpected character {text[position]!r} in tree notation: {text!r}")


@lru_cache(maxsize=None)
def sort_key(tree: RootedTree) -> tuple:
    """Total order on canonical trees: node count first, then the child lists."""
    if tree.empty:
        return (0, ())
    keys = sorted((sort_key(child) for child in tree.children), reverse=True)
    return (rho(tree), tuple(keys))


@lru_cache(maxsize=None)
def canonicalize(tree: RootedTree) -> RootedTree:
    if tree.empty or not tree.children:
        return tree
    children = sorted((canonicalize(child) for child in tree.children), key=sort_key, reverse=True)
    return RootedTree(children=tuple(children))


@lru_cache(maxsize=None)
def rho(tree: RootedTree) -> int:
    if tree.empty:
        return 0
    return 1 + sum(rho(child) for child in tree.children)


@lru_cache(maxsize=None)
def alpha(tree: RootedTree) -> Fraction:
    tree = canonicalize(tree)
    if tree.empty or not tree.children:
        return Fraction(1)
    multiplicities: Dict[RootedTree, int] = {}
    for child in tree.children:
        multiplicities[child] = multiplicities.get(child, 0) + 1
    value = Fraction(1)
    for count in multiplicities.values():
        value /= factorial(count)
    for child in tree.children:
        value *= alpha(child)
    return value


@lru_cache(maxsize=None)
def gamma(tree: RootedTree) -> int:
    if tree.empty or not tree.children:
        return 1
    value = rho(tree)
    for child in tree.children:
        value *= gamma(child)
    return value


@dataclass(frozen=True)
class TreeStats:
    order: int
    alpha: Fraction
    gamma: int


def tree_stats(tree: RootedTree) -> TreeStats:
    return TreeStats(order=rho(tree), alpha=alpha(tree), gamma=gamma(tree))


def _forests(pool: List[RootedTree], remaining: int, max_index: int) -> Iterator[Tuple[RootedTree, ...]]:
    # Non-increasing pool indices yield each multiset once, already in canonical order.
    if remaining == 0:
        yield ()
        return
    for index in range(max_index, -1, -1):
        subtree = pool[index]
        order = rho(subtree)
        if order > remaining:
            continue
        for rest in _forests(pool, remaining - order, index):
            yield (subtree,) + rest


@lru_cache(maxsize=None)
def _trees_up_to(n_max: int) -> Tuple[Tuple[RootedTree, ...], ...]:
    by_order: List[Tuple[RootedTree, ...]] = [()]
    pool: List[RootedTree] = []
    for order in range(1, n_max + 1):
        trees = sorted(
            (RootedTree(children=forest) for forest in _forests(pool, order - 1, len(pool) - 1)),
            key=sort_key,
        )
        by_order.append(tuple(trees))
        pool = sorted(pool + trees, key=sort_key)
    return tuple(by_order)


def enumerate_trees(n_max: int, cap: int = MAX_TREE_ORDER) -> List[RootedTree]:
    """
    All canonical trees with 1 <= rho <= n_max, grouped by order.

    Raises:
        SizeLimitError: if ``n_max`` exceeds ``cap``.
    """
    if n_max < 0:
        raise ConfigError(f"Tree order must be nonnegative, got {n_max}.", key="max_order")
    if n_max > cap:
        raise SizeLimitError(f"Tree order {n_max} exceeds the enumeration cap {cap}.")
    by_order = _trees_up_to(n_max)
    trees = [tree for group in by_order for tree in group]
    logger.debug(f"Enumerated {len(trees)} trees up to order {n_max}")
    return trees


def trees_of_order(order: int, cap: int = MAX_TREE_ORDER) -> List[RootedTree]:
    return [tree for tree in enumerate_trees(order, cap) if rho(tree) == order]


def count_by_order(trees: List[RootedTree]) -> Dict[int, int]:
    counts: Dict[int, int] = {}
    for tree in trees:
        counts[rho(tree)] = counts.get(rho(tree), 0) + 1
    return counts


def format_alpha(value: Union[Fraction, int]) -> str:
    """``p/q``, or just ``p`` when the denominator is 1."""
    return str(Fraction(value))
