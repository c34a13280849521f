"""Dyadic grids on the open unit cube: full grids, classical and truncated sparse grids.

A one-dimensional dyadic point ``i * 2**-l`` is stored canonically as the
pair ``(level, position)`` with an odd position, i.e. the level at which the
point first appears. Multi-dimensional points are tuples of such pairs, so
equality and hashing never touch floating point.

Point ordering is canonical throughout: ascending order ``|l| = sum(l)``,
then lexicographic level multi-index, then lexicographic position
multi-index. Full grids are vectorized with the last dimension varying
fastest.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "DyadicIndex",
    "LevelMultiIndex",
    "GridPoint",
    "TruncatedSparseGrid",
    "level_multi_indices",
    "rho",
    "classical_sg",
    "sg_size",
    "sg_increment",
    "canonical_tsg",
    "full_grid",
    "points_array",
]


@dataclass(frozen=True, order=True)
class DyadicIndex:
    """Canonical index of the dyadic rational ``position * 2**-level`` in (0, 1)."""

    level: int
    position: int

    def __post_init__(self):
        if self.level < 1:
            raise InvalidArgumentError(f"level must be >= 1, got {self.level}")
        if self.position % 2 != 1 or not 1 <= self.position <= 2**self.level - 1:
            raise InvalidArgumentError(
                f"position must be odd in [1, 2**level - 1], got {self.position} at level {self.level}"
            )

    def coordinate(self) -> float:
        return self.position / 2**self.level

    @classmethod
    def from_fraction(cls, numerator: int, level: int) -> "DyadicIndex":
        """Reduce ``numerator * 2**-level`` to its canonical (odd) representation."""
        if not 0 < numerator < 2**level:
            raise InvalidArgumentError(f"{numerator}/2**{level} is not inside (0, 1)")
        while numerator % 2 == 0:
            numerator //= 2
            level -= 1
        return cls(level, numerator)

    @classmethod
    def from_coordinate(cls, x: float, max_level: int = 52) -> "DyadicIndex":
        """Inverse of :meth:`coordinate`; raises if ``x`` is not dyadic up to ``max_level``."""
        scaled = x * 2**max_level
        numerator = int(scaled)
        if numerator != scaled:
            raise InvalidArgumentError(f"{x!r} is not a dyadic rational of level <= {max_level}")
        return cls.from_fraction(numerator, max_level)


@dataclass(frozen=True)
class LevelMultiIndex:
    levels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if not self.levels or min(self.levels) < 1:
            raise InvalidArgumentError(f"level multi-index entries must be >= 1, got {self.levels}")

    @property
    def dim(self) -> int:
        return len(self.levels)

    def order(self) -> int:
        return sum(self.levels)


@dataclass(frozen=True)
class GridPoint:
    """A point of (0, 1)^d addressed by its per-dimension dyadic indices."""

    dyadic: tuple[DyadicIndex, ...]
    coords: tuple[float, ...] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(ix.coordinate() for ix in self.dyadic))

    @classmethod
    def from_indices(cls, levels: Sequence[int], positions: Sequence[int]) -> "GridPoint":
        """Build from a level/position pair per dimension; positions need not be odd."""
        return cls(tuple(DyadicIndex.from_fraction(i, l) for l, i in zip(levels, positions)))

    @classmethod
    def from_coords(cls, coords: Sequence[float]) -> "GridPoint":
        return cls(tuple(DyadicIndex.from_coordinate(float(c)) for c in coords))

    @property
    def dim(self) -> int:
        return len(self.dyadic)

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(ix.level for ix in self.dyadic)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(ix.position for ix in self.dyadic)

    def order(self) -> int:
        """``|l|`` of the hierarchical increment this point belongs to."""
        return sum(self.levels)


def points_array(points: Sequence[GridPoint]) -> np.ndarray:
    """Stack point coordinates into an ``(n, d)`` float array."""
    if len(points) == 0:
        return np.empty((0, 0))
    return np.array([p.coords for p in points], dtype=float)


def _check_d_tau(d: int, tau: int) -> None:
    if d < 1:
        raise InvalidArgumentError(f"dimension must be >= 1, got {d}")
    if tau < 1:
        raise InvalidArgumentError(f"level must be >= 1, got {tau}")


def level_multi_indices(d: int, order: int) -> Iterator[tuple[int, ...]]:
    """All ``l`` in N^d with every ``l_j >= 1`` and ``sum(l) == order``, lexicographically."""
    if d == 1:
        if order >= 1:
            yield (order,)
        return
    for first in range(1, order - d + 2):
        for rest in level_multi_indices(d - 1, order - first):
            yield (first,) + rest


def rho(levels: LevelMultiIndex | Sequence[int]) -> list[tuple[int, ...]]:
    """Odd position multi-indices of a hierarchical increment, lexicographically ordered."""
    if not isinstance(levels, LevelMultiIndex):
        levels = LevelMultiIndex(tuple(levels))
    return list(itertools.product(*(range(1, 2**l, 2) for l in levels.levels)))


def _increment_points(d: int, order: int) -> list[GridPoint]:
    out = []
    for levels in level_multi_indices(d, order):
        for positions in rho(levels):
            out.append(GridPoint(tuple(DyadicIndex(l, i) for l, i in zip(levels, positions))))
    return out


@lru_cache(maxsize=64)
def _classical_sg_cached(d: int, tau: int) -> tuple[GridPoint, ...]:
    pts: list[GridPoint] = []
    for order in range(d, tau + d):
        pts.extend(_increment_points(d, order))
    return tuple(pts)


def classical_sg(d: int, tau: int) -> list[GridPoint]:
    """Classical sparse grid of level ``tau`` in canonical order."""
    _check_d_tau(d, tau)
    return list(_classical_sg_cached(d, tau))


def sg_size(d: int, tau: int) -> int:
    """Exact size of the level-``tau`` classical sparse grid in ``d`` dimensions.

    Python integers are unbounded, so no overflow can occur.
    """
    _check_d_tau(d, tau)
    return sum(2**l * comb(d - 1 + l, d - 1) for l in range(tau))


def sg_increment(d: int, tau: int) -> list[GridPoint]:
    """Points of the level-``tau + 1`` grid that are not in the level-``tau`` grid.

    These are exactly the points whose level multi-index has ``|l| = tau + d``.
    """
    _check_d_tau(d, tau)
    return _increment_points(d, tau + d)


def full_grid(levels: Sequence[int]) -> list[GridPoint]:
    """Full grid ``X_{1,l_1} x ... x X_{d,l_d}``, last dimension fastest."""
    levels = LevelMultiIndex(tuple(levels)).levels
    return [
        GridPoint.from_indices(levels, positions)
        for positions in itertools.product(*(range(1, 2**l) for l in levels))
    ]


@dataclass(frozen=True)
class TruncatedSparseGrid:
    """A complete level-``base_level`` sparse grid plus part of the next increment.

    ``points`` lists the base grid (canonical order) followed by the augment
    points in the order they were added.
    """

    dim: int
    base_level: int
    base: tuple[GridPoint, ...]
    augment: tuple[GridPoint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(self.base))
        object.__setattr__(self, "augment", tuple(self.augment))
        if len(self.base) != sg_size(self.dim, self.base_level):
            raise InvalidArgumentError(
                f"base has {len(self.base)} points, expected {sg_size(self.dim, self.base_level)}"
            )
        target = self.base_level + self.dim
        for p in self.augment:
            if p.dim != self.dim or p.order() != target:
                raise InvalidArgumentError(f"augment point {p.coords} is not in the level-{self.base_level + 1} increment")
        if len(set(self.augment)) != len(self.augment):
            raise InvalidArgumentError("augment contains duplicate points")

    @classmethod
    def from_level(cls, d: int, tau: int, augment: Sequence[GridPoint] = ()) -> "TruncatedSparseGrid":
        return cls(d, tau, tuple(classical_sg(d, tau)), tuple(augment))

    @property
    def points(self) -> tuple[GridPoint, ...]:
        return self.base + self.augment

    @property
    def size(self) -> int:
        return len(self.base) + len(self.augment)

    def __len__(self) -> int:
        return self.size

    def with_augment(self, point: GridPoint) -> "TruncatedSparseGrid":
        return TruncatedSparseGrid(self.dim, self.base_level, self.base, self.augment + (point,))

    def coords(self) -> np.ndarray:
        return points_array(self.points)


def canonical_tsg(d: int, n: int) -> TruncatedSparseGrid:
    """TSG of size ``n`` whose augment is the canonical prefix of the next increment."""
    if n < 1:
        raise InvalidArgumentError(f"size must be >= 1, got {n}")
    tau = 1
    while sg_size(d, tau + 1) <= n:
        tau += 1
    extra = n - sg_size(d, tau)
    augment = sg_increment(d, tau)[:extra] if extra else []
    return TruncatedSparseGrid.from_level(d, tau, augment)
