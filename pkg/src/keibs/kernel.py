"""Tensor Markov kernels ``k(x, x') = prod_j p_j(min(x_j, x'_j)) q_j(max(x_j, x'_j))``.

The Brownian-field kernel ``prod_j [theta_j + gamma_j min(x_j, x'_j)]`` and the
Laplace kernel ``exp(-sum_j theta_j |x_j - x'_j|)`` are both of this form.
Factors expose ``p`` and ``q`` directly because the sparse inverse formulas
in :mod:`keibs.fastinv` consume those values rather than kernel values.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InvalidArgumentError
from .grid import GridPoint, points_array

__all__ = [
    "MarkovFactor",
    "TensorMarkovKernel",
    "BrownianFieldParams",
    "bf_kernel",
    "laplace_kernel",
    "kernel_matrix",
]

PROBE_SIZE = 1024


@dataclass(frozen=True, eq=False)
class MarkovFactor:
    """One-dimensional factor ``k_j(x, x') = p(min) q(max)`` on the open interval (lower, upper)."""

    p: Callable[[np.ndarray], np.ndarray]
    q: Callable[[np.ndarray], np.ndarray]
    lower: float = -np.inf
    upper: float = np.inf
    name: str = "custom"

    def __post_init__(self):
        if not (self.lower <= 0.0 and self.upper >= 1.0):
            raise InvalidArgumentError(f"factor domain ({self.lower}, {self.upper}) must contain (0, 1)")
        probe = np.linspace(0.0, 1.0, PROBE_SIZE + 2)[1:-1]
        p, q = self.p(probe), self.q(probe)
        if not (np.all(p > 0) and np.all(q > 0)):
            raise InvalidArgumentError(f"{self.name}: p and q must be positive on (0, 1)")
        if not np.all(np.diff(p / q) > 0):
            raise InvalidArgumentError(f"{self.name}: p/q must be strictly increasing on (0, 1)")

    def pq(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        return self.p(x), self.q(x)

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.p(np.minimum(x, y)) * self.q(np.maximum(x, y))

    def check_domain(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.size and not (np.all(x > self.lower) and np.all(x < self.upper)):
            raise DomainError(f"{self.name}: points outside ({self.lower}, {self.upper})")


def _as_points(X) -> np.ndarray:
    if len(X) and isinstance(X[0], GridPoint):
        return points_array(X)
    return np.atleast_2d(np.asarray(X, dtype=float))


@dataclass(frozen=True, eq=False)
class TensorMarkovKernel:
    factors: tuple[MarkovFactor, ...]
    name: str = "tensor-markov"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise InvalidArgumentError("a kernel needs at least one factor")

    @property
    def dim(self) -> int:
        return len(self.factors)

    def check_domain(self, X: np.ndarray) -> None:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.dim:
            raise DomainError(f"expected {self.dim}-dimensional points, got {X.shape[-1]}")
        for j, f in enumerate(self.factors):
            f.check_domain(X[..., j])

    def __call__(self, x, y) -> np.ndarray:
        """Evaluate ``k(x, y)`` with broadcasting over leading axes."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self.check_domain(x)
        self.check_domain(y)
        out = np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]))
        for j, f in enumerate(self.factors):
            out = out * f(x[..., j], y[..., j])
        return out

    def matrix(self, X, Y=None) -> np.ndarray:
        """Cross kernel matrix ``k(X_i, Y_j)``."""
        X = _as_points(X)
        Y = X if Y is None else _as_points(Y)
        self.check_domain(X)
        self.check_domain(Y)
        out = np.ones((X.shape[0], Y.shape[0]))
        for j, f in enumerate(self.factors):
            out *= f(X[:, j, None], Y[None, :, j])
        return out

    def diag(self, X) -> np.ndarray:
        X = _as_points(X)
        self.check_domain(X)
        out = np.ones(X.shape[0])
        for j, f in enumerate(self.factors):
            p, q = f.pq(X[:, j])
            out *= p * q
        return out

    def scaled(self, c: float) -> "TensorMarkovKernel":
        """The kernel ``c * k``; the scale is absorbed into the first factor's ``p``."""
        if c <= 0:
            raise InvalidArgumentError("scale must be positive")
        f0 = self.factors[0]
        p0 = f0.p
        first = MarkovFactor(lambda x: c * p0(x), f0.q, f0.lower, f0.upper, f0.name)
        return TensorMarkovKernel((first,) + self.factors[1:], self.name)


@dataclass(frozen=True)
class BrownianFieldParams:
    theta: tuple[float, ...]
    gamma: tuple[float, ...]

    def __post_init__(self):
        theta = tuple(float(v) for v in np.atleast_1d(self.theta))
        gamma = tuple(float(v) for v in np.atleast_1d(self.gamma))
        if len(theta) != len(gamma):
            raise InvalidArgumentError("theta and gamma must have the same length")
        if min(theta) <= 0 or min(gamma) <= 0:
            raise InvalidArgumentError("Brownian-field parameters must be strictly positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def default(cls, d: int) -> "BrownianFieldParams":
        return cls((1.0,) * d, (1.0,) * d)


def _bf_factor(theta: float, gamma: float) -> MarkovFactor:
    return MarkovFactor(
        p=lambda x: theta + gamma * x,
        q=lambda x: np.ones_like(x),
        lower=-theta / gamma,
        upper=np.inf,
        name=f"bf(theta={theta}, gamma={gamma})",
    )


def bf_kernel(params: BrownianFieldParams | int) -> TensorMarkovKernel:
    """Brownian-field kernel; an integer argument means ``theta = gamma = 1`` in that dimension."""
    if isinstance(params, (int, np.integer)):
        params = BrownianFieldParams.default(int(params))
    factors = tuple(_bf_factor(t, g) for t, g in zip(params.theta, params.gamma))
    return TensorMarkovKernel(factors, name="brownian-field")


def laplace_kernel(theta: Sequence[float] | float, d: int | None = None) -> TensorMarkovKernel:
    """Laplace kernel ``exp(-sum_j theta_j |x_j - x'_j|)``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if d is not None and theta.size == 1:
        theta = np.repeat(theta, d)
    if np.any(theta <= 0):
        raise InvalidArgumentError("Laplace rates must be strictly positive")

    def factor(t):
        return MarkovFactor(lambda x: np.exp(t * x), lambda x: np.exp(-t * x), name=f"laplace(theta={t})")

    return TensorMarkovKernel(tuple(factor(float(t)) for t in theta), name="laplace")


def kernel_matrix(k: TensorMarkovKernel, points) -> np.ndarray:
    """Dense symmetric kernel matrix over ``points`` (GridPoints or an ``(n, d)`` array)."""
    K = k.matrix(points)
    return 0.5 * (K + K.T)
