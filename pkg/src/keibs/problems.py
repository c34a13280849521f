"""Benchmark objectives, noise models and the tandem production-line simulator.

Objectives live in a user-space box and are evaluated there; the optimizer
sees them through an affine map onto the open unit cube. Problems that are
naturally minimized are exposed to the (maximizing) optimizer with their sign
flipped; ``Objective.eval`` always returns the raw value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InvalidArgumentError

__all__ = [
    "Optimum",
    "Objective",
    "NoiseModel",
    "NoisyProblem",
    "griewank",
    "schwefel222",
    "rosenbrock",
    "shifted",
    "assortment",
    "jackson_ct",
    "jackson_alphas",
    "production_line",
    "simulate_line",
    "mm1k_throughput",
    "observe",
    "REGISTRY",
    "make_problem",
]


@dataclass(frozen=True)
class Optimum:
    value: float
    location: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class Objective:
    name: str
    dim: int
    box: tuple[tuple[float, float], ...]
    func: Callable[..., float]
    maximize: bool = True
    stochastic: bool = False
    optimum: Optimum | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        if len(box) != self.dim:
            raise InvalidArgumentError(f"box has {len(box)} intervals for dimension {self.dim}")
        if any(not lo < hi for lo, hi in box):
            raise InvalidArgumentError("every box interval needs low < high")
        object.__setattr__(self, "box", box)

    @property
    def low(self) -> np.ndarray:
        return np.array([b[0] for b in self.box])

    @property
    def high(self) -> np.ndarray:
        return np.array([b[1] for b in self.box])

    def to_user(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.low + (self.high - self.low) * x

    def to_unit(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return (u - self.low) / (self.high - self.low)

    def eval(self, u, rng: np.random.Generator | None = None) -> float:
        """Raw objective at user-space ``u``; stochastic objectives need ``rng``."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise DomainError(f"{self.name}: expected a point of dimension {self.dim}, got shape {u.shape}")
        if self.stochastic:
            if rng is None:
                raise InvalidArgumentError(f"{self.name} is stochastic and needs an rng")
            return float(self.func(u, rng))
        return float(self.func(u))

    def sign(self) -> float:
        return 1.0 if self.maximize else -1.0

    def value(self, x, rng: np.random.Generator | None = None) -> float:
        """Maximization-sense value at unit-cube ``x``."""
        return self.sign() * self.eval(self.to_user(x), rng)


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian noise.

    ``gaussian_prop_abs`` has variance ``zeta * |f|``, ``gaussian_prop_sq``
    has variance ``zeta**2 * f**2`` and ``gaussian_const`` has variance
    ``sigma**2``; ``param`` carries ``zeta`` or ``sigma``.
    """

    kind: str = "none"
    param: float = 0.0

    KINDS = ("none", "gaussian_prop_abs", "gaussian_prop_sq", "gaussian_const")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidArgumentError(f"unknown noise kind {self.kind!r}; choose from {self.KINDS}")
        if self.param < 0:
            raise InvalidArgumentError("noise parameter must be >= 0")

    def sd(self, f: float) -> float:
        if self.kind == "gaussian_prop_abs":
            return math.sqrt(self.param * abs(f))
        if self.kind == "gaussian_prop_sq":
            return self.param * abs(f)
        if self.kind == "gaussian_const":
            return self.param
        return 0.0

    def draw(self, f: float, rng: np.random.Generator) -> float:
        if self.kind == "none":
            return 0.0
        return float(rng.normal(0.0, self.sd(f)))


def observe(obj: Objective, noise: NoiseModel, x, rng: np.random.Generator) -> float:
    """One noisy maximization-sense observation at unit-cube ``x``.

    Noise is added to the raw value before the sign flip; every supported
    noise model is symmetric, so this equals adding it afterwards in law.
    """
    f = obj.eval(obj.to_user(x), rng)
    return obj.sign() * (f + noise.draw(f, rng))


@dataclass(frozen=True, eq=False)
class NoisyProblem:
    """Adapter giving the optimizer ``dim`` and ``sample``."""

    objective: Objective
    noise: NoiseModel = NoiseModel()

    @property
    def dim(self) -> int:
        return self.objective.dim

    def sample(self, x, rng: np.random.Generator) -> float:
        return observe(self.objective, self.noise, x, rng)


# --------------------------------------------------------------------------
# test functions


def _check_dim(d: int, minimum: int = 1) -> None:
    if d < minimum:
        raise InvalidArgumentError(f"dimension must be >= {minimum}, got {d}")


def griewank(d: int, box: Sequence[tuple[float, float]] | None = None) -> Objective:
    _check_dim(d)
    div = np.arange(1, d + 1, dtype=float)

    def f(u):
        return 50.0 * (np.sum(u * u) / 4000.0 - np.prod(np.cos(u / div)) + 1.0)

    return Objective("griewank", d, box or ((-10.0, 10.0),) * d, f, maximize=False,
                     optimum=Optimum(0.0, (0.0,) * d))


def schwefel222(d: int, box: Sequence[tuple[float, float]] | None = None) -> Objective:
    _check_dim(d)

    def f(u):
        a = np.abs(u)
        return float(np.sum(a) + np.prod(a) + 100.0)

    return Objective("schwefel222", d, box or ((-10.0, 10.0),) * d, f, maximize=False,
                     optimum=Optimum(100.0, (0.0,) * d))


def rosenbrock(d: int, box: Sequence[tuple[float, float]] | None = None) -> Objective:
    _check_dim(d, 2)

    def f(u):
        return float(np.sum(100.0 * (u[1:] - u[:-1] ** 2) ** 2 + (u[:-1] - 1.0) ** 2))

    return Objective("rosenbrock", d, box or ((-10.0, 10.0),) * d, f, maximize=False,
                     optimum=Optimum(0.0, (1.0,) * d))


def shifted(obj: Objective, u) -> Objective:
    """``x -> obj(x + u / sqrt(d))``; the optimum moves to ``location - u / sqrt(d)``."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != obj.dim:
        raise InvalidArgumentError(f"shift has {u.size} entries for dimension {obj.dim}")
    if np.any(np.abs(u) > 1):
        raise InvalidArgumentError("shift entries must lie in [-1, 1]")
    offset = u / math.sqrt(obj.dim)
    opt = obj.optimum
    if opt is not None and opt.location is not None:
        loc = np.asarray(opt.location) - offset
        if np.any(loc <= obj.low) or np.any(loc >= obj.high):
            raise InvalidArgumentError("shifted optimum leaves the box")
        opt = Optimum(opt.value, tuple(loc.tolist()))
    base = obj.func
    if obj.stochastic:
        def f(x, rng):
            return base(x + offset, rng)
    else:
        def f(x):
            return base(x + offset)
    params = dict(obj.params, shift=tuple(u.tolist()))
    return Objective(obj.name, obj.dim, obj.box, f, obj.maximize, obj.stochastic, opt, params)


# --------------------------------------------------------------------------
# assortment


def assortment(
    d: int,
    a: float = 100.0,
    b: float = 400.0,
    alpha: Sequence[float] | None = None,
    c: Sequence[float] | None = None,
    box: Sequence[tuple[float, float]] | None = None,
) -> Objective:
    """Expected newsvendor profit under multinomial-logit demand, as a function of prices."""
    _check_dim(d)
    j = np.arange(d)
    alpha = np.asarray(alpha if alpha is not None else 10.5 + 0.5 * j, dtype=float)
    c = np.asarray(c if c is not None else 6.5 + 0.5 * j, dtype=float)
    if alpha.size != d or c.size != d:
        raise InvalidArgumentError("alpha and c need one entry per product")
    if not b > a:
        raise InvalidArgumentError("need b > a")
    if box is None:
        h = 9.0 + 0.5 * j
        box = tuple(zip(h, h + 10.0))

    def f(x):
        if np.any(x <= 0):
            raise DomainError("prices must be positive")
        e = np.exp(alpha - x)
        Q = e / (1.0 + e.sum())
        bracket = (b - a) * (x - c) / x + a
        return float(np.sum(bracket**2 * Q**2) / (2.0 * (b - a)))

    return Objective("assortment", d, box, f, maximize=True,
                     params={"a": a, "b": b, "alpha": alpha.tolist(), "c": c.tolist()})


# --------------------------------------------------------------------------
# Jackson network


def jackson_alphas(x) -> tuple[np.ndarray, float]:
    """Recover class fractions and bottleneck utilization from the square-root coordinates."""
    x = np.asarray(x, dtype=float)
    d = x.size
    alpha = np.empty(d)
    rest = 1.0
    for j in range(d - 1):
        alpha[j] = x[j] ** 2 * rest
        rest -= alpha[j]
    alpha[d - 1] = rest
    return alpha, float(x[-1])


DEFAULT_JACKSON = {
    "mu": (1.0, 1.25, 1.5),
    # visits[i][j]: expected visits to station i by a class-j job
    "visits": ((1.0, 0.5, 1.0), (1.0, 1.0, 0.5), (0.5, 1.0, 1.0)),
}


def jackson_ct(
    n_stations: int = 3,
    d: int = 3,
    mu: Sequence[float] | None = None,
    visits: Sequence[Sequence[float]] | None = None,
    box: Sequence[tuple[float, float]] | None = None,
) -> Objective:
    """Steady-state mean cycle time of class-1 jobs; the last coordinate is the bottleneck utilization."""
    _check_dim(d)
    mu = np.asarray(mu if mu is not None else DEFAULT_JACKSON["mu"], dtype=float)
    V = np.asarray(visits if visits is not None else DEFAULT_JACKSON["visits"], dtype=float)
    if mu.shape != (n_stations,) or V.shape != (n_stations, d):
        raise InvalidArgumentError(f"need mu of length {n_stations} and visits of shape ({n_stations}, {d})")
    if np.any(mu <= 0) or np.any(V < 0):
        raise InvalidArgumentError("service rates must be positive and visit counts non-negative")

    def f(x):
        alpha, rho = jackson_alphas(x)
        if np.any(alpha < 0):
            raise DomainError("class fractions must be non-negative")
        load = V @ alpha
        peak = np.max(load / mu)
        bracket = mu - rho * load / peak
        if np.any(bracket <= 0):
            raise DomainError("unstable configuration: a station is saturated")
        return float(np.sum(V[:, 0] / bracket))

    return Objective("jackson", d, box or ((0.1, 0.9),) * d, f, maximize=False,
                     params={"mu": mu.tolist(), "visits": V.tolist()})


# --------------------------------------------------------------------------
# production line


class _ExpStream:
    """Buffered standard exponentials; the k-th draw depends only on the stream, giving common random numbers."""

    __slots__ = ("rng", "buf", "pos")

    def __init__(self, rng: np.random.Generator, block: int = 1024):
        self.rng = rng
        self.buf = rng.standard_exponential(block)
        self.pos = 0

    def next(self) -> float:
        if self.pos == self.buf.size:
            self.buf = self.rng.standard_exponential(self.buf.size)
            self.pos = 0
        v = self.buf[self.pos]
        self.pos += 1
        return float(v)


def simulate_line(rates, K: int, alpha: float, T: float, rng: np.random.Generator) -> dict:
    """Simulate a tandem line of single-server stations with capacity ``K`` each, up to time ``T``.

    Capacity counts every part at a station, including the one in service
    and a finished part held by blocking. Arrivals to a full first station
    are lost. A part finishing at station ``i`` while station ``i + 1`` is
    full keeps server ``i`` until a slot frees up.
    """
    rates = np.asarray(rates, dtype=float)
    d = rates.size
    if np.any(rates <= 0) or alpha <= 0 or T <= 0 or K < 1:
        raise InvalidArgumentError("rates, arrival rate, horizon and capacity must be positive")
    children = rng.spawn(d + 1)
    arr = _ExpStream(children[0])
    svc = [_ExpStream(g) for g in children[1:]]
    count = [0] * d
    busy_until = [math.inf] * d  # completion time while serving
    blocked = [False] * d
    next_arrival = arr.next() / alpha
    arrivals = lost = departures = 0

    def start(i: int, t: float) -> None:
        busy_until[i] = t + svc[i].next() / rates[i]

    def release(i: int, t: float) -> None:
        # station i lost a part; pull blocked parts forward up the line
        while i > 0 and blocked[i - 1]:
            blocked[i - 1] = False
            count[i - 1] -= 1
            count[i] += 1
            if busy_until[i] == math.inf and not blocked[i]:
                start(i, t)
            if count[i - 1] > 0:
                start(i - 1, t)
            i -= 1

    while True:
        j = min(range(d), key=busy_until.__getitem__)
        t_svc = busy_until[j]
        if next_arrival <= t_svc:
            t = next_arrival
            if t > T:
                break
            arrivals += 1
            if count[0] < K:
                count[0] += 1
                if count[0] == 1:
                    start(0, t)
            else:
                lost += 1
            next_arrival = t + arr.next() / alpha
            continue
        t = t_svc
        if t > T:
            break
        busy_until[j] = math.inf
        if j == d - 1:
            count[j] -= 1
            departures += 1
        elif count[j + 1] < K:
            count[j] -= 1
            count[j + 1] += 1
            if count[j + 1] == 1 and not blocked[j + 1]:
                start(j + 1, t)
        else:
            blocked[j] = True
            continue
        if count[j] > 0:
            start(j, t)
        release(j, t)
    return {"arrivals": arrivals, "lost": lost, "departures": departures}


def mm1k_throughput(alpha: float, mu: float, K: int) -> float:
    """Long-run departure rate ``alpha (1 - p_K)`` of an M/M/1/K queue."""
    rho = alpha / mu
    if rho == 1.0:
        pK = 1.0 / (K + 1)
    else:
        pK = (1 - rho) * rho**K / (1 - rho ** (K + 1))
    return alpha * (1 - pK)


def production_line(
    d: int,
    K: int = 10,
    alpha: float = 0.5,
    T: float = 1000.0,
    r: float = 2e5,
    c0: float = 1.0,
    c: Sequence[float] | None = None,
    box: Sequence[tuple[float, float]] | None = None,
) -> Objective:
    """Revenue rate ``r * Th / (c0 + c^T x)`` of a tandem line; one evaluation is one replication."""
    _check_dim(d)
    cvec = np.asarray(c if c is not None else np.arange(1, d + 1), dtype=float)
    if cvec.size != d:
        raise InvalidArgumentError("c needs one entry per station")
    if alpha <= 0 or T <= 0 or K < 1:
        raise InvalidArgumentError("alpha, T and K must be positive")

    def f(x, rng):
        if np.any(x <= 0):
            raise InvalidArgumentError("service rates must be positive")
        th = simulate_line(x, K, alpha, T, rng)["departures"]
        return r * th / (c0 + float(cvec @ x))

    return Objective("prodline", d, box or ((0.0, 2.0),) * d, f, maximize=True, stochastic=True,
                     params={"K": K, "alpha": alpha, "T": T, "r": r, "c0": c0, "c": cvec.tolist()})


# --------------------------------------------------------------------------
# registry


def _jackson_factory(d: int, **kw) -> Objective:
    kw.setdefault("n_stations", len(kw["mu"]) if "mu" in kw else 3)
    return jackson_ct(d=d, **kw)


REGISTRY: dict[str, Callable[..., Objective]] = {
    "griewank": griewank,
    "schwefel222": schwefel222,
    "rosenbrock": rosenbrock,
    "assortment": assortment,
    "jackson": _jackson_factory,
    "prodline": production_line,
}

SHIFTABLE = ("griewank", "schwefel222", "rosenbrock")


def make_problem(name: str, d: int, **params) -> Objective:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}") from None
    return factory(d, **params)
