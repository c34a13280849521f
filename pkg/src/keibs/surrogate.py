"""Kernel ridge regression, kernel interpolation and the Stage-2 posterior proxies.

Two evaluation paths exist. The generic path (``posterior_mean`` and
``posterior_sd``) accepts arbitrary points and any truncated sparse grid; it
routes every solve through :func:`keibs.fastinv.regularized_solve`.
:class:`CandidatePosterior` is the fast path used inside the optimizer: it
evaluates the proxies at every point of the next sparse-grid level at once,
exploiting that unsampled increment points are conditionally independent
given the base grid.

Repeated samples enter as (average, multiplicity) pairs, with per-point
noise ``sigma**2 / m_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import InvalidArgumentError, NumericalError, SingularityError
from .fastinv import (
    DiagonalNoise,
    SparseGridSystem,
    SparsePrecision,
    cond_var_diag,
    inv_tsg,
    regularized_solve,
)
from .grid import GridPoint, TruncatedSparseGrid, points_array, sg_increment
from .kernel import TensorMarkovKernel

__all__ = [
    "KRRModel",
    "SurrogateState",
    "HierBasisFn",
    "krr_fit",
    "krr_predict",
    "stage2_state",
    "ki_predict",
    "posterior_mean",
    "posterior_sd",
    "posterior_var",
    "hier_basis_eval",
    "hier_expansion",
    "CandidatePosterior",
    "NEG_VAR_TOL",
]

# relative floor below which a negative variance is treated as a fault
NEG_VAR_TOL = 1e-12


def _as_query(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, GridPoint):
        return np.array([x.coords]), True
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        return X[None, :], True
    return X, False


def _clamp_var(s2: np.ndarray, scale: np.ndarray) -> np.ndarray:
    floor = -NEG_VAR_TOL * np.maximum(1.0, scale)
    bad = s2 < floor
    if np.any(bad):
        raise NumericalError(f"negative posterior variance {float(s2[bad].min()):.3e}")
    return np.maximum(s2, 0.0)


@dataclass(frozen=True, eq=False)
class KRRModel:
    """``x -> k(x, X)^T coef``; the Stage-1 estimator."""

    kernel: TensorMarkovKernel
    points: np.ndarray
    coef: np.ndarray
    lam: float = 0.0

    def __call__(self, x):
        X, single = _as_query(x)
        out = self.kernel.matrix(X, self.points) @ self.coef
        return float(out[0]) if single else out


@dataclass(frozen=True, eq=False)
class SurrogateState:
    """Stage-1 estimator ``krr`` plus the data and tuning behind the Stage-2 proxies.

    ``resid_coef`` caches ``(K + Sigma)^{-1} (y_bar - f_hat)`` (``K^{-1}(...)``
    when ``sigma == 0``), so the mean proxy at any point costs one kernel row.
    """

    kernel: TensorMarkovKernel
    design: TruncatedSparseGrid
    multiplicities: np.ndarray
    y_bar: np.ndarray
    kinv: SparsePrecision
    sigma: float
    lam: float
    delta: float
    krr: KRRModel
    resid_coef: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.design.size

    @property
    def noise(self) -> DiagonalNoise | None:
        if self.sigma == 0.0:
            return None
        return DiagonalNoise((self.sigma / self.delta) ** 2 / self.multiplicities)


def _check_data(design: TruncatedSparseGrid, values, multiplicities) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(values, dtype=float).ravel()
    if y.size != design.size:
        raise InvalidArgumentError(f"{y.size} responses for a design of {design.size} points")
    if multiplicities is None:
        m = np.ones(design.size)
    else:
        m = np.asarray(multiplicities, dtype=float).ravel()
        if m.size != design.size:
            raise InvalidArgumentError(f"{m.size} multiplicities for a design of {design.size} points")
        if np.any(m < 1) or np.any(m != np.round(m)):
            raise InvalidArgumentError("multiplicities must be positive integers")
    return y, m


def krr_fit(
    kernel: TensorMarkovKernel,
    design: TruncatedSparseGrid,
    responses,
    lam: float,
    multiplicities=None,
    kinv: SparsePrecision | None = None,
) -> SurrogateState:
    """Fit ``f_hat(x) = k(x)^T (K + n lam diag(1/m))^{-1} y``.

    The returned state has ``sigma = 0``, so its mean proxy interpolates the
    data; use :func:`krr_predict` for the ridge estimate itself.
    """
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    y, m = _check_data(design, responses, multiplicities)
    kinv = inv_tsg(kernel, design) if kinv is None else kinv
    if lam == 0.0:
        coef = kinv @ y
    else:
        coef = regularized_solve(kinv, DiagonalNoise(design.size * lam / m), y)
    model = KRRModel(kernel, design.coords(), np.asarray(coef), float(lam))
    # the sigma = 0 interpolation step sees one (averaged) value per point
    state = stage2_state(model, design, y, None, sigma=0.0, delta=1.0, kinv=kinv)
    return replace(state, multiplicities=m)


def krr_predict(state: SurrogateState, x):
    """Stage-1 estimate ``f_hat(x)`` held by ``state``."""
    return state.krr(x)


def stage2_state(
    krr: KRRModel,
    design: TruncatedSparseGrid,
    y_bar,
    multiplicities=None,
    sigma: float = 0.0,
    delta: float = 1.0,
    kinv: SparsePrecision | None = None,
) -> SurrogateState:
    """Condition the Stage-1 estimator on averaged responses over ``design``."""
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}")
    if sigma > 0 and not delta > 0:
        raise InvalidArgumentError(f"delta must be > 0 when sigma > 0, got {delta}")
    y, m = _check_data(design, y_bar, multiplicities)
    if sigma == 0.0 and np.any(m > 1):
        raise InvalidArgumentError("repeated design points need sigma > 0")
    kernel = krr.kernel
    kinv = inv_tsg(kernel, design) if kinv is None else kinv
    r = y - krr(design.coords())
    if sigma == 0.0:
        coef = kinv @ r
    else:
        coef = regularized_solve(kinv, DiagonalNoise((sigma / delta) ** 2 / m), r)
    return SurrogateState(kernel, design, m, y, kinv, float(sigma), krr.lam, float(delta), krr, np.asarray(coef))


def posterior_mean(state: SurrogateState, x):
    """``f_tilde(x) = f_hat(x) + k(x)^T (K + Sigma)^{-1} (y_bar - f_hat)``."""
    X, single = _as_query(x)
    out = state.krr(X) + state.kernel.matrix(X, state.design.coords()) @ state.resid_coef
    return float(out[0]) if single else out


def posterior_var(state: SurrogateState, x):
    """``s^2(x) = delta^2 (k(x, x) - k(x)^T (K + Sigma)^{-1} k(x))``."""
    X, single = _as_query(x)
    kX = state.kernel.matrix(X, state.design.coords())
    noise = state.noise
    if noise is None:
        solved = state.kinv @ kX.T
    else:
        solved = regularized_solve(state.kinv, noise, kX.T)
    kxx = state.kernel.diag(X)
    s2 = state.delta**2 * (kxx - np.einsum("ij,ji->i", kX, solved))
    s2 = _clamp_var(s2, state.delta**2 * kxx)
    if noise is None:
        # interpolation: exactly zero at design points, where the difference above is pure cancellation
        nodes = set(map(tuple, state.design.coords().tolist()))
        s2[[tuple(row) in nodes for row in X.tolist()]] = 0.0
    return float(s2[0]) if single else s2


def posterior_sd(state: SurrogateState, x):
    return np.sqrt(posterior_var(state, x))


def ki_predict(kernel: TensorMarkovKernel, design, values, x):
    """Kernel interpolant ``k(x)^T K^{-1} y``.

    A :class:`TruncatedSparseGrid` design uses the sparse inverse; a plain
    list of points (or coordinate array) falls back to a dense Cholesky solve.
    """
    X, single = _as_query(x)
    y = np.asarray(values, dtype=float).ravel()
    if isinstance(design, TruncatedSparseGrid):
        pts = design.coords()
        coef = inv_tsg(kernel, design) @ y
    else:
        pts = points_array(design) if len(design) and isinstance(design[0], GridPoint) else np.atleast_2d(design)
        try:
            coef = sla.cho_solve(sla.cho_factor(kernel.matrix(pts)), y)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(f"kernel matrix is singular: {exc}") from exc
    if pts.shape[0] != y.size:
        raise InvalidArgumentError(f"{y.size} values for {pts.shape[0]} design points")
    out = kernel.matrix(X, pts) @ coef
    return float(out[0]) if single else out


# --------------------------------------------------------------------------
# hierarchical basis


def _phi_1d(factor, level: int, position: int, x: np.ndarray) -> np.ndarray:
    h = 2.0**-level
    c = position * h
    pc, qc = factor.pq(c)
    if position == 1:
        pl, ql = 0.0, 1.0
    else:
        pl, ql = factor.pq(c - h)
    if position == 2**level - 1:
        pr, qr = 1.0, 0.0
    else:
        pr, qr = factor.pq(c + h)
    px, qx = factor.pq(x)
    left = (px * ql - pl * qx) / (pc * ql - pl * qc)
    right = (pr * qx - px * qr) / (pr * qc - pc * qr)
    lo, hi = c - h, c + h
    return np.where((x > lo) & (x <= c), left, np.where((x > c) & (x < hi), right, 0.0))


@dataclass(frozen=True)
class HierBasisFn:
    """Kernel-induced hat function centred at ``c_{l,i}``; positions need not be odd."""

    kernel: TensorMarkovKernel
    levels: tuple[int, ...]
    positions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        object.__setattr__(self, "positions", tuple(int(v) for v in self.positions))
        if len(self.levels) != self.kernel.dim or len(self.positions) != self.kernel.dim:
            raise InvalidArgumentError("levels and positions must match the kernel dimension")
        for l, i in zip(self.levels, self.positions):
            if l < 1 or not 1 <= i <= 2**l - 1:
                raise InvalidArgumentError(f"position {i} is not inside level {l}")

    @property
    def center(self) -> tuple[float, ...]:
        return tuple(i / 2**l for l, i in zip(self.levels, self.positions))

    def support(self) -> list[tuple[float, float]]:
        return [((i - 1) / 2**l, (i + 1) / 2**l) for l, i in zip(self.levels, self.positions)]


def hier_basis_eval(fn: HierBasisFn, x):
    X, single = _as_query(x)
    fn.kernel.check_domain(X)
    out = np.ones(X.shape[0])
    for j, f in enumerate(fn.kernel.factors):
        out *= _phi_1d(f, fn.levels[j], fn.positions[j], X[:, j])
    return float(out[0]) if single else out


def hier_expansion(kernel: TensorMarkovKernel, levels: Sequence[int], values, x):
    """``sum_i f(c_{l,i}) phi_{l,i}(x)`` over the full grid of level ``levels`` (last axis fastest)."""
    X, single = _as_query(x)
    kernel.check_domain(X)
    levels = tuple(int(v) for v in levels)
    vals = np.asarray(values, dtype=float).reshape(tuple(2**l - 1 for l in levels))
    out = vals
    for j, (f, l) in enumerate(zip(kernel.factors, levels)):
        phi = np.stack([_phi_1d(f, l, i, X[:, j]) for i in range(1, 2**l)], axis=1)
        # contract grid axis j; after the first step axis 0 indexes the query points
        out = np.einsum("mi,i...->m...", phi, out) if j == 0 else np.einsum("mi,mi...->m...", phi, out)
    res = out.reshape(X.shape[0])
    return float(res[0]) if single else res


# --------------------------------------------------------------------------
# fast candidate engine


class CandidatePosterior:
    """Posterior proxies over the level-``tau + 1`` sparse grid given data on part of it.

    Candidates are ordered canonically: the level-``tau`` grid ``S`` first,
    then its increment ``I``. Every point of ``S`` must be sampled; any subset
    of ``I`` may be. The sampled increment points ``A`` keep ``K^{-1}`` in the
    block form ``[[A^{-1} + B D B^T, -B D], [-D B^T, D]]``; eliminating the
    ``A`` block leaves a dense system of the size of ``S`` whose cost does not
    grow with the number of Stage-2 samples.
    """

    def __init__(self, kernel: TensorMarkovKernel, d: int, tau: int, system: SparseGridSystem | None = None):
        self.kernel = kernel
        self.d = d
        self.tau = tau
        self.system = SparseGridSystem(kernel, d, tau) if system is None else system
        self.base = tuple(self.system.points)
        self.increment = tuple(sg_increment(d, tau))
        self.points = self.base + self.increment
        self.coords = points_array(self.points)
        self.n_base = len(self.base)
        self.n_inc = len(self.increment)
        self.Ainv = self.system.inverse()
        self.B = sp.csc_array(self.system.kinv_kvec(points_array(self.increment)))
        self.Bt = sp.csr_array(self.B.T)
        self.D = cond_var_diag(kernel, self.increment)
        self._Ainv_dense = self.Ainv.toarray()

    @property
    def size(self) -> int:
        return self.n_base + self.n_inc

    def stage1(self, y_base, lam: float) -> np.ndarray:
        """Ridge estimate ``f_hat`` at every candidate from one sample per base point."""
        y = np.asarray(y_base, dtype=float)
        if y.size != self.n_base:
            raise InvalidArgumentError(f"need {self.n_base} base responses, got {y.size}")
        if lam > 0:
            nl = self.n_base * lam
            alpha = regularized_solve(SparsePrecision(self.Ainv, self.base), DiagonalNoise.constant(nl, self.n_base), y)
            f_base = y - nl * alpha
        else:
            f_base = y.copy()
        return np.concatenate((f_base, self.Bt @ f_base))

    def krr_model(self, y_base, lam: float) -> KRRModel:
        """The same Stage-1 estimator as :meth:`stage1`, usable at arbitrary points."""
        y = np.asarray(y_base, dtype=float)
        if lam > 0:
            coef = regularized_solve(
                SparsePrecision(self.Ainv, self.base), DiagonalNoise.constant(self.n_base * lam, self.n_base), y
            )
        else:
            coef = self.Ainv @ y
        return KRRModel(self.kernel, points_array(self.base), np.asarray(coef), float(lam))

    def posterior(self, f_hat, counts, y_bar, sigma: float, delta: float) -> tuple[np.ndarray, np.ndarray]:
        """Mean proxy and variance proxy ``s^2`` at every candidate.

        ``counts`` and ``y_bar`` are indexed like the candidates; ``y_bar`` is
        ignored where ``counts == 0``.
        """
        f_hat = np.asarray(f_hat, dtype=float)
        counts = np.asarray(counts)
        y_bar = np.asarray(y_bar, dtype=float)
        nS = self.n_base
        if np.any(counts[:nS] < 1):
            raise InvalidArgumentError("every base point must be sampled")
        sampled_inc = np.flatnonzero(counts[nS:] > 0)
        r = np.where(counts > 0, y_bar - f_hat, 0.0)
        rS, rA = r[:nS], r[nS + sampled_inc]
        BA = self.B[:, sampled_inc]
        DA = self.D[sampled_inc]
        mean = f_hat.copy()
        var = np.empty(self.size)
        unsampled = np.setdiff1d(np.arange(self.n_inc), sampled_inc)

        if sigma == 0.0:
            # interpolation: K^{-1} k(x) = [b_x; 0] for unsampled increment points
            mean[counts > 0] = y_bar[counts > 0]
            mean[nS + unsampled] = f_hat[nS + unsampled] + self.Bt[unsampled] @ rS
            var[:] = 0.0
            var[nS + unsampled] = delta**2 / self.D[unsampled]
            return mean, var

        if not delta > 0:
            raise InvalidArgumentError(f"delta must be > 0 when sigma > 0, got {delta}")
        c = (delta / sigma) ** 2
        mS = counts[:nS].astype(float)
        mA = counts[nS + sampled_inc].astype(float)
        H = DA + c * mA
        g = DA * c * mA / H
        Pinv = self._Ainv_dense.copy()
        Pinv[np.diag_indices(nS)] += c * mS
        if sampled_inc.size:
            Pinv += (BA @ sp.diags_array(g) @ BA.T).toarray()
        try:
            chol = sla.cho_factor(Pinv, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Schur complement not positive definite: {exc}") from exc
        P = sla.cho_solve(chol, np.eye(nS))
        P = 0.5 * (P + P.T)

        # z = (K^{-1} + Sigma^{-1})^{-1} K^{-1} r, and K (K + Sigma)^{-1} r = r - z on the design
        eA = DA * (BA.T @ rS - rA)
        tS = self.Ainv @ rS + BA @ eA
        tA = -eA
        zS = P @ (tS + BA @ (DA / H * tA))
        zA = (tA + DA * (BA.T @ zS)) / H
        vS = rS - zS
        mean[:nS] = f_hat[:nS] + vS
        mean[nS + sampled_inc] = f_hat[nS + sampled_inc] + rA - zA
        mean[nS + unsampled] = f_hat[nS + unsampled] + self.Bt[unsampled] @ vS

        Q = self.Bt @ P
        quad = np.asarray(self.Bt.multiply(Q).sum(axis=1)).ravel()
        var[:nS] = np.diag(P)
        var[nS + sampled_inc] = 1.0 / H + (DA / H) ** 2 * quad[sampled_inc]
        var[nS + unsampled] = 1.0 / self.D[unsampled] + quad[unsampled]
        return mean, delta**2 * var
