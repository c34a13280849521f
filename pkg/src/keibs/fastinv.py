"""Exact sparse inverses of tensor Markov kernel matrices on dyadic designs.

Four cases build on each other:

* one-dimensional grids: ``K^{-1}`` is tridiagonal with closed-form entries,
  and ``K^{-1} k(x)`` has at most two nonzeros;
* full grids: Kronecker products of the one-dimensional inverses;
* classical sparse grids: a signed-binomial sum of full-grid inverses
  (the combination technique), scattered into the sparse-grid ordering;
* truncated sparse grids: a block form whose lower-right block is diagonal.

One-dimensional boundary convention: with ``p_i = p(x_i)`` and
``q_i = q(x_i)``, we set ``p_0 = q_{n+1} = 0`` and ``p_{n+1} = q_0 = 1``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, NumericalError, SingularityError
from .grid import GridPoint, TruncatedSparseGrid, classical_sg, level_multi_indices, points_array
from .kernel import MarkovFactor, TensorMarkovKernel

__all__ = [
    "SparsePrecision",
    "SparseVector",
    "DiagonalNoise",
    "SparseGridSystem",
    "inv_grid_1d",
    "kinv_times_kvec_1d",
    "inv_full_grid",
    "kinv_times_kvec_full_grid",
    "inv_classical_sg",
    "kinv_times_kvec_sg",
    "cond_var_diag",
    "inv_tsg",
    "regularized_solve",
    "combination_terms",
]


def _symmetrize(M) -> sp.csr_array:
    """Mirror the upper triangle so that (i, j) and (j, i) are bitwise equal."""
    U = sp.triu(sp.csr_array(M), format="csr")
    return sp.csr_array(U + sp.triu(U, k=1, format="csr").T)


@dataclass(frozen=True, eq=False)
class SparsePrecision:
    """A sparse symmetric ``K^{-1}`` whose rows follow ``point_order``."""

    matrix: sp.csr_array
    point_order: tuple

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def __getitem__(self, ij) -> float:
        i, j = ij
        return float(self.matrix[i, j])

    def entries(self) -> dict[tuple[int, int], float]:
        """Stored entries with ``i <= j``; the lower triangle mirrors them."""
        coo = sp.triu(self.matrix).tocoo()
        return {(int(i), int(j)): float(v) for i, j, v in zip(coo.row, coo.col, coo.data)}

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other

    def scaled(self, c: float) -> "SparsePrecision":
        return SparsePrecision(sp.csr_array(self.matrix * c), self.point_order)


@dataclass(frozen=True)
class SparseVector:
    n: int
    indices: np.ndarray
    values: np.ndarray

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.n)
        np.add.at(out, self.indices, self.values)
        return out

    def dot(self, v) -> float:
        return float(np.dot(self.values, np.asarray(v)[self.indices]))

    @classmethod
    def from_column(cls, col) -> "SparseVector":
        col = sp.csc_array(col)
        return cls(col.shape[0], col.indices.copy(), col.data.copy())


@dataclass(frozen=True)
class DiagonalNoise:
    """Diagonal matrix ``Sigma`` with strictly positive entries."""

    diag: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.diag, dtype=float))
        if d.ndim != 1 or not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise InvalidArgumentError("noise diagonal entries must be finite and strictly positive")
        object.__setattr__(self, "diag", d)

    @classmethod
    def constant(cls, value: float, n: int) -> "DiagonalNoise":
        return cls(np.full(n, float(value)))


# --------------------------------------------------------------------------
# one-dimensional grids


def _extend(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate(([0.0], p, [1.0])), np.concatenate(([1.0], q, [0.0]))


def _gaps(pe: np.ndarray, qe: np.ndarray) -> np.ndarray:
    """``g[i] = p_{i+1} q_i - p_i q_{i+1}`` for ``i = 0..n`` on the extended sequences."""
    g = pe[1:] * qe[:-1] - pe[:-1] * qe[1:]
    bad = np.flatnonzero(~(g > 0))
    if bad.size:
        i = int(bad[0])
        raise SingularityError(
            f"degenerate denominator between design indices {i} and {i + 1} "
            "(coincident points or p/q not increasing)"
        )
    return g


def _tridiag(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pe, qe = _extend(p, q)
    g = _gaps(pe, qe)
    diag = (pe[2:] * qe[:-2] - pe[:-2] * qe[2:]) / (g[:-1] * g[1:])
    off = -1.0 / g[1:-1]
    return diag, off


def _tridiag_matrix(diag: np.ndarray, off: np.ndarray) -> sp.csr_array:
    n = diag.size
    i = np.arange(n)
    rows = np.concatenate((i, i[:-1], i[1:]))
    cols = np.concatenate((i, i[1:], i[:-1]))
    data = np.concatenate((diag, off, off))
    return sp.csr_array(sp.coo_array((data, (rows, cols)), shape=(n, n)))


def _check_increasing(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=float).ravel()
    if xs.size == 0:
        raise InvalidArgumentError("need at least one design point")
    if np.any(np.diff(xs) <= 0):
        i = int(np.flatnonzero(np.diff(xs) <= 0)[0])
        raise SingularityError(f"design points must be strictly increasing; violated at index {i + 1}")
    return xs


def inv_grid_1d(factor: MarkovFactor, xs: Sequence[float]) -> SparsePrecision:
    """Tridiagonal ``K^{-1}`` for a one-dimensional factor on increasing points ``xs``."""
    xs = _check_increasing(xs)
    factor.check_domain(xs)
    diag, off = _tridiag(*factor.pq(xs))
    return SparsePrecision(_tridiag_matrix(diag, off), tuple(xs.tolist()))


def _weights_1d(p: np.ndarray, q: np.ndarray, xs: np.ndarray, px: np.ndarray, qx: np.ndarray, x: np.ndarray):
    """Nonzeros of ``K^{-1} k(x)`` for many ``x``: slots at 0-based ``i*-1`` and ``i*``.

    Returns ``(istar, w_lo, w_hi)``; ``w_lo`` belongs to index ``istar - 1``
    (valid when ``istar >= 1``) and ``w_hi`` to index ``istar`` (valid when
    ``istar <= n - 1``).
    """
    pe, qe = _extend(p, q)
    istar = np.searchsorted(xs, x, side="right")
    den = pe[istar + 1] * qe[istar] - pe[istar] * qe[istar + 1]
    w_lo = (pe[istar + 1] * qx - px * qe[istar + 1]) / den
    w_hi = (px * qe[istar] - pe[istar] * qx) / den
    return istar, w_lo, w_hi


def kinv_times_kvec_1d(factor: MarkovFactor, xs: Sequence[float], x: float) -> SparseVector:
    """``K^{-1} k(x)`` on a one-dimensional grid; at most two nonzeros."""
    xs = _check_increasing(xs)
    factor.check_domain(xs)
    factor.check_domain(x)
    p, q = factor.pq(xs)
    _gaps(*_extend(p, q))
    xa = np.atleast_1d(float(x))
    px, qx = factor.pq(xa)
    istar, w_lo, w_hi = _weights_1d(p, q, xs, px, qx, xa)
    s = int(istar[0])
    idx, val = [], []
    if s >= 1:
        idx.append(s - 1)
        val.append(float(w_lo[0]))
    if s <= xs.size - 1:
        idx.append(s)
        val.append(float(w_hi[0]))
    return SparseVector(xs.size, np.array(idx, dtype=int), np.array(val))


# --------------------------------------------------------------------------
# full grids


def _kron_all(mats) -> sp.csr_array:
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return sp.csr_array(out)


def inv_full_grid(k: TensorMarkovKernel, axes: Sequence[Sequence[float]]) -> SparsePrecision:
    """``K^{-1} = kron_j K_j^{-1}`` on the full grid ``axes[0] x ... x axes[d-1]`` (last axis fastest)."""
    if len(axes) != k.dim:
        raise InvalidArgumentError(f"need {k.dim} axes, got {len(axes)}")
    parts = [inv_grid_1d(f, xs).matrix for f, xs in zip(k.factors, axes)]
    order = tuple(itertools.product(*(tuple(float(v) for v in xs) for xs in axes)))
    return SparsePrecision(_symmetrize(_kron_all(parts)), order)


def kinv_times_kvec_full_grid(k: TensorMarkovKernel, axes: Sequence[Sequence[float]], x) -> SparseVector:
    x = np.asarray(x, dtype=float).ravel()
    vecs = [kinv_times_kvec_1d(f, xs, xj).toarray() for f, xs, xj in zip(k.factors, axes, x)]
    out = vecs[0]
    for v in vecs[1:]:
        out = np.kron(out, v)
    nz = np.flatnonzero(out)
    return SparseVector(out.size, nz, out[nz])


# --------------------------------------------------------------------------
# classical sparse grids


def combination_terms(d: int, tau: int) -> list[tuple[tuple[int, ...], int]]:
    """Level multi-indices and signed-binomial coefficients of the combination technique."""
    top = tau + d - 1
    terms = []
    for order in range(max(tau, d), top + 1):
        coef = (-1) ** (top - order) * comb(d - 1, top - order)
        for levels in level_multi_indices(d, order):
            terms.append((levels, coef))
    return terms


@dataclass
class _FullGridTerm:
    levels: tuple[int, ...]
    coef: int
    nodes: list[np.ndarray]
    pq: list[tuple[np.ndarray, np.ndarray]]
    to_sg: np.ndarray  # full-grid flat index -> sparse-grid row


class SparseGridSystem:
    """Cached per-full-grid data for the level-``tau`` classical sparse grid of a kernel.

    ``inverse()`` returns ``A^{-1}`` in canonical order and ``kinv_kvec(X)``
    returns ``A^{-1} k(X_SG, x)`` for a batch of query points as a sparse
    ``(n, m)`` matrix.
    """

    def __init__(self, kernel: TensorMarkovKernel, d: int, tau: int):
        if kernel.dim != d:
            raise InvalidArgumentError(f"kernel has dimension {kernel.dim}, grid has {d}")
        self.kernel = kernel
        self.d = d
        self.tau = tau
        self.points = classical_sg(d, tau)
        self.n = len(self.points)
        # numerators at the common level tau identify points exactly
        key = {
            tuple(ix.position << (tau - ix.level) for ix in p.dyadic): r for r, p in enumerate(self.points)
        }
        self.terms: list[_FullGridTerm] = []
        for levels, coef in combination_terms(d, tau):
            nodes = [np.arange(1, 2**l) / 2**l for l in levels]
            pq = [f.pq(xs) for f, xs in zip(kernel.factors, nodes)]
            grids = np.meshgrid(*[np.arange(1, 2**l) << (tau - l) for l in levels], indexing="ij")
            nums = np.stack([g.ravel() for g in grids], axis=1)
            to_sg = np.fromiter((key[tuple(row)] for row in nums.tolist()), dtype=np.int64, count=nums.shape[0])
            self.terms.append(_FullGridTerm(levels, coef, nodes, pq, to_sg))
        self._inverse: sp.csr_array | None = None

    def inverse(self) -> sp.csr_array:
        if self._inverse is None:
            rows, cols, data = [], [], []
            for t in self.terms:
                parts = [_tridiag_matrix(*_tridiag(p, q)) for p, q in t.pq]
                block = _kron_all(parts).tocoo()
                rows.append(t.to_sg[block.row])
                cols.append(t.to_sg[block.col])
                data.append(t.coef * block.data)
            A = sp.coo_array(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, self.n)
            )
            self._inverse = _symmetrize(A)
        return self._inverse

    def kinv_kvec(self, X) -> sp.csc_array:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.kernel.check_domain(X)
        m = X.shape[0]
        pqx = [f.pq(X[:, j]) for j, f in enumerate(self.kernel.factors)]
        rows, cols, data = [], [], []
        col_ids = np.arange(m)
        for t in self.terms:
            flat = np.zeros((m, 1), dtype=np.int64)
            val = np.ones((m, 1))
            for j, (xs, (p, q)) in enumerate(zip(t.nodes, t.pq)):
                n_j = xs.size
                istar, w_lo, w_hi = _weights_1d(p, q, xs, pqx[j][0], pqx[j][1], X[:, j])
                if n_j == 1:
                    idx = np.zeros((m, 1), dtype=np.int64)
                    w = np.where(istar >= 1, w_lo, w_hi)[:, None]
                else:
                    idx = np.stack((np.clip(istar - 1, 0, n_j - 1), np.clip(istar, 0, n_j - 1)), axis=1)
                    w = np.stack((np.where(istar >= 1, w_lo, 0.0), np.where(istar <= n_j - 1, w_hi, 0.0)), axis=1)
                flat = (flat[:, :, None] * n_j + idx[:, None, :]).reshape(m, -1)
                val = (val[:, :, None] * w[:, None, :]).reshape(m, -1)
            keep = val != 0.0
            rows.append(t.to_sg[flat[keep]])
            cols.append(np.broadcast_to(col_ids[:, None], flat.shape)[keep])
            data.append(t.coef * val[keep])
        out = sp.coo_array(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, m)
        )
        return sp.csc_array(out)


def inv_classical_sg(k: TensorMarkovKernel, d: int, tau: int) -> SparsePrecision:
    system = SparseGridSystem(k, d, tau)
    return SparsePrecision(system.inverse(), tuple(system.points))


def kinv_times_kvec_sg(k: TensorMarkovKernel, d: int, tau: int, x) -> SparseVector:
    if isinstance(x, GridPoint):
        x = x.coords
    col = SparseGridSystem(k, d, tau).kinv_kvec(np.asarray(x, dtype=float)[None, :])
    return SparseVector.from_column(col)


# --------------------------------------------------------------------------
# truncated sparse grids


def cond_var_diag(k: TensorMarkovKernel, points: Sequence[GridPoint]) -> np.ndarray:
    """Diagonal block ``D`` for increment points: the inverse conditional variance given the base grid.

    Each factor uses the point's own level with neighbours ``c_{l,i-1}`` and
    ``c_{l,i+1}``; a neighbour at 0 or 1 takes the boundary values
    ``(p, q) = (0, 1)`` or ``(1, 0)``.
    """
    out = np.ones(len(points))
    if not len(points):
        return out
    levels = np.array([p.levels for p in points])
    positions = np.array([p.positions for p in points])
    for j, f in enumerate(k.factors):
        h = 2.0 ** -levels[:, j]
        centre = positions[:, j] * h
        p0, q0 = f.pq(centre)
        left = positions[:, j] == 1
        right = positions[:, j] == 2 ** levels[:, j] - 1
        pl, ql = f.pq(np.where(left, 0.5, centre - h))
        pr, qr = f.pq(np.where(right, 0.5, centre + h))
        pl, ql = np.where(left, 0.0, pl), np.where(left, 1.0, ql)
        pr, qr = np.where(right, 1.0, pr), np.where(right, 0.0, qr)
        g_lo = p0 * ql - pl * q0
        g_hi = pr * q0 - p0 * qr
        if np.any(g_lo <= 0) or np.any(g_hi <= 0):
            i = int(np.flatnonzero((g_lo <= 0) | (g_hi <= 0))[0])
            raise SingularityError(f"degenerate conditional variance at augment point {i}")
        out *= (pr * ql - pl * qr) / (g_lo * g_hi)
    return out


def inv_tsg(k: TensorMarkovKernel, tsg: TruncatedSparseGrid, system: SparseGridSystem | None = None) -> SparsePrecision:
    """``K^{-1} = [[E, -B D], [-D B^T, D]]`` with ``E = A^{-1} + B D B^T``."""
    if system is None:
        system = SparseGridSystem(k, tsg.dim, tsg.base_level)
    Ainv = system.inverse()
    if not tsg.augment:
        return SparsePrecision(Ainv, tsg.points)
    B = system.kinv_kvec(points_array(tsg.augment))
    D = sp.diags_array(cond_var_diag(k, tsg.augment))
    BD = sp.csr_array(B @ D)
    E = Ainv + BD @ B.T
    full = sp.block_array([[E, -BD], [-BD.T, D]], format="csr")
    return SparsePrecision(_symmetrize(full), tsg.points)


# --------------------------------------------------------------------------
# regularized solves


def regularized_solve(kinv: SparsePrecision | sp.sparray, sigma: DiagonalNoise, b, rtol: float = 1e-12):
    """``(K + Sigma)^{-1} b`` from the sparse ``K^{-1}`` without forming ``K``.

    Uses ``(K + Sigma)^{-1} = Sigma^{-1} (K^{-1} + Sigma^{-1})^{-1} K^{-1}``;
    the sparse inner system is solved by Jacobi-preconditioned conjugate
    gradients (at most ``10 n`` iterations). ``b`` may be a vector or an
    ``(n, m)`` matrix of right-hand sides.
    """
    Kinv = kinv.matrix if isinstance(kinv, SparsePrecision) else sp.csr_array(kinv)
    n = Kinv.shape[0]
    s = sigma.diag
    if s.size == 1 and n != 1:
        s = np.full(n, s[0])
    if s.size != n:
        raise InvalidArgumentError(f"noise has {s.size} entries, matrix has {n} rows")
    b = np.asarray(b, dtype=float)
    if b.shape[0] != n:
        raise InvalidArgumentError(f"right-hand side has {b.shape[0]} rows, expected {n}")
    M = sp.csr_array(Kinv + sp.diags_array(1.0 / s))
    precond = sp.diags_array(1.0 / M.diagonal())
    rhs = Kinv @ b
    cols = rhs[:, None] if rhs.ndim == 1 else rhs
    z = np.empty_like(cols)
    for c in range(cols.shape[1]):
        r = cols[:, c]
        if not np.any(r):
            z[:, c] = 0.0
            continue
        zc, info = spla.cg(M, r, rtol=rtol, atol=0.0, maxiter=10 * n, M=precond)
        if info != 0:
            res = np.linalg.norm(M @ zc - r) / np.linalg.norm(r)
            raise NumericalError(f"conjugate gradients did not converge: relative residual {res:.3e}")
        z[:, c] = zc
    out = z / s[:, None]
    return out[:, 0] if rhs.ndim == 1 else out
