"""Implicit pressure projection.

The production operator is the sparse facet Laplacian ``B``::

    (B p)_i = (1/rho) sum_j (|Gamma_ij| / r_ij) (p_i - p_j)

which is symmetric, positive semi-definite and has the constant vector as
its kernel.  It is solved with MINRES restricted to zero-mean vectors.
The dense-ish operator ``A = G^T W G`` built from strong gradients is kept
as a test oracle only (:func:`apply_A`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from . import operators as ops
from .voronoi import VoronoiMesh

__all__ = [
    "SolverError",
    "SolveRecord",
    "SparseSymmetricOperator",
    "assemble_B",
    "assemble_rhs",
    "apply_A",
    "minres",
    "solve_pressure",
    "solve_pressure_multiphase",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Linear or fixed-point solve failed; ``residual`` holds the last measure."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class SolveRecord:
    iterations: int
    residual: float
    outer_iterations: int = 0
    increment: float = 0.0
    max_mean_ratio: float = 0.0


@dataclass
class SparseSymmetricOperator:
    """Symmetric CSR matrix with the constant vector in its kernel."""

    matrix: sparse.csr_matrix
    diagonal: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, p):
        return self.matrix @ p

    def quadratic_form(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return float(p @ (self.matrix @ p))

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def is_symmetric(self) -> bool:
        diff = self.matrix - self.matrix.T
        return diff.count_nonzero() == 0

    @property
    def nnz_per_row(self) -> float:
        return self.matrix.nnz / self.n


def _uniform_density(rho) -> float:
    r = np.atleast_1d(np.asarray(rho, dtype=float))
    if not np.all(r > 0) or not np.all(np.isfinite(r)):
        raise ValueError("density must be positive and finite")
    if np.any(r != r.flat[0]):
        raise ValueError("assemble_B needs a homogeneous density; use solve_pressure_multiphase")
    return float(r.flat[0])


def assemble_B(mesh: VoronoiMesh, rho=1.0) -> SparseSymmetricOperator:
    """Assemble the sparse pressure operator; one entry pair per facet.

    Each unordered neighbour pair is written once to ``(i, j)`` and
    ``(j, i)`` from the same float, so the matrix is exactly symmetric.
    """
    rho = _uniform_density(rho)
    n = mesh.n
    c = mesh.pair_len / mesh.pair_r / rho
    diag = np.bincount(mesh.pair_i, weights=c, minlength=n) + np.bincount(
        mesh.pair_j, weights=c, minlength=n
    )
    rows = np.concatenate([mesh.pair_i, mesh.pair_j, np.arange(n)])
    cols = np.concatenate([mesh.pair_j, mesh.pair_i, np.arange(n)])
    vals = np.concatenate([-c, -c, diag])
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return SparseSymmetricOperator(matrix=mat, diagonal=diag)


def assemble_rhs(mesh: VoronoiMesh, v, dt: float) -> np.ndarray:
    """Divergence right-hand side ``b_i = (|w_i| div_w(v)_i - S_i . v_i) / dt``.

    On interior cells this is the volume-weighted weak divergence over
    ``dt``; the wall term makes ``sum(b) == 0`` hold exactly in exact
    arithmetic.  The projection solves ``B p = -b``.
    """
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    return -ops.divergence_functional(mesh, v) / dt


def apply_A(mesh: VoronoiMesh, rho, p) -> np.ndarray:
    """Unsparsified operator ``sum_i (|w_i|/rho_i) grad_s p_i . grad_s phi_i`` applied to ``p``.

    Oracle for small meshes: two strong-gradient applications through an
    explicit sparse gradient matrix.
    """
    g = ops.strong_gradient_matrix(mesh)
    w = mesh.volume / np.broadcast_to(np.asarray(rho, dtype=float), (mesh.n,))
    gp = g @ np.asarray(p, dtype=float)
    return g.T @ (np.concatenate([w, w]) * gp)


# ---------------------------------------------------------------------------
# MINRES on the zero-mean subspace


@numba.njit(cache=True)
def _csr_matvec(indptr, indices, data, x, out):
    n = indptr.shape[0] - 1
    for i in range(n):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s


@numba.njit(cache=True)
def _remove_mean(x):
    n = x.shape[0]
    s = 0.0
    for i in range(n):
        s += x[i]
    s /= n
    for i in range(n):
        x[i] -= s


@numba.njit(cache=True)
def _dot(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


@numba.njit(cache=True)
def _minres_kernel(indptr, indices, data, b, x, tol, bnorm, maxiter):
    """Paige-Saunders MINRES without preconditioner, iterate kept mean-free.

    ``x`` holds the initial guess on entry and the solution on exit.
    Returns (iterations, residual estimate, flag, max |mean(x)|/|x|);
    flag 0 converged, 1 iteration cap, 2 breakdown / non-finite.
    """
    n = b.shape[0]
    eps = 2.220446049250313e-16
    r1 = np.empty(n)
    _csr_matvec(indptr, indices, data, x, r1)
    for i in range(n):
        r1[i] = b[i] - r1[i]
    _remove_mean(r1)
    y = r1.copy()
    r2 = r1.copy()
    beta1 = math.sqrt(_dot(r1, r1))
    if beta1 <= tol * bnorm:
        return 0, beta1, 0, 0.0
    oldb = 0.0
    beta = beta1
    dbar = 0.0
    epsln = 0.0
    phibar = beta1
    cs = -1.0
    sn = 0.0
    w = np.zeros(n)
    w1 = np.zeros(n)
    w2 = np.zeros(n)
    v = np.empty(n)
    max_ratio = 0.0
    itn = 0
    flag = 1
    while itn < maxiter:
        itn += 1
        s = 1.0 / beta
        for i in range(n):
            v[i] = s * y[i]
        _remove_mean(v)
        _csr_matvec(indptr, indices, data, v, y)
        if itn >= 2:
            f = beta / oldb
            for i in range(n):
                y[i] -= f * r1[i]
        alfa = _dot(v, y)
        f = alfa / beta
        for i in range(n):
            y[i] -= f * r2[i]
        _remove_mean(y)
        for i in range(n):
            r1[i] = r2[i]
            r2[i] = y[i]
        oldb = beta
        beta = math.sqrt(_dot(y, y))
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = math.sqrt(gbar * gbar + beta * beta)
        if gamma < eps:
            gamma = eps
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        denom = 1.0 / gamma
        for i in range(n):
            w1[i] = w2[i]
            w2[i] = w[i]
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) * denom
            x[i] += phi * w[i]
        _remove_mean(x)
        xn = math.sqrt(_dot(x, x))
        if xn > 0.0:
            m = 0.0
            for i in range(n):
                m += x[i]
            ratio = abs(m / n) / xn
            if ratio > max_ratio:
                max_ratio = ratio
        if not math.isfinite(phibar) or not math.isfinite(xn):
            flag = 2
            break
        if phibar <= tol * bnorm:
            flag = 0
            break
        if beta == 0.0:
            flag = 0
            break
    return itn, phibar, flag, max_ratio


def minres(B: SparseSymmetricOperator, b, tol: float = 1e-9, max_iter: Optional[int] = None, x0=None):
    """Zero-mean MINRES; returns ``(x, SolveRecord)`` without raising on a cap."""
    mat = B.matrix
    bb = np.array(b, dtype=float)
    bb -= bb.mean()
    n = bb.size
    max_iter = 10 * n if max_iter is None else int(max_iter)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    x -= x.mean() if n else 0.0
    bnorm = float(np.linalg.norm(bb))
    if bnorm == 0.0:
        return np.zeros(n), SolveRecord(0, 0.0)
    total = 0
    ratio = 0.0
    residual = float("inf")
    # MINRES tracks the residual recursively; restart from the true residual
    # if round-off let the two drift apart
    for _ in range(4):
        itn, _, flag, r = _minres_kernel(
            mat.indptr.astype(np.int64), mat.indices.astype(np.int64), mat.data,
            bb, x, tol, bnorm, max_iter - total,
        )
        total += itn
        ratio = max(ratio, r)
        residual = float(np.linalg.norm(mat @ x - bb))
        if flag == 2:
            return x, SolveRecord(total, float("nan"), max_mean_ratio=ratio)
        if residual <= tol * bnorm or total >= max_iter:
            break
    return x, SolveRecord(total, residual / bnorm, max_mean_ratio=ratio)


def solve_pressure(
    B: SparseSymmetricOperator,
    b,
    tol: float = 1e-9,
    max_iter: Optional[int] = None,
    x0=None,
    log_to: Optional[list] = None,
) -> np.ndarray:
    """Solve ``B p = b`` for a zero-mean ``p`` with MINRES.

    ``b`` is mean-projected on entry.  The relative residual
    ``|B p - b| / |b|`` is at most ``tol`` on return.

    Raises
    ------
    SolverError
        On non-finite values or when ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise SolverError("non-finite right-hand side")
    p, rec = minres(B, b, tol=tol, max_iter=max_iter, x0=x0)
    if not math.isfinite(rec.residual) or not np.all(np.isfinite(p)):
        raise SolverError("MINRES produced non-finite values", rec.residual, rec.iterations)
    if rec.residual > tol:
        raise SolverError(
            f"MINRES did not converge in {rec.iterations} iterations "
            f"(relative residual {rec.residual:.3e})",
            rec.residual,
            rec.iterations,
        )
    if log_to is not None:
        log_to.append(rec)
    return p


class _DirectLaplacian:
    """Sparse LU of the facet Laplacian with the last unknown pinned."""

    def __init__(self, L: SparseSymmetricOperator):
        n = L.n
        self.n = n
        self.lu = spla.splu(L.matrix[: n - 1, : n - 1].tocsc()) if n > 1 else None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.n == 1:
            return np.zeros(1)
        p = np.zeros(self.n)
        p[:-1] = self.lu.solve(rhs[:-1] - rhs.mean())
        p -= p.mean()
        return p


def solve_pressure_multiphase(
    mesh: VoronoiMesh,
    rho,
    v,
    dt: float,
    p_prev=None,
    tol_outer: float = 1e-12,
    max_outer: int = 100,
    inner: str = "direct",
    inner_tol: float = 1e-10,
    log_to: Optional[list] = None,
) -> np.ndarray:
    """Pressure for a heterogeneous density field by fixed-point iteration.

    Each outer step solves the density-free Laplacian system
    ``-<lap p^(m+1)>_i = -(rho_i/dt) div(v)_i - (1/rho_i) grad rho_i . grad p^(m)_i``
    (multiplied through by ``|w_i|``, with the divergence in its
    zero-sum functional form) and stops once
    ``max_i |p^(m+1) - p^(m)| < tol_outer``.

    ``inner="minres"`` solves for the increment with MINRES at relative
    tolerance ``inner_tol``; ``inner="direct"`` factorises the Laplacian once
    per call with a sparse LU.
    """
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (mesh.n,)).copy()
    if not np.all(rho > 0):
        raise ValueError("density must be positive")
    L = assemble_B(mesh, 1.0)
    base = rho * ops.divergence_functional(mesh, v) / dt
    grad_rho = ops.strong_gradient(mesh, rho)
    coupled = bool(np.any(grad_rho))
    p = np.zeros(mesh.n) if p_prev is None else np.array(p_prev, dtype=float)
    p -= p.mean()

    def rhs_of(q):
        if not coupled:
            return base
        gq = ops.strong_gradient(mesh, q)
        return base - mesh.volume / rho * np.einsum("ij,ij->i", grad_rho, gq)

    direct = _DirectLaplacian(L) if inner == "direct" else None
    if inner not in ("direct", "minres"):
        raise ValueError(f"unknown inner solver {inner!r}")
    iters = 0
    increment = float("inf")
    ratio = 0.0
    for outer in range(1, max_outer + 1):
        rhs = rhs_of(p)
        rhs = rhs - rhs.mean()
        if direct is not None:
            p_new = direct.solve(rhs)
        else:
            res = rhs - L.matrix @ p
            delta, rec = minres(L, res, tol=inner_tol)
            iters += rec.iterations
            ratio = max(ratio, rec.max_mean_ratio)
            if not math.isfinite(rec.residual):
                raise SolverError("inner MINRES produced non-finite values", rec.residual, iters)
            p_new = p + delta
            p_new -= p_new.mean()
        if not np.all(np.isfinite(p_new)):
            raise SolverError("fixed-point iterate is not finite", increment, outer)
        increment = float(np.max(np.abs(p_new - p))) if mesh.n else 0.0
        p = p_new
        if not coupled or increment < tol_outer:
            if log_to is not None:
                log_to.append(SolveRecord(iters, increment, outer, increment, ratio))
            return p
    raise SolverError(
        f"fixed-point pressure iteration did not converge in {max_outer} steps "
        f"(last increment {increment:.3e})",
        increment,
        max_outer,
    )
