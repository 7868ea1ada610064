"""Point-wise discrete differential operators on a Voronoi mesh.

All operators act on whole fields at once and return one value per seed.
Sums run over seed-seed facets only: wall facets contribute nothing, which
amounts to a homogeneous Neumann condition.  Viscous wall terms are added
by the caller (see :mod:`silva.integrator`).

Conventions: ``f_ij = f_i - f_j`` and ``c_ij = |Gamma_ij| / r_ij``.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .voronoi import VoronoiMesh

__all__ = [
    "strong_gradient",
    "weak_gradient",
    "weak_divergence",
    "divergence_functional",
    "laplacian",
    "stabilized_gradient",
    "stabilizer_correction",
    "facet_sum",
    "strong_gradient_matrix",
]

DIM = 2


def facet_sum(mesh: VoronoiMesh, values: np.ndarray) -> np.ndarray:
    """Sum per-facet values into their owning cells.

    ``values`` has one entry (or row) per directed facet.  Accumulation
    order is fixed by the facet layout, so the result is reproducible.
    """
    n = mesh.n
    if values.ndim == 1:
        return np.bincount(mesh.facet_row, weights=values, minlength=n)
    out = np.empty((n,) + values.shape[1:])
    flat = values.reshape(values.shape[0], -1)
    for k in range(flat.shape[1]):
        out.reshape(n, -1)[:, k] = np.bincount(mesh.facet_row, weights=flat[:, k], minlength=n)
    return out


def _differences(mesh: VoronoiMesh, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[0] != mesh.n:
        raise ValueError(f"field has {f.shape[0]} entries, mesh has {mesh.n} seeds")
    return f[mesh.facet_row] - f[mesh.facet_nbr]


def strong_gradient(mesh: VoronoiMesh, f) -> np.ndarray:
    """Gradient exact for affine fields on interior cells.

    ``-(1/|w_i|) sum_j c_ij f_ij (m_ij - x_i)``.  Returns an ``(N, 2)`` array.
    """
    fij = _differences(mesh, f)
    arm = mesh.facet_mid - mesh.positions[mesh.facet_row]
    return -facet_sum(mesh, (mesh.facet_coef * fij)[:, None] * arm) / mesh.volume[:, None]


def weak_gradient(mesh: VoronoiMesh, f) -> np.ndarray:
    """Dual of :func:`strong_gradient` under discrete integration by parts.

    ``(1/|w_i|) sum_j c_ij f_ij (m_ij - x_j)``.  Noisy point-wise; meant for
    divergence, right-hand sides and diagnostics.
    """
    fij = _differences(mesh, f)
    arm = mesh.facet_mid - mesh.positions[mesh.facet_nbr]
    return facet_sum(mesh, (mesh.facet_coef * fij)[:, None] * arm) / mesh.volume[:, None]


def weak_divergence(mesh: VoronoiMesh, v) -> np.ndarray:
    """Trace of the weak gradient applied to a vector field ``(N, 2)``."""
    vij = _differences(mesh, v)
    arm = mesh.facet_mid - mesh.positions[mesh.facet_nbr]
    return facet_sum(mesh, mesh.facet_coef * np.einsum("ij,ij->i", vij, arm)) / mesh.volume


def divergence_functional(mesh: VoronoiMesh, v) -> np.ndarray:
    """Coefficients ``d_k`` of the functional ``phi -> sum_i |w_i| v_i . grad_s(phi)_i``.

    Equals ``S_k . v_k - |w_k| div_w(v)_k`` and sums to zero exactly in
    exact arithmetic (the constant lies in the kernel of the strong
    gradient).  On interior cells it is minus the volume-weighted weak
    divergence.
    """
    v = np.asarray(v, dtype=float)
    return np.einsum("ij,ij->i", mesh.surface, v) - mesh.volume * weak_divergence(mesh, v)


def laplacian(mesh: VoronoiMesh, f) -> np.ndarray:
    """Finite-volume Laplacian ``-(1/|w_i|) sum_j c_ij f_ij``.

    Works for scalar ``(N,)`` and vector ``(N, 2)`` fields alike.
    """
    fij = _differences(mesh, f)
    coef = mesh.facet_coef if fij.ndim == 1 else mesh.facet_coef[:, None]
    vol = mesh.volume if fij.ndim == 1 else mesh.volume[:, None]
    return -facet_sum(mesh, coef * fij) / vol


def stabilizer_correction(mesh: VoronoiMesh, p, lap_p=None) -> np.ndarray:
    """The term removed from the strong pressure gradient.

    ``(d+1)/(2d) * max(<lap p>_i, 0) * (c_i - x_i)``; exactly zero where the
    discrete Laplacian is non-positive.
    """
    if lap_p is None:
        lap_p = laplacian(mesh, p)
    weight = (DIM + 1) / (2 * DIM) * np.maximum(lap_p, 0.0)
    return weight[:, None] * (mesh.centroid - mesh.positions)


def stabilized_gradient(mesh: VoronoiMesh, p, lap_p=None) -> np.ndarray:
    """Strong gradient minus the centroid-offset artefact of a positive Laplacian.

    Suppresses seed clustering at pressure minima (vortex cores) and keeps
    first-order exactness.
    """
    return strong_gradient(mesh, p) - stabilizer_correction(mesh, p, lap_p)


def strong_gradient_matrix(mesh: VoronoiMesh):
    """Sparse ``(2N, N)`` matrix of :func:`strong_gradient` (x rows, then y rows)."""
    n = mesh.n
    row = mesh.facet_row
    arm = mesh.facet_mid - mesh.positions[row]
    w = (mesh.facet_coef / mesh.volume[row])[:, None] * arm
    blocks = []
    for k in range(DIM):
        # -(1/|w_i|) c_ij (phi_i - phi_j) arm_k
        diag = -np.bincount(row, weights=w[:, k], minlength=n)
        m = sparse.coo_matrix((w[:, k], (row, mesh.facet_nbr)), shape=(n, n))
        blocks.append((m + sparse.diags(diag)).tocsr())
    return sparse.vstack(blocks).tocsr()
