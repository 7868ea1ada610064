"""Independent reference implementations used to check the package.

Nothing here imports the code under test beyond plain data types.
"""
from __future__ import annotations

import math

import numpy as np


def clip_halfplane(poly, a, b, c, eps=0.0):
    """Keep the part of ``poly`` (list of (x, y)) where ``a*x + b*y <= c``."""
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        fp = a * p[0] + b * p[1] - c
        fq = a * q[0] + b * q[1] - c
        if fp <= eps:
            out.append(p)
        if (fp < -eps and fq > eps) or (fp > eps and fq < -eps):
            t = fp / (fp - fq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def brute_force_cell(points, i, box):
    """Voronoi cell of seed ``i`` by clipping the box with every other seed's bisector."""
    xmin, xmax, ymin, ymax = box
    poly = [(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)]
    xi, yi = points[i]
    for j in range(len(points)):
        if j == i:
            continue
        xj, yj = points[j]
        a, b = xj - xi, yj - yi
        c = 0.5 * (xj * xj + yj * yj - xi * xi - yi * yi)
        poly = clip_halfplane(poly, a, b, c)
        if not poly:
            break
    return _dedupe(poly)


def _dedupe(poly, tol=1e-13):
    out = []
    for p in poly:
        if not out or math.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > tol:
            out.append(p)
    if len(out) > 1 and math.hypot(out[0][0] - out[-1][0], out[0][1] - out[-1][1]) <= tol:
        out.pop()
    return np.array(out, dtype=float).reshape(-1, 2)


def polygon_area_centroid(poly):
    x, y = poly[:, 0], poly[:, 1]
    xs, ys = np.roll(x, -1), np.roll(y, -1)
    cross = x * ys - xs * y
    area = 0.5 * cross.sum()
    cx = ((x + xs) * cross).sum() / (6 * area)
    cy = ((y + ys) * cross).sum() / (6 * area)
    return area, np.array([cx, cy])


def hausdorff(p, q):
    """Symmetric Hausdorff distance between two point sets."""
    d = np.hypot(p[:, None, 0] - q[None, :, 0], p[:, None, 1] - q[None, :, 1])
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def central_difference(f, x, h):
    """Gradient of scalar ``f`` at ``x`` (flat array) by central differences."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[k] += h
        xm.flat[k] -= h
        g.flat[k] = (f(xp) - f(xm)) / (2 * h)
    return g


def dense_neumann_solve(B, b):
    """Minimum-norm solution of the singular system by pseudo-inverse."""
    return np.linalg.pinv(np.asarray(B, dtype=float)) @ b


def random_seeds(rng, n, box=(0.0, 1.0, 0.0, 1.0), min_sep=None):
    """Uniform seeds strictly inside ``box``; optional minimum separation by rejection."""
    xmin, xmax, ymin, ymax = box
    if min_sep is None:
        pts = rng.uniform([xmin, ymin], [xmax, ymax], size=(n, 2))
        return pts
    pts = []
    while len(pts) < n:
        p = rng.uniform([xmin, ymin], [xmax, ymax])
        if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= min_sep for q in pts):
            pts.append(p)
    return np.array(pts)
