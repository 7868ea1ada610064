"""Voronoi tessellation of a rectangular box from moving seeds.

Cells are built directly, one at a time, by clipping the box with the
perpendicular-bisector half-planes of nearby seeds.  Nearby seeds are found
through a uniform bucket grid of side ``2 * delta_r``; buckets are visited in
ascending distance from the seed's own bucket and the sweep stops as soon as
the remaining buckets are provably too far away to cut the cell.

Every cell is independent of the others, so the kernel runs under
``numba.prange`` and writes only its own output slot.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "DomainBox",
    "BucketGrid",
    "FacetGeom",
    "VoronoiCell",
    "VoronoiMesh",
    "MeshError",
    "WALL_XMIN",
    "WALL_XMAX",
    "WALL_YMIN",
    "WALL_YMAX",
    "WALL_NORMALS",
    "build_bucket_grid",
    "build_cell",
    "build_mesh",
    "cell_volume_gradient",
    "format_mesh_dump",
]

WALL_XMIN, WALL_XMAX, WALL_YMIN, WALL_YMAX = 0, 1, 2, 3
WALL_NAMES = ("xmin", "xmax", "ymin", "ymax")
WALL_NORMALS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])

# polygon edges carry a label: seed index (>= 0) or -1 - wall id
MAX_VERTS = 64
_DEGENERATE = 1e-12  # facet length threshold, relative to delta_r
_ON_LINE = 1e-13  # half-plane membership slack, relative to delta_r


class MeshError(ValueError):
    """Invalid seed configuration for a tessellation."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class DomainBox:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate domain box {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.xmax, self.ymin, self.ymax])

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Strict interior membership for an ``(n, 2)`` array."""
        p = np.asarray(points, dtype=float)
        return (
            (p[:, 0] > self.xmin)
            & (p[:, 0] < self.xmax)
            & (p[:, 1] > self.ymin)
            & (p[:, 1] < self.ymax)
        )

    def wall_distance(self, points: np.ndarray, wall: int) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if wall == WALL_XMIN:
            return p[..., 0] - self.xmin
        if wall == WALL_XMAX:
            return self.xmax - p[..., 0]
        if wall == WALL_YMIN:
            return p[..., 1] - self.ymin
        return self.ymax - p[..., 1]


@dataclass
class BucketGrid:
    """Cell list: seeds sorted into square buckets of side ``h = 2 * delta_r``.

    Buckets use half-open intervals ``[low, high)``; the last row and column
    are closed so that every point of the box has exactly one bucket.
    """

    origin: tuple[float, float]
    h: float
    delta_r: float
    nx: int
    ny: int
    start: np.ndarray  # (nx*ny + 1,) CSR offsets, bucket id = iy*nx + ix
    items: np.ndarray  # seed indices grouped by bucket
    seed_ix: np.ndarray
    seed_iy: np.ndarray

    def bucket(self, ix: int, iy: int) -> np.ndarray:
        b = iy * self.nx + ix
        return self.items[self.start[b] : self.start[b + 1]]

    @property
    def populations(self) -> np.ndarray:
        return np.diff(self.start).reshape(self.ny, self.nx)


@dataclass(frozen=True)
class FacetGeom:
    neighbor: int  # seed index, or -1 - wall id
    length: float
    midpoint: np.ndarray
    distance: Optional[float]  # inter-seed distance, None on walls
    normal: np.ndarray

    @property
    def is_wall(self) -> bool:
        return self.neighbor < 0

    @property
    def wall(self) -> Optional[int]:
        return -1 - self.neighbor if self.neighbor < 0 else None


@dataclass(frozen=True)
class VoronoiCell:
    index: int
    vertices: np.ndarray
    facets: list[FacetGeom]
    volume: float
    centroid: np.ndarray
    surface: np.ndarray
    radius: float

    @property
    def is_interior(self) -> bool:
        return not any(f.is_wall for f in self.facets)


@dataclass
class VoronoiMesh:
    """A full tessellation plus flat facet arrays used by the operators.

    Seed-seed facets are stored twice: once per unordered pair (``pair_*``)
    and once per directed facet ``(i, j)`` grouped by owning cell
    (``facet_*``, CSR layout through ``facet_ptr``).  Both views share the
    same length and midpoint, so reciprocity holds bit for bit.
    """

    domain: DomainBox
    delta_r: float
    positions: np.ndarray
    grid: BucketGrid
    vert_ptr: np.ndarray
    vertices: np.ndarray
    edge_labels: np.ndarray
    volume: np.ndarray
    centroid: np.ndarray
    radius: np.ndarray
    surface: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_len: np.ndarray
    pair_mid: np.ndarray
    pair_r: np.ndarray
    facet_ptr: np.ndarray
    facet_row: np.ndarray
    facet_nbr: np.ndarray
    facet_pair: np.ndarray
    wall_cell: np.ndarray
    wall_id: np.ndarray
    wall_len: np.ndarray
    wall_mid: np.ndarray
    build_time: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def facet_len(self) -> np.ndarray:
        return self.pair_len[self.facet_pair]

    @property
    def facet_r(self) -> np.ndarray:
        return self.pair_r[self.facet_pair]

    @property
    def facet_mid(self) -> np.ndarray:
        return self.pair_mid[self.facet_pair]

    @property
    def facet_coef(self) -> np.ndarray:
        """``|Gamma_ij| / r_ij`` for every directed facet."""
        if "coef" not in self._cache:
            self._cache["coef"] = self.facet_len / self.facet_r
        return self._cache["coef"]

    @property
    def interior(self) -> np.ndarray:
        """Mask of cells without a (non-degenerate) wall facet."""
        if "interior" not in self._cache:
            touch = np.zeros(self.n, dtype=bool)
            touch[self.wall_cell] = True
            self._cache["interior"] = ~touch
        return self._cache["interior"]

    def neighbors(self, i: int) -> np.ndarray:
        return self.facet_nbr[self.facet_ptr[i] : self.facet_ptr[i + 1]]

    def cell_vertices(self, i: int) -> np.ndarray:
        return self.vertices[self.vert_ptr[i] : self.vert_ptr[i + 1]]

    def facets(self, i: int) -> list[FacetGeom]:
        x = self.positions[i]
        out = []
        for k in range(self.facet_ptr[i], self.facet_ptr[i + 1]):
            j = int(self.facet_nbr[k])
            p = self.facet_pair[k]
            r = float(self.pair_r[p])
            out.append(
                FacetGeom(
                    neighbor=j,
                    length=float(self.pair_len[p]),
                    midpoint=self.pair_mid[p].copy(),
                    distance=r,
                    normal=(self.positions[j] - x) / r,
                )
            )
        for k in np.flatnonzero(self.wall_cell == i):
            w = int(self.wall_id[k])
            out.append(
                FacetGeom(
                    neighbor=-1 - w,
                    length=float(self.wall_len[k]),
                    midpoint=self.wall_mid[k].copy(),
                    distance=None,
                    normal=WALL_NORMALS[w].copy(),
                )
            )
        return out

    def cell(self, i: int) -> VoronoiCell:
        return VoronoiCell(
            index=i,
            vertices=self.cell_vertices(i).copy(),
            facets=self.facets(i),
            volume=float(self.volume[i]),
            centroid=self.centroid[i].copy(),
            surface=self.surface[i].copy(),
            radius=float(self.radius[i]),
        )

    def nnz_per_row(self) -> float:
        """Mean non-zeros per row of the facet-coupling (pressure) matrix."""
        return float(self.n + self.facet_nbr.size) / self.n


# ---------------------------------------------------------------------------
# bucket grid


def build_bucket_grid(positions, domain: DomainBox, delta_r: float) -> BucketGrid:
    """Sort seeds into a cell list of bucket side ``2 * delta_r``.

    Raises
    ------
    MeshError
        If a seed lies outside the open box, or two seeds coincide
        (closer than ``1e-12 * delta_r``).
    """
    if not delta_r > 0:
        raise MeshError(f"delta_r must be positive, got {delta_r}")
    pos = np.ascontiguousarray(positions, dtype=float).reshape(-1, 2)
    n = pos.shape[0]
    if n:
        outside = np.flatnonzero(~domain.contains(pos) | ~np.isfinite(pos).all(axis=1))
        if outside.size:
            k = int(outside[0])
            raise MeshError(f"seed {k} at {tuple(pos[k])} is outside the domain", k)
        if n > 1:
            close = cKDTree(pos).query_pairs(_DEGENERATE * delta_r, output_type="ndarray")
            if close.size:
                k = int(close.min(axis=1).min())
                raise MeshError(f"seed {k} duplicates another seed", k)

    h = 2.0 * delta_r
    nx = max(1, int(math.ceil(domain.width / h - 1e-9)))
    ny = max(1, int(math.ceil(domain.height / h - 1e-9)))
    ix = np.minimum(np.floor((pos[:, 0] - domain.xmin) / h).astype(np.int64), nx - 1)
    iy = np.minimum(np.floor((pos[:, 1] - domain.ymin) / h).astype(np.int64), ny - 1)
    bid = iy * nx + ix
    items = np.argsort(bid, kind="stable").astype(np.int64)
    start = np.zeros(nx * ny + 1, dtype=np.int64)
    np.cumsum(np.bincount(bid, minlength=nx * ny), out=start[1:])
    return BucketGrid(
        origin=(domain.xmin, domain.ymin),
        h=h,
        delta_r=float(delta_r),
        nx=nx,
        ny=ny,
        start=start,
        items=items,
        seed_ix=ix,
        seed_iy=iy,
    )


def _sweep_order(nx: int, ny: int, h: float):
    """Bucket offsets sorted by distance between bucket rectangles.

    Ties are broken by Chebyshev ring and then row-major order, so the
    sequence is deterministic.  Ascending distance is what makes the
    stopping rule a valid lower bound on every bucket not yet visited.
    """
    dx, dy = np.meshgrid(np.arange(-(nx - 1), nx), np.arange(-(ny - 1), ny))
    dx = dx.ravel()
    dy = dy.ravel()
    gx = np.maximum(np.abs(dx) - 1, 0)
    gy = np.maximum(np.abs(dy) - 1, 0)
    d2 = gx * gx + gy * gy
    ring = np.maximum(np.abs(dx), np.abs(dy))
    order = np.lexsort((dx, dy, ring, d2))
    return (
        dx[order].astype(np.int64),
        dy[order].astype(np.int64),
        h * np.sqrt(d2[order].astype(float)),
    )


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, inline="always")
def _clip(px, py, lab, nv, tx, ty, tl, xi, yi, xj, yj, j, on_line, merge):
    """Cut polygon (px, py, lab)[:nv] by the half-plane closer to i than j.

    Returns the new vertex count; -1 on overflow.
    """
    dx = xj - xi
    dy = yj - yi
    dist = math.sqrt(dx * dx + dy * dy)
    ux = dx / dist
    uy = dy / dist
    mx = 0.5 * (xi + xj)
    my = 0.5 * (yi + yj)
    any_out = False
    for k in range(nv):
        if (px[k] - mx) * ux + (py[k] - my) * uy > on_line:
            any_out = True
            break
    if not any_out:
        return nv
    m = 0
    sa = (px[nv - 1] - mx) * ux + (py[nv - 1] - my) * uy
    for k in range(nv):
        a = nv - 1 if k == 0 else k - 1
        sb = (px[k] - mx) * ux + (py[k] - my) * uy
        # edge a -> k carries label lab[a]
        a_in = sa <= on_line
        b_in = sb <= on_line
        if a_in != b_in:
            t = sa / (sa - sb)
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            qx = px[a] + t * (px[k] - px[a])
            qy = py[a] + t * (py[k] - py[a])
            if m + 2 > tx.shape[0]:
                return -1
            if a_in:
                # leaving: exit point starts the new bisector edge
                tx[m] = qx
                ty[m] = qy
                tl[m] = j
                m += 1
            else:
                # entering: entry point continues the original edge
                tx[m] = qx
                ty[m] = qy
                tl[m] = lab[a]
                m += 1
        if b_in:
            if m + 1 > tx.shape[0]:
                return -1
            tx[m] = px[k]
            ty[m] = py[k]
            tl[m] = lab[k]
            m += 1
        sa = sb
    # drop near-duplicate consecutive vertices (degenerate facets)
    nv = 0
    for k in range(m):
        if nv > 0:
            ex = tx[k] - px[nv - 1]
            ey = ty[k] - py[nv - 1]
            if math.sqrt(ex * ex + ey * ey) < merge:
                lab[nv - 1] = tl[k]
                continue
        px[nv] = tx[k]
        py[nv] = ty[k]
        lab[nv] = tl[k]
        nv += 1
    while nv > 1:
        ex = px[0] - px[nv - 1]
        ey = py[0] - py[nv - 1]
        if math.sqrt(ex * ex + ey * ey) < merge:
            nv -= 1
        else:
            break
    return nv


@numba.njit(cache=True, inline="always")
def _radius(px, py, nv, xi, yi):
    r2 = 0.0
    for k in range(nv):
        ex = px[k] - xi
        ey = py[k] - yi
        d2 = ex * ex + ey * ey
        if d2 > r2:
            r2 = d2
    return math.sqrt(r2)


@numba.njit(cache=True)
def _build_one(
    i, pos, box, h, nx, ny, bstart, bitems, six, siy, offx, offy, offd,
    warm_ptr, warm_idx, use_warm, on_line, merge, px, py, lab, tx, ty, tl,
):
    xi = pos[i, 0]
    yi = pos[i, 1]
    px[0] = box[0]; py[0] = box[2]; lab[0] = -3  # bottom edge, ymin wall
    px[1] = box[1]; py[1] = box[2]; lab[1] = -2  # right edge, xmax wall
    px[2] = box[1]; py[2] = box[3]; lab[2] = -4  # top edge, ymax wall
    px[3] = box[0]; py[3] = box[3]; lab[3] = -1  # left edge, xmin wall
    nv = 4
    clips = 0
    if use_warm:
        for k in range(warm_ptr[i], warm_ptr[i + 1]):
            j = warm_idx[k]
            if j == i:
                continue
            nv = _clip(px, py, lab, nv, tx, ty, tl, xi, yi, pos[j, 0], pos[j, 1], j, on_line, merge)
            clips += 1
            if nv < 0:
                return nv, clips
    r = _radius(px, py, nv, xi, yi)
    bx0 = six[i]
    by0 = siy[i]
    for k in range(offx.shape[0]):
        if r < 0.5 * offd[k]:
            break
        bx = bx0 + offx[k]
        by = by0 + offy[k]
        if bx < 0 or bx >= nx or by < 0 or by >= ny:
            continue
        b = by * nx + bx
        for q in range(bstart[b], bstart[b + 1]):
            j = bitems[q]
            if j == i:
                continue
            xj = pos[j, 0]
            yj = pos[j, 1]
            ex = xj - xi
            ey = yj - yi
            if 0.5 * math.sqrt(ex * ex + ey * ey) > r:
                continue
            nv = _clip(px, py, lab, nv, tx, ty, tl, xi, yi, xj, yj, j, on_line, merge)
            clips += 1
            if nv < 0:
                return nv, clips
            r = _radius(px, py, nv, xi, yi)
    return nv, clips


@numba.njit(cache=True, parallel=True)
def _build_all(
    pos, box, h, nx, ny, bstart, bitems, six, siy, offx, offy, offd,
    warm_ptr, warm_idx, use_warm, on_line, merge, out_x, out_y, out_lab, out_nv,
):
    n = pos.shape[0]
    maxv = out_x.shape[1]
    for i in numba.prange(n):
        px = np.empty(maxv)
        py = np.empty(maxv)
        lab = np.empty(maxv, dtype=np.int64)
        tx = np.empty(maxv)
        ty = np.empty(maxv)
        tl = np.empty(maxv, dtype=np.int64)
        nv, _ = _build_one(
            i, pos, box, h, nx, ny, bstart, bitems, six, siy, offx, offy, offd,
            warm_ptr, warm_idx, use_warm, on_line, merge, px, py, lab, tx, ty, tl,
        )
        out_nv[i] = nv
        for k in range(max(nv, 0)):
            out_x[i, k] = px[k]
            out_y[i, k] = py[k]
            out_lab[i, k] = lab[k]


@numba.njit(cache=True, parallel=True)
def _cell_geometry(pos, out_x, out_y, out_nv, volume, centroid, radius, elen, emx, emy):
    n = pos.shape[0]
    for i in numba.prange(n):
        xi = pos[i, 0]
        yi = pos[i, 1]
        nv = out_nv[i]
        a2 = 0.0
        cx = 0.0
        cy = 0.0
        r2 = 0.0
        for k in range(nv):
            k1 = k + 1 if k + 1 < nv else 0
            ax = out_x[i, k] - xi
            ay = out_y[i, k] - yi
            bx = out_x[i, k1] - xi
            by = out_y[i, k1] - yi
            cr = ax * by - bx * ay
            a2 += cr
            cx += (ax + bx) * cr
            cy += (ay + by) * cr
            d2 = ax * ax + ay * ay
            if d2 > r2:
                r2 = d2
            ex = bx - ax
            ey = by - ay
            elen[i, k] = math.sqrt(ex * ex + ey * ey)
            emx[i, k] = 0.5 * (out_x[i, k] + out_x[i, k1])
            emy[i, k] = 0.5 * (out_y[i, k] + out_y[i, k1])
        volume[i] = 0.5 * a2
        centroid[i, 0] = xi + cx / (3.0 * a2)
        centroid[i, 1] = yi + cy / (3.0 * a2)
        radius[i] = math.sqrt(r2)


# ---------------------------------------------------------------------------
# public construction API


def _warm_arrays(n: int, warm_neighbors):
    if warm_neighbors is None:
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), False
    ptr, idx = warm_neighbors
    return np.asarray(ptr, dtype=np.int64), np.asarray(idx, dtype=np.int64), True


def _run_kernel(pos, domain, grid, warm, cells: Optional[np.ndarray] = None):
    n = pos.shape[0]
    offx, offy, offd = _sweep_order(grid.nx, grid.ny, grid.h)
    warm_ptr, warm_idx, use_warm = _warm_arrays(n, warm)
    out_x = np.zeros((n, MAX_VERTS))
    out_y = np.zeros((n, MAX_VERTS))
    out_lab = np.zeros((n, MAX_VERTS), dtype=np.int64)
    out_nv = np.zeros(n, dtype=np.int64)
    _build_all(
        pos, domain.as_array(), grid.h, grid.nx, grid.ny, grid.start, grid.items,
        grid.seed_ix, grid.seed_iy, offx, offy, offd, warm_ptr, warm_idx, use_warm,
        _ON_LINE * grid.delta_r, _DEGENERATE * grid.delta_r, out_x, out_y, out_lab, out_nv,
    )
    bad = np.flatnonzero(out_nv < 3)
    if bad.size:
        k = int(bad[0])
        raise MeshError(f"cell {k} degenerated during clipping (vertex overflow or collapse)", k)
    return out_x, out_y, out_lab, out_nv


def build_cell(
    i: int,
    positions,
    grid: BucketGrid,
    domain: DomainBox,
    warm_neighbors: Optional[Sequence[int]] = None,
) -> VoronoiCell:
    """Build a single Voronoi cell.

    The facet records of a standalone cell come straight from its own
    polygon; :func:`build_mesh` additionally reconciles shared facets between
    neighbouring cells.
    """
    pos = np.ascontiguousarray(positions, dtype=float).reshape(-1, 2)
    if not 0 <= i < pos.shape[0]:
        raise IndexError(f"seed index {i} out of range")
    warm = None
    if warm_neighbors is not None:
        idx = np.asarray(list(warm_neighbors), dtype=np.int64)
        ptr = np.zeros(pos.shape[0] + 1, dtype=np.int64)
        ptr[i + 1 :] = idx.size
        warm = (ptr, idx)
    # single-cell build through the same kernel on a one-seed index set
    offx, offy, offd = _sweep_order(grid.nx, grid.ny, grid.h)
    warm_ptr, warm_idx, use_warm = _warm_arrays(pos.shape[0], warm)
    px, py, tx, ty = (np.empty(MAX_VERTS) for _ in range(4))
    lab = np.empty(MAX_VERTS, dtype=np.int64)
    tl = np.empty(MAX_VERTS, dtype=np.int64)
    nv, _ = _build_one(
        i, pos, domain.as_array(), grid.h, grid.nx, grid.ny, grid.start, grid.items,
        grid.seed_ix, grid.seed_iy, offx, offy, offd, warm_ptr, warm_idx, use_warm,
        _ON_LINE * grid.delta_r, _DEGENERATE * grid.delta_r, px, py, lab, tx, ty, tl,
    )
    if nv < 3:
        raise MeshError(f"cell {i} degenerated during clipping", i)
    verts = np.column_stack([px[:nv], py[:nv]])
    labels = lab[:nv].copy()
    x = pos[i]
    rel = verts - x
    nxt = np.roll(rel, -1, axis=0)
    cr = rel[:, 0] * nxt[:, 1] - nxt[:, 0] * rel[:, 1]
    area = 0.5 * cr.sum()
    centroid = x + ((rel + nxt) * cr[:, None]).sum(axis=0) / (6.0 * area)
    seg = np.roll(verts, -1, axis=0) - verts
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    mids = verts + 0.5 * seg
    facets = []
    surface = np.zeros(2)
    for k in range(nv):
        if lengths[k] < _DEGENERATE * grid.delta_r:
            continue
        j = int(labels[k])
        if j >= 0:
            d = pos[j] - x
            r = float(np.hypot(*d))
            facets.append(FacetGeom(j, float(lengths[k]), mids[k], r, d / r))
        else:
            w = -1 - j
            surface += lengths[k] * WALL_NORMALS[w]
            facets.append(FacetGeom(j, float(lengths[k]), mids[k], None, WALL_NORMALS[w].copy()))
    return VoronoiCell(
        index=i,
        vertices=verts,
        facets=facets,
        volume=float(area),
        centroid=centroid,
        surface=surface,
        radius=float(np.sqrt((rel**2).sum(axis=1)).max()),
    )


def build_mesh(
    positions,
    domain: DomainBox,
    delta_r: float,
    previous: Optional[VoronoiMesh] = None,
) -> VoronoiMesh:
    """Tessellate ``domain`` by the seeds ``positions``.

    When ``previous`` is given (same seed count), each cell is first cut by
    its neighbours from the previous mesh, which usually leaves the bucket
    sweep with nothing left to clip.  The result does not depend on the warm
    start beyond round-off.
    """
    t0 = time.perf_counter()
    pos = np.ascontiguousarray(positions, dtype=float).reshape(-1, 2)
    n = pos.shape[0]
    grid = build_bucket_grid(pos, domain, delta_r)
    warm = None
    if previous is not None and previous.n == n:
        warm = (previous.facet_ptr, previous.facet_nbr)
    out_x, out_y, out_lab, out_nv = _run_kernel(pos, domain, grid, warm)

    volume = np.empty(n)
    centroid = np.empty((n, 2))
    radius = np.empty(n)
    elen = np.zeros((n, MAX_VERTS))
    emx = np.zeros((n, MAX_VERTS))
    emy = np.zeros((n, MAX_VERTS))
    _cell_geometry(pos, out_x, out_y, out_nv, volume, centroid, radius, elen, emx, emy)

    valid = np.arange(MAX_VERTS)[None, :] < out_nv[:, None]
    cell_of = np.broadcast_to(np.arange(n)[:, None], valid.shape)[valid]
    lab = out_lab[valid]
    length = elen[valid]
    mid = np.column_stack([emx[valid], emy[valid]])
    vert_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(out_nv, out=vert_ptr[1:])
    vertices = np.column_stack([out_x[valid], out_y[valid]])

    keep = length >= _DEGENERATE * delta_r
    seed = keep & (lab >= 0)
    wall = keep & (lab < 0)

    # reconcile each shared facet: it must appear in both cells
    ci = cell_of[seed]
    cj = lab[seed]
    a = np.minimum(ci, cj)
    b = np.maximum(ci, cj)
    key = a * n + b
    order = np.argsort(key, kind="stable")
    key = key[order]
    first = np.flatnonzero((key[:-1] == key[1:]) if key.size > 1 else np.zeros(0, bool))
    # a key may appear at most twice; drop unmatched one-sided facets
    o1 = order[first]
    o2 = order[first + 1]
    s_len = length[seed]
    s_mid = mid[seed]
    pair_i = a[o1]
    pair_j = b[o1]
    pair_len = 0.5 * (s_len[o1] + s_len[o2])
    pair_mid = 0.5 * (s_mid[o1] + s_mid[o2])
    dxy = pos[pair_j] - pos[pair_i]
    pair_r = np.hypot(dxy[:, 0], dxy[:, 1])

    npair = pair_i.size
    rows = np.concatenate([pair_i, pair_j])
    cols = np.concatenate([pair_j, pair_i])
    pid = np.concatenate([np.arange(npair), np.arange(npair)])
    order = np.lexsort((cols, rows))
    facet_row = rows[order]
    facet_nbr = cols[order]
    facet_pair = pid[order]
    facet_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(facet_row, minlength=n), out=facet_ptr[1:])

    wall_cell = cell_of[wall]
    wall_id = -1 - lab[wall]
    wall_len = length[wall]
    wall_mid = mid[wall]
    surface = np.zeros((n, 2))
    wn = WALL_NORMALS[wall_id] * wall_len[:, None]
    surface[:, 0] = np.bincount(wall_cell, weights=wn[:, 0], minlength=n)
    surface[:, 1] = np.bincount(wall_cell, weights=wn[:, 1], minlength=n)

    return VoronoiMesh(
        domain=domain,
        delta_r=float(delta_r),
        positions=pos.copy(),
        grid=grid,
        vert_ptr=vert_ptr,
        vertices=vertices,
        edge_labels=lab.copy(),
        volume=volume,
        centroid=centroid,
        radius=radius,
        surface=surface,
        pair_i=pair_i,
        pair_j=pair_j,
        pair_len=pair_len,
        pair_mid=pair_mid,
        pair_r=pair_r,
        facet_ptr=facet_ptr,
        facet_row=facet_row,
        facet_nbr=facet_nbr,
        facet_pair=facet_pair,
        wall_cell=wall_cell,
        wall_id=wall_id,
        wall_len=wall_len,
        wall_mid=wall_mid,
        build_time=time.perf_counter() - t0,
    )


def cell_volume_gradient(mesh: VoronoiMesh, i: int, j: int) -> np.ndarray:
    """Derivative of the volume of cell ``i`` with respect to seed ``j``.

    Off-diagonal: ``-(|G_ij| / r_ij) (m_ij - x_j)``, zero for non-neighbours.
    Diagonal: minus the sum of the off-diagonal terms minus ``S_i``, where
    ``S_i`` integrates the outward normal over the wall part of the cell.
    """
    x = mesh.positions
    lo, hi = mesh.facet_ptr[i], mesh.facet_ptr[i + 1]
    nbr = mesh.facet_nbr[lo:hi]
    pid = mesh.facet_pair[lo:hi]
    coef = (mesh.pair_len[pid] / mesh.pair_r[pid])[:, None]
    terms = -coef * (mesh.pair_mid[pid] - x[nbr])
    if i != j:
        hit = np.flatnonzero(nbr == j)
        return terms[hit[0]].copy() if hit.size else np.zeros(2)
    return -terms.sum(axis=0) - mesh.surface[i]


def format_mesh_dump(mesh: VoronoiMesh) -> str:
    """Line-oriented polygon dump.

    One line per cell: ``id x y nv vx1 vy1 ... vxn vyn`` (counter-clockwise
    vertices, numbers with 17 significant digits).
    """
    lines = ["# id x y nv vertices(x y)..."]
    for i in range(mesh.n):
        v = mesh.cell_vertices(i)
        parts = [str(i), f"{mesh.positions[i, 0]:.17g}", f"{mesh.positions[i, 1]:.17g}", str(len(v))]
        parts.extend(f"{c:.17g}" for c in v.ravel())
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
