"""Triangle meshes, spatial indices and exact distance / sign oracles."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# cap on (query, triangle) pairs evaluated at once
_PAIR_BUDGET = 1_000_000

# |w - 0.5| below this is treated as an undecidable sign
WINDING_AMBIGUITY = 1e-3


class DegenerateMeshError(ValueError):
    pass


class AmbiguousSignError(ValueError):
    """Raised when the winding number cannot separate inside from outside."""

    def __init__(self, points, winding):
        self.points = np.asarray(points)
        self.winding = np.asarray(winding)
        super().__init__(
            f"{len(self.points)} point(s) with winding number within "
            f"{WINDING_AMBIGUITY} of 0.5, first at {self.points[0].tolist()}"
        )


@dataclass(eq=False)
class TriangleMesh:
    """Indexed triangle mesh.

    ``scale`` is the number of world units per mesh unit, so after
    :func:`normalize_unit_cube` the pre-normalization longest bounding-box
    side is still available as :attr:`bbox_longest_side`.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    scale: float = 1.0
    _index: "MeshIndex | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def extent(self) -> np.ndarray:
        if len(self.vertices) == 0:
            return np.zeros(3)
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)

    @property
    def longest_side(self) -> float:
        """Longest bounding-box side in mesh units."""
        return float(self.extent.max())

    @property
    def bbox_longest_side(self) -> float:
        """Longest bounding-box side in world units (the scale symbol L)."""
        return self.longest_side * self.scale

    @property
    def corners(self):
        t = self.triangles
        return self.vertices[t[:, 0]], self.vertices[t[:, 1]], self.vertices[t[:, 2]]

    def face_normals(self, unit=True):
        a, b, c = self.corners
        n = np.cross(b - a, c - a)
        if unit:
            length = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(length > 0, length, 1.0)
        return n

    def areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    @property
    def watertight(self) -> bool:
        return is_watertight(self.triangles)

    @property
    def index(self) -> "MeshIndex":
        if self._index is None:
            self._index = MeshIndex(self.vertices, self.triangles)
        return self._index

    def copy(self, vertices=None, scale=None):
        return TriangleMesh(
            self.vertices.copy() if vertices is None else vertices,
            self.triangles.copy(),
            self.scale if scale is None else scale,
        )


def edge_counts(triangles):
    """Return (unique undirected edges, number of triangles using each)."""
    t = np.asarray(triangles, dtype=np.int64)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def is_watertight(triangles) -> bool:
    if len(triangles) == 0:
        return False
    _, counts = edge_counts(triangles)
    return bool(np.all(counts == 2))


def normalize_unit_cube(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box at the origin and scale the longest side to 1."""
    if len(mesh.vertices) == 0 or len(mesh.triangles) == 0:
        raise DegenerateMeshError("cannot normalize an empty mesh")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    side = float((hi - lo).max())
    if not side > 0:
        raise DegenerateMeshError("mesh has zero extent")
    center = 0.5 * (lo + hi)
    return mesh.copy(vertices=(mesh.vertices - center) / side, scale=mesh.scale * side)


# ---------------------------------------------------------------------------
# point-triangle distance


def closest_point_on_triangle(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p, all shaped (M, 3).

    Voronoi-region classification (Ericson, Real-Time Collision Detection
    5.1.5), vectorized.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe_div(num, den):
        return num / np.where(den != 0, den, 1.0)

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    v_ab = safe_div(d1, d1 - d3)
    w_ac = safe_div(d2, d2 - d6)
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    denom = va + vb + vc
    v_in = safe_div(vb, denom)
    w_in = safe_div(vc, denom)

    out = a + ab * v_in[:, None] + ac * w_in[:, None]
    # apply in reverse priority so earlier regions win
    out = np.where(on_bc[:, None], b + (c - b) * w_bc[:, None], out)
    out = np.where(on_ac[:, None], a + ac * w_ac[:, None], out)
    out = np.where(in_c[:, None], c, out)
    out = np.where(on_ab[:, None], a + ab * v_ab[:, None], out)
    out = np.where(in_b[:, None], b, out)
    out = np.where(in_a[:, None], a, out)
    return out


class MeshIndex:
    """Spatial index over a triangle mesh.

    Closest-triangle queries use a kd-tree over vertices for an upper bound
    and a kd-tree over triangle centroids (with per-triangle bounding
    spheres) to collect every triangle that could beat it; the result is
    exact. Ray queries test rays that enter the mesh bounding box against
    all triangles in chunks.
    """

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        if len(self.triangles) == 0:
            raise DegenerateMeshError("cannot index a mesh without triangles")
        self.a = self.vertices[self.triangles[:, 0]]
        self.b = self.vertices[self.triangles[:, 1]]
        self.c = self.vertices[self.triangles[:, 2]]
        self.centroids = (self.a + self.b + self.c) / 3.0
        self.radii = np.max(
            [np.linalg.norm(v - self.centroids, axis=1) for v in (self.a, self.b, self.c)], axis=0
        )
        self.max_radius = float(self.radii.max())
        used = np.unique(self.triangles)
        self._vertex_ids = used
        self._vertex_tree = cKDTree(self.vertices[used])
        self._centroid_tree = cKDTree(self.centroids)
        self.lo = self.vertices[used].min(axis=0)
        self.hi = self.vertices[used].max(axis=0)

    def closest(self, points):
        """Return (distances, closest points, triangle ids) for (N, 3) points.

        Ties between triangles resolve to the lowest triangle id.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(pts)
        dist = np.empty(n)
        cpts = np.empty((n, 3))
        tids = np.empty(n, dtype=np.int64)
        if n == 0:
            return dist, cpts, tids
        upper, _ = self._vertex_tree.query(pts)
        # small slack keeps the bound safe against rounding in the tree
        radius = upper * (1 + 1e-9) + self.max_radius + 1e-12
        cand = self._centroid_tree.query_ball_point(pts, radius)
        lens = np.fromiter((len(c) for c in cand), dtype=np.int64, count=n)
        start = 0
        while start < n:
            stop = start + 1
            total = lens[start]
            while stop < n and total + lens[stop] <= _PAIR_BUDGET:
                total += lens[stop]
                stop += 1
            self._closest_chunk(pts, upper, cand, lens, start, stop, dist, cpts, tids)
            start = stop
        return dist, cpts, tids

    def _closest_chunk(self, pts, upper, cand, lens, start, stop, dist, cpts, tids):
        qi = np.repeat(np.arange(start, stop), lens[start:stop])
        ti = np.fromiter(
            (t for c in cand[start:stop] for t in c), dtype=np.int64, count=len(qi)
        )
        # drop triangles whose bounding sphere is beyond the vertex bound
        gap = np.linalg.norm(pts[qi] - self.centroids[ti], axis=1) - self.radii[ti]
        keep = gap <= upper[qi] * (1 + 1e-9) + 1e-12
        qi, ti = qi[keep], ti[keep]
        cp = closest_point_on_triangle(pts[qi], self.a[ti], self.b[ti], self.c[ti])
        d = np.linalg.norm(pts[qi] - cp, axis=1)
        order = np.lexsort((ti, d, qi))
        qi, ti, d, cp = qi[order], ti[order], d[order], cp[order]
        first = np.ones(len(qi), dtype=bool)
        first[1:] = qi[1:] != qi[:-1]
        sel = qi[first]
        dist[sel] = d[first]
        cpts[sel] = cp[first]
        tids[sel] = ti[first]

    def ray_cast(self, origins, directions, chunk=None):
        """First hit along each ray: returns (t, triangle id) with t=inf, id=-1 on miss.

        ``directions`` need not be unit length; t is in units of its length.
        """
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        o, d = np.broadcast_arrays(o, d)
        n = len(o)
        t_hit = np.full(n, np.inf)
        tri = np.full(n, -1, dtype=np.int64)
        candidates = np.nonzero(_ray_box_hits(o, d, self.lo, self.hi))[0]
        ntri = len(self.triangles)
        chunk = chunk or max(1, _PAIR_BUDGET // ntri)
        e1 = self.b - self.a
        e2 = self.c - self.a
        for s in range(0, len(candidates), chunk):
            idx = candidates[s:s + chunk]
            t, hit = _moller_trumbore(o[idx, None, :], d[idx, None, :], self.a[None], e1[None], e2[None])
            t = np.where(hit, t, np.inf)
            best = np.argmin(t, axis=1)
            t_best = t[np.arange(len(idx)), best]
            found = np.isfinite(t_best)
            t_hit[idx[found]] = t_best[found]
            tri[idx[found]] = best[found]
        return t_hit, tri


def _ray_box_hits(o, d, lo, hi, pad=1e-9):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - pad - o) * inv
        t1 = (hi + pad - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    return (tmax >= np.maximum(tmin, 0.0))


def _moller_trumbore(o, d, a, e1, e2, eps=1e-14):
    pvec = np.cross(d, e2)
    det = np.sum(e1 * pvec, axis=-1)
    ok = np.abs(det) > eps
    inv_det = 1.0 / np.where(ok, det, 1.0)
    tvec = o - a
    u = np.sum(tvec * pvec, axis=-1) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.sum(d * qvec, axis=-1) * inv_det
    t = np.sum(e2 * qvec, axis=-1) * inv_det
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return t, hit


# ---------------------------------------------------------------------------
# distance and sign oracles


def unsigned_distance(mesh: TriangleMesh, x) -> np.ndarray:
    """Distance from each point in ``x`` to the closest point of ``mesh``."""
    pts = np.asarray(x, dtype=np.float64)
    d, _, _ = mesh.index.closest(pts.reshape(-1, 3))
    return d.reshape(pts.shape[:-1]) if pts.ndim > 1 else d[0]


def winding_number(mesh: TriangleMesh, x) -> np.ndarray:
    """Generalized winding number of the mesh at each point (solid-angle sum / 4 pi).

    Per-triangle solid angles use the Van Oosterom-Strackee formula.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a, b, c = mesh.corners
    out = np.empty(len(pts))
    step = max(1, (_PAIR_BUDGET // 5) // max(1, len(a)))
    for s in range(0, len(pts), step):
        p = pts[s:s + step]
        ax, ay, az = (a[None, :, i] - p[:, None, i] for i in range(3))
        bx, by, bz = (b[None, :, i] - p[:, None, i] for i in range(3))
        cx, cy, cz = (c[None, :, i] - p[:, None, i] for i in range(3))
        la = np.sqrt(ax * ax + ay * ay + az * az)
        lb = np.sqrt(bx * bx + by * by + bz * bz)
        lc = np.sqrt(cx * cx + cy * cy + cz * cz)
        det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
        den = (
            la * lb * lc
            + (ax * bx + ay * by + az * bz) * lc
            + (ax * cx + ay * cy + az * cz) * lb
            + (bx * cx + by * cy + bz * cz) * la
        )
        # a point inside a triangle's own plane region contributes nothing
        # (atan2(+-0, negative) would otherwise pick +-pi arbitrarily)
        ang = np.where((det == 0) & (den <= 0), 0.0, np.arctan2(det, den))
        out[s:s + step] = ang.sum(axis=1) / (2 * np.pi)
    return out


def inside_outside(mesh: TriangleMesh, x, strict=True) -> np.ndarray:
    """True where a point is inside the (watertight) mesh.

    Decided by the generalized winding number; orientation of the mesh does
    not matter. With ``strict`` an :class:`AmbiguousSignError` is raised for
    points whose winding number is too close to 0.5 to trust.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = np.abs(winding_number(mesh, pts))
    ambiguous = np.abs(w - 0.5) < WINDING_AMBIGUITY
    if strict and ambiguous.any():
        raise AmbiguousSignError(pts[ambiguous], w[ambiguous])
    return w > 0.5


def ray_parity_inside(mesh: TriangleMesh, x, rng=None) -> np.ndarray:
    """Inside test by counting surface crossings along one random ray per point."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = rng.normal(size=pts.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a, b, c = mesh.corners
    e1, e2 = b - a, c - a
    counts = np.zeros(len(pts), dtype=np.int64)
    step = max(1, _PAIR_BUDGET // max(1, len(a)))
    for s in range(0, len(pts), step):
        _, hit = _moller_trumbore(pts[s:s + step, None], dirs[s:s + step, None], a[None], e1[None], e2[None])
        counts[s:s + step] = hit.sum(axis=1)
    return counts % 2 == 1


def sample_surface(mesh: TriangleMesh, n: int, rng, return_triangles=False):
    """Area-uniform random points on the mesh surface."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("mesh has zero surface area")
    cdf = np.cumsum(areas) / total
    tri = np.searchsorted(cdf, rng.random(n), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    u, v = rng.random((2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (arr[tri] for arr in mesh.corners)
    pts = a + (b - a) * u[:, None] + (c - a) * v[:, None]
    if return_triangles:
        return pts, tri
    return pts
