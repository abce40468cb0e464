"""Query points, local patches and global subsamples fed to the network."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .geometry import TriangleMesh, inside_outside, sample_surface, unsigned_distance, WINDING_AMBIGUITY, winding_number

NEAR_SURFACE = 0
UNIFORM = 1

# clouds at least this many times larger than n_s use rejection sampling
REJECTION_MIN_RATIO = 8

OUTSIDE = 1
INSIDE = -1

QUERY_MAGIC = b"P2SQRY\x00\x00"
QUERY_VERSION = 1
QUERY_DTYPE = np.dtype([
    ("x", "<f8", (3,)),
    ("distance", "<f8"),
    ("sign", "i1"),
    ("origin", "u1"),
])


class PatchError(ValueError):
    """A patch cannot be formed for a query point."""

    def __init__(self, message, query=None):
        self.query = None if query is None else np.asarray(query)
        super().__init__(message)


@dataclass
class QuerySet:
    """Columnar set of supervised query points.

    ``sign`` is +1 outside / -1 inside, ``origin`` is NEAR_SURFACE or UNIFORM.
    """

    x: np.ndarray
    distance: np.ndarray
    sign: np.ndarray
    origin: np.ndarray

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return QuerySet(self.x[idx], self.distance[idx], self.sign[idx], self.origin[idx])

    def to_records(self):
        rec = np.zeros(len(self), dtype=QUERY_DTYPE)
        rec["x"] = self.x
        rec["distance"] = self.distance
        rec["sign"] = self.sign
        rec["origin"] = self.origin
        return rec

    @classmethod
    def from_records(cls, rec):
        return cls(
            np.array(rec["x"], dtype=np.float64),
            np.array(rec["distance"], dtype=np.float64),
            np.array(rec["sign"], dtype=np.int8),
            np.array(rec["origin"], dtype=np.uint8),
        )


def write_query_file(path, queries: QuerySet):
    """Binary little-endian: 8-byte magic, uint32 version, uint32 count, then records."""
    with open(path, "wb") as fh:
        fh.write(QUERY_MAGIC + struct.pack("<II", QUERY_VERSION, len(queries)))
        fh.write(queries.to_records().tobytes())


def read_query_file(path) -> QuerySet:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:8] != QUERY_MAGIC:
            raise ValueError(f"{path}: not a query-set file")
        version, count = struct.unpack("<II", header[8:])
        if version != QUERY_VERSION:
            raise ValueError(f"{path}: unsupported query-set version {version}")
        payload = fh.read()
    if len(payload) != count * QUERY_DTYPE.itemsize:
        raise ValueError(f"{path}: expected {count} records, payload has {len(payload)} bytes")
    return QuerySet.from_records(np.frombuffer(payload, dtype=QUERY_DTYPE))


def generate_query_set(mesh: TriangleMesh, rng, n_surface=1000, n_uniform=1000, offset=0.02, max_retries=20) -> QuerySet:
    """Near-surface and uniform query points labeled with distance and sign.

    Near-surface points are area-uniform surface samples moved along the
    face normal by U[-offset*L, offset*L]; uniform points fill the
    axis-aligned cube of side L centered at the origin. Points whose sign
    is ambiguous are redrawn.
    """
    L = mesh.longest_side
    normals = mesh.face_normals()

    def draw_surface(n):
        pts, tri = sample_surface(mesh, n, rng, return_triangles=True)
        return pts + normals[tri] * rng.uniform(-offset * L, offset * L, n)[:, None]

    def draw_uniform(n):
        return rng.uniform(-0.5 * L, 0.5 * L, (n, 3))

    parts = []
    for n, draw, origin in ((n_surface, draw_surface, NEAR_SURFACE), (n_uniform, draw_uniform, UNIFORM)):
        pts = draw(n)
        for _ in range(max_retries):
            w = np.abs(winding_number(mesh, pts))
            bad = np.abs(w - 0.5) < WINDING_AMBIGUITY
            if not bad.any():
                break
            pts[bad] = draw(int(bad.sum()))
        else:
            raise ValueError(f"could not draw sign-unambiguous query points in {max_retries} retries")
        sign = np.where(w > 0.5, INSIDE, OUTSIDE).astype(np.int8)
        parts.append((pts, sign, np.full(n, origin, dtype=np.uint8)))
    x = np.concatenate([p[0] for p in parts])
    return QuerySet(
        x,
        unsigned_distance(mesh, x),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )


def label_points(mesh: TriangleMesh, x) -> QuerySet:
    """Ground truth for arbitrary points (sign ambiguity raises)."""
    x = np.asarray(x, dtype=np.float64)
    inside = inside_outside(mesh, x)
    return QuerySet(
        x, unsigned_distance(mesh, x),
        np.where(inside, INSIDE, OUTSIDE).astype(np.int8),
        np.full(len(x), UNIFORM, dtype=np.uint8),
    )


# ---------------------------------------------------------------------------
# point cloud patches


class CloudIndex:
    """kd-tree over a point cloud stored in canonical (lexicographic) order.

    Canonical storage makes every query independent of the order in which
    the cloud was given; ties are broken by ascending canonical index.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("empty point cloud")
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
        self.points = np.ascontiguousarray(pts[order])
        self.tree = cKDTree(self.points)
        self._hull = None

    def __len__(self):
        return len(self.points)

    def knn(self, x, k):
        """Indices (Q, k) of the k nearest points, ordered by (distance, index)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = len(self.points)
        if k > n:
            raise PatchError(f"patch needs {k} points but the cloud has only {n}; clamp n_d or reject the shape")
        if k == n:
            d = np.linalg.norm(self.points[None] - x[:, None], axis=-1)
            idx = np.broadcast_to(np.arange(n), d.shape)
            order = np.lexsort((idx, d), axis=-1)
            return np.take_along_axis(idx, order, axis=-1)
        d, idx = self.tree.query(x, k=k + 1)
        d = np.asarray(d).reshape(len(x), k + 1)
        idx = np.asarray(idx).reshape(len(x), k + 1)
        out = np.empty((len(x), k), dtype=np.int64)
        tie = d[:, k - 1] == d[:, k]
        keep = ~tie
        dk, ik = d[keep, :k], idx[keep, :k]
        order = np.lexsort((ik, dk), axis=-1)
        out[keep] = np.take_along_axis(ik, order, axis=-1)
        for row in np.nonzero(tie)[0]:
            # pad the radius: the tree's own distance rounding may differ from d
            cand = np.asarray(self.tree.query_ball_point(x[row], d[row, k - 1] * (1 + 1e-9) + 1e-300), dtype=np.int64)
            dc = np.linalg.norm(self.points[cand] - x[row], axis=1)
            out[row] = cand[np.lexsort((cand, dc))[:k]]
        return out

    @property
    def hull_points(self):
        """Convex hull vertices: the farthest cloud point from any x is among them."""
        if self._hull is None:
            try:
                self._hull = self.points[ConvexHull(self.points).vertices]
            except (QhullError, ValueError):
                self._hull = self.points  # flat or tiny clouds
        return self._hull

    def nearest_distance(self, x):
        d, _ = self.tree.query(np.atleast_2d(x))
        return d


def _as_index(P):
    return P if isinstance(P, CloudIndex) else CloudIndex(P)


def knn_patch(P, x, n_d):
    """The n_d cloud points nearest to x, ordered by distance then index."""
    index = _as_index(P)
    return index.points[index.knn(np.asarray(x, dtype=np.float64)[None], n_d)[0]]


def gradient_weights(points, x):
    """Unnormalized sampling weights v: 1 at the query, falling to 0.05 far away."""
    d = np.linalg.norm(np.asarray(points) - np.asarray(x), axis=-1)
    dmax = d.max()
    if dmax == 0:
        return np.ones_like(d)
    return np.clip(1.0 - 1.5 * d / dmax, 0.05, 1.0)


def gradient_probabilities(points, x):
    v = gradient_weights(points, x)
    return v / v.sum()


def _weighted_indices(n, n_s, weights, rng):
    if n < n_s:
        return rng.choice(n, n_s, replace=True, p=weights / weights.sum())
    # Efraimidis-Spirakis: top-n_s keys log(u)/w is a sequential weighted draw without replacement
    keys = np.log1p(-rng.random(n)) / weights
    sel = np.argpartition(keys, n - n_s)[n - n_s:]
    return sel[np.argsort(-keys[sel], kind="stable")]


def far_distances(far, x, block=64):
    """Distance from each row of x to the farthest row of ``far``, via one matrix product per block."""
    x = np.atleast_2d(x)
    sq = np.einsum("ij,ij->i", far, far)
    out = np.empty(len(x))
    for s in range(0, len(x), block):
        xs = x[s:s + block]
        d2 = (sq[None] - 2.0 * (xs @ far.T)).max(axis=1) + np.einsum("ij,ij->i", xs, xs)
        out[s:s + block] = np.sqrt(np.maximum(d2, 0.0))
    return out


def _rejection_indices(pts, x, n_s, rng, dmax, accept=0.25):
    """Sequential weighted draw without replacement, touching only proposed points.

    Uniform proposals accepted with probability v (at most 1) are i.i.d.
    draws from rho; keeping first occurrences in order gives the same law as
    drawing without replacement one point at a time. ``accept`` (an estimate
    of the mean weight) only sizes the proposal chunks.
    """
    n = len(pts)
    taken = np.empty(0, dtype=np.int64)
    while len(taken) < n_s:
        m = int(1.3 * (n_s - len(taken)) / max(accept, 0.05)) + 16
        cand = rng.integers(0, n, m)
        u = rng.random(m)
        d = np.sqrt(np.einsum("ij,ij->i", pts[cand] - x, pts[cand] - x))
        v = np.clip(1.0 - 1.5 * d / dmax, 0.05, 1.0)
        taken = np.concatenate([taken, cand[u < v]])
        _, first = np.unique(taken, return_index=True)
        taken = taken[np.sort(first)]
    return taken[:n_s]


def _mean_weight(probe, x, dmax):
    """Mean sampling weight over a fixed probe subset, one value per query row."""
    d = np.linalg.norm(probe[None] - np.atleast_2d(x)[:, None], axis=-1)
    return np.clip(1.0 - 1.5 * d / np.maximum(dmax, 1e-300)[:, None], 0.05, 1.0).mean(axis=1)


def _probe(pts):
    return pts[:: max(1, len(pts) // 256)]


def _gradient_indices(pts, x, n_s, rng, dmax, accept):
    """Indices drawn with probability rho, given the farthest-point distance dmax."""
    n = len(pts)
    if dmax > 0 and n >= REJECTION_MIN_RATIO * n_s:
        return _rejection_indices(pts, x, n_s, rng, dmax, accept)
    return _weighted_indices(n, n_s, gradient_weights(pts, x), rng)


def gradient_subsample(P, x, n_s, rng, return_indices=False):
    """Draw n_s points with probability falling off with distance from x.

    Without replacement when the cloud has at least n_s points, with
    replacement otherwise. Large clouds use rejection sampling, small ones
    exponential keys; both give the same distribution.
    """
    index = P if isinstance(P, CloudIndex) else None
    pts = index.points if index is not None else np.asarray(P, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    far = index.hull_points if index is not None else pts
    dmax = far_distances(far, x)
    idx = _gradient_indices(pts, x, n_s, rng, dmax[0], _mean_weight(_probe(pts), x, dmax)[0])
    return idx if return_indices else pts[idx]


def uniform_subsample(P, n_s, rng, return_indices=False):
    pts = P.points if isinstance(P, CloudIndex) else np.asarray(P, dtype=np.float64)
    n = len(pts)
    idx = rng.choice(n, n_s, replace=n < n_s)
    return idx if return_indices else pts[idx]


def fixed_radius_patch(P, x, r, n_d=None, rng=None):
    """All cloud points within r of x, then subsampled or cycled to n_d points."""
    if not r > 0:
        raise ValueError("radius must be positive")
    index = _as_index(P)
    x = np.asarray(x, dtype=np.float64)
    idx = np.asarray(index.tree.query_ball_point(x, r), dtype=np.int64)
    if len(idx) == 0:
        raise PatchError(f"no cloud point within radius {r} of query {x.tolist()}", x)
    d = np.linalg.norm(index.points[idx] - x, axis=1)
    idx = idx[np.lexsort((idx, d))]
    if n_d is not None:
        if len(idx) > n_d:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(idx, n_d, replace=False))
        elif len(idx) < n_d:
            idx = idx[np.arange(n_d) % len(idx)]
    return index.points[idx]


@dataclass
class PatchPair:
    local_patch: np.ndarray
    global_sub: np.ndarray
    scale_factor: float
    query: np.ndarray
    rotation_applied: np.ndarray = None

    def __post_init__(self):
        if self.rotation_applied is None:
            self.rotation_applied = np.array([1.0, 0.0, 0.0, 0.0])

    def to_world(self, points):
        return np.asarray(points) * self.scale_factor + self.query

    def distance_to_world(self, d):
        return d * self.scale_factor


def normalize_pair(local, global_, x) -> PatchPair:
    """Center both subsets at x and scale by the local patch radius."""
    local = np.asarray(local, dtype=np.float64)
    global_ = np.asarray(global_, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if len(local) == 0:
        raise PatchError("empty local patch", x)
    lc = local - x
    r = float(np.sqrt(np.max(np.einsum("ij,ij->i", lc, lc))))
    if not r > 0:
        raise PatchError(f"degenerate patch: every local point coincides with the query {x.tolist()}", x)
    return PatchPair(lc / r, (global_ - x) / r, r, x)


# ---------------------------------------------------------------------------
# batched extraction


@dataclass
class PatchBatch:
    local: np.ndarray  # (B, n_d, 3)
    global_: np.ndarray  # (B, n_s, 3)
    scale: np.ndarray  # (B,)


def query_rng(seed, key):
    """Generator for one query, keyed so results do not depend on batching order."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, key], dtype=np.uint64)))


def extract_batch(index: CloudIndex, queries, n_d, n_s, rngs, patch_mode="knn", radius=None, subsample_mode="gradient") -> PatchBatch:
    """Normalized local patches and global subsamples for many queries.

    A fixed-radius patch that would be empty falls back to the single
    nearest point, cycled to n_d.
    """
    x = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    B = len(x)
    pts = index.points
    if patch_mode == "knn":
        local = pts[index.knn(x, n_d)]
    elif patch_mode == "radius":
        local = np.empty((B, n_d, 3))
        for i in range(B):
            try:
                local[i] = fixed_radius_patch(index, x[i], radius, n_d, rngs[i])
            except PatchError:
                local[i] = pts[index.knn(x[i:i + 1], 1)[0, 0]]
    else:
        raise ValueError(f"unknown patch mode {patch_mode!r}")

    glob = np.empty((B, n_s, 3))
    if subsample_mode == "gradient":
        dmax = far_distances(index.hull_points, x)
        accept = _mean_weight(_probe(pts), x, dmax)
        for i in range(B):
            glob[i] = pts[_gradient_indices(pts, x[i], n_s, rngs[i], dmax[i], accept[i])]
    elif subsample_mode == "uniform":
        for i in range(B):
            glob[i] = uniform_subsample(pts, n_s, rngs[i])
    else:
        raise ValueError(f"unknown subsample mode {subsample_mode!r}")

    local -= x[:, None]
    glob -= x[:, None]
    r = np.sqrt(np.max(np.einsum("bij,bij->bi", local, local), axis=1))
    if np.any(r <= 0):
        bad = x[np.argmax(r <= 0)]
        raise PatchError(f"degenerate patch: every local point coincides with the query {bad.tolist()}", bad)
    return PatchBatch(local / r[:, None, None], glob / r[:, None, None], r)
