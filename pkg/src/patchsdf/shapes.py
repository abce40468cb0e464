"""Closed test solids: explicit meshes and procedurally generated implicit shapes."""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh, normalize_unit_cube
from .mcubes import marching_cubes

PROCEDURAL_KINDS = ("sphere", "box", "torus", "union")


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box, 8 vertices and 12 outward-facing triangles."""
    h = 0.5 * np.asarray(size, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    tris = np.array([
        [0, 1, 3], [0, 3, 2],  # x-
        [4, 6, 7], [4, 7, 5],  # x+
        [0, 4, 5], [0, 5, 1],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [0, 2, 6], [0, 6, 4],  # z-
        [1, 5, 7], [1, 7, 3],  # z+
    ])
    return TriangleMesh(c + v * h, tris)


def tetrahedron() -> TriangleMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    tris = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(v, tris)


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.asarray(faces))


def torus_mesh(major=0.3, minor=0.1, n_major=48, n_minor=24) -> TriangleMesh:
    """Torus around the z axis, outward oriented."""
    u = np.linspace(0, 2 * np.pi, n_major, endpoint=False)
    v = np.linspace(0, 2 * np.pi, n_minor, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    verts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i1, j1 = (i + 1) % n_major, (j + 1) % n_minor
    a = i * n_minor + j
    b = i1 * n_minor + j
    c = i1 * n_minor + j1
    d = i * n_minor + j1
    tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return TriangleMesh(verts, tris)


# ---------------------------------------------------------------------------
# implicit solids (negative inside)


def sdf_sphere(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def sdf_box(p, center, half, rotation=None):
    q = p - center
    if rotation is not None:
        q = q @ rotation
    d = np.abs(q) - half
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    return outside + np.minimum(d.max(axis=-1), 0.0)


def sdf_torus(p, center, major, minor, rotation=None):
    q = p - center
    if rotation is not None:
        q = q @ rotation
    ring = np.linalg.norm(q[..., :2], axis=-1) - major
    return np.sqrt(ring ** 2 + q[..., 2] ** 2) - minor


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_solid(kind, rng):
    """Return a vectorized implicit function for a random solid of ``kind``."""
    if kind == "sphere":
        c = rng.uniform(-0.05, 0.05, 3)
        r = rng.uniform(0.25, 0.4)
        return lambda p: sdf_sphere(p, c, r)
    if kind == "box":
        c = rng.uniform(-0.05, 0.05, 3)
        half = rng.uniform(0.12, 0.35, 3)
        rot = random_rotation(rng)
        return lambda p: sdf_box(p, c, half, rot)
    if kind == "torus":
        major = rng.uniform(0.22, 0.3)
        minor = rng.uniform(0.07, 0.12)
        rot = random_rotation(rng)
        return lambda p: sdf_torus(p, 0.0, major, minor, rot)
    if kind == "union":
        parts = [random_solid(k, rng) for k in rng.choice(["sphere", "box"], size=2)]
        offset = rng.normal(size=3)
        offset *= rng.uniform(0.12, 0.2) / np.linalg.norm(offset)
        return lambda p: np.minimum(parts[0](p - offset), parts[1](p + offset))
    raise ValueError(f"unknown solid kind {kind!r}")


def implicit_to_mesh(fn, resolution=48, bound=0.75) -> TriangleMesh:
    """Mesh the zero level set of ``fn`` sampled on a cube [-bound, bound]^3."""
    g = np.linspace(-bound, bound, resolution)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)
    values = fn(pts.reshape(-1, 3)).reshape(pts.shape[:3])
    v, t = marching_cubes(values, spacing=g[1] - g[0], origin=(-bound,) * 3)
    return TriangleMesh(v, t)


def procedural_mesh(kind, rng, resolution=48) -> TriangleMesh:
    """A normalized, watertight random solid of the given kind."""
    return normalize_unit_cube(implicit_to_mesh(random_solid(kind, rng), resolution))
