import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchsdf.geometry import (
    AmbiguousSignError, DegenerateMeshError, TriangleMesh, closest_point_on_triangle, edge_counts,
    inside_outside, is_watertight, normalize_unit_cube, ray_parity_inside, sample_surface,
    unsigned_distance, winding_number,
)
from patchsdf.shapes import box_mesh, icosphere, random_rotation, torus_mesh

from conftest import brute_point_triangle_distance, brute_unsigned_distance


def test_cube_is_watertight(cube):
    assert len(cube.vertices) == 8 and len(cube.triangles) == 12
    assert cube.watertight


def test_single_triangle_is_open():
    m = TriangleMesh(np.eye(3), [[0, 1, 2]])
    assert not m.watertight
    assert set(edge_counts(m.triangles)[1]) == {1}


def test_bad_index_rejected():
    with pytest.raises(ValueError):
        TriangleMesh(np.eye(3), [[0, 1, 3]])


def test_normalize_cube_side_two():
    m = normalize_unit_cube(box_mesh((2, 2, 2), center=(5, 5, 5)))
    assert np.allclose(m.vertices.min(axis=0), -0.5)
    assert np.allclose(m.vertices.max(axis=0), 0.5)
    assert m.bbox_longest_side == pytest.approx(2.0)
    assert m.longest_side == pytest.approx(1.0)


def test_normalize_box_421():
    m = normalize_unit_cube(box_mesh((4, 2, 1)))
    assert np.allclose(m.extent, [1.0, 0.5, 0.25])
    assert m.bbox_longest_side == pytest.approx(4.0)


def test_normalize_idempotent():
    m = normalize_unit_cube(box_mesh((4, 2, 1), center=(1, -2, 3)))
    m2 = normalize_unit_cube(m)
    assert np.array_equal(m.vertices, m2.vertices)
    assert m2.bbox_longest_side == pytest.approx(4.0)


def test_normalize_degenerate():
    m = TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]])
    with pytest.raises(DegenerateMeshError):
        normalize_unit_cube(m)


def test_distance_at_vertex_is_zero(torus):
    assert np.all(unsigned_distance(torus, torus.vertices[:20]) == 0.0)


def test_distance_from_sphere_center():
    m = icosphere(3, radius=1.0)
    d = unsigned_distance(m, np.zeros((1, 3)))[0]
    # the closest point is a face center, slightly inside the circumsphere
    assert 0.98 < d <= 1.0


def test_distance_matches_brute_force(rng):
    m = torus_mesh(0.3, 0.1, 16, 12)  # 384 triangles
    p = rng.uniform(-0.6, 0.6, (2000, 3))
    d = unsigned_distance(m, p)
    ref = brute_unsigned_distance(m, p)
    assert np.max(np.abs(d - ref) / np.maximum(ref, 1e-300)) <= 1e-12


def test_closest_point_regions(rng):
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    p = rng.uniform(-1, 2, (500, 3))
    q = closest_point_on_triangle(p, a[None], b[None], c[None])
    ref = brute_point_triangle_distance(p, a, b, c)
    assert np.allclose(np.linalg.norm(p - q, axis=1), ref, rtol=1e-12, atol=1e-15)


def test_inside_outside_cube(cube):
    assert inside_outside(cube, np.zeros((1, 3)))[0]
    assert not inside_outside(cube, np.array([[5.0, 0, 0]]))[0]


def test_winding_orientation_agnostic(cube):
    flipped = TriangleMesh(cube.vertices, cube.triangles[:, ::-1])
    assert inside_outside(flipped, np.zeros((1, 3)))[0]
    assert winding_number(cube, np.zeros((1, 3)))[0] == pytest.approx(1.0)
    assert winding_number(flipped, np.zeros((1, 3)))[0] == pytest.approx(-1.0)


def test_ambiguous_sign_reported(cube):
    # a point on a face has winding number 1/2
    with pytest.raises(AmbiguousSignError) as err:
        inside_outside(cube, np.array([[0.5, 0.1, 0.2]]))
    assert np.allclose(err.value.points[0], [0.5, 0.1, 0.2])


def test_winding_agrees_with_ray_parity(torus, rng):
    p = rng.uniform(-0.5, 0.5, (3000, 3))
    w = inside_outside(torus, p, strict=False)
    r = ray_parity_inside(torus, p, rng)
    assert np.mean(w == r) >= 0.999


def test_sign_flips_along_axis_segment():
    m = icosphere(3, radius=0.4)
    t = np.linspace(-0.8, 0.8, 161)
    t = t[np.abs(np.abs(t) - 0.4) > 0.02]
    p = np.stack([t, np.zeros_like(t), np.zeros_like(t)], 1)
    inside = inside_outside(m, p)
    assert np.array_equal(inside, np.abs(t) < 0.39)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inside_outside_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    m = torus_mesh(0.3, 0.12, 16, 10)
    R = random_rotation(rng)
    t = rng.uniform(-2, 2, 3)
    p = rng.uniform(-0.5, 0.5, (200, 3))
    moved = TriangleMesh(m.vertices @ R.T + t, m.triangles)
    a = inside_outside(m, p, strict=False)
    b = inside_outside(moved, p @ R.T + t, strict=False)
    assert np.array_equal(a, b)


def test_sample_surface_face_counts(cube, rng):
    n = 10000
    pts = sample_surface(cube, n, rng)
    face = np.argmax(np.abs(pts), axis=1) * 2 + (pts[np.arange(n), np.argmax(np.abs(pts), axis=1)] > 0)
    counts = np.bincount(face, minlength=6)
    p = 1 / 6
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 4 * sigma)


def test_sample_single_point_on_plane(cube, rng):
    p, tri = sample_surface(cube, 1, rng, return_triangles=True)
    a, b, c = (v[tri[0]] for v in cube.corners)
    n = np.cross(b - a, c - a)
    assert abs((p[0] - a) @ n) < 1e-12


def test_sample_deterministic(torus):
    a = sample_surface(torus, 100, np.random.default_rng(7))
    b = sample_surface(torus, 100, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_sample_zero_area():
    m = TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]])
    with pytest.raises(DegenerateMeshError):
        sample_surface(m, 5, np.random.default_rng(0))


def test_watertight_helper(sphere):
    assert is_watertight(sphere.triangles)
    assert not is_watertight(sphere.triangles[1:])
