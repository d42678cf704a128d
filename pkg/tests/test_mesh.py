import numpy as np
import pytest
import trimesh
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentfit.errors import MissingInputError
from latentfit.mesh import (
    MeshError,
    TriMesh,
    barycentric_points,
    closest_points,
    contains,
    flood_fill_inside,
    load_obj,
    mesh_signed_distance,
    normalize_corpus,
    sample_surface,
    save_obj,
)


@pytest.fixture
def cube():
    return TriMesh.from_trimesh(trimesh.creation.box(extents=(1.0, 1.0, 1.0)))


@pytest.fixture
def sphere():
    return TriMesh.from_trimesh(trimesh.creation.icosphere(subdivisions=3, radius=0.3))


def _brute_force_distance(mesh, points):
    tris = mesh.triangles
    closest = trimesh.triangles.closest_point(np.repeat(tris, len(points), axis=0), np.tile(points, (len(tris), 1)))
    return np.linalg.norm(closest - np.tile(points, (len(tris), 1)), axis=1).reshape(len(tris), -1).min(axis=0)


def test_closed_meshes_are_flagged(cube, sphere):
    assert cube.watertight and sphere.watertight
    assert cube.euler_characteristic() == 2
    assert np.isclose(cube.area, 6.0)
    assert np.allclose(cube.bounds, [[-0.5] * 3, [0.5] * 3])


def test_open_mesh_cannot_claim_watertight(cube):
    with pytest.raises(MeshError, match="not closed"):
        TriMesh(cube.vertices, cube.faces[:-1], watertight=True)
    assert not TriMesh.closed(cube.vertices, cube.faces[:-1]).watertight


def test_face_indices_are_checked():
    with pytest.raises(MeshError, match="out of range"):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_obj_exchange_keeps_order(tmp_path, sphere):
    loaded = load_obj(save_obj(sphere, tmp_path / "sub" / "sphere.obj"))
    assert np.allclose(loaded.vertices, sphere.vertices)
    assert np.array_equal(loaded.faces, sphere.faces)
    assert loaded.watertight
    with pytest.raises(MissingInputError):
        load_obj(tmp_path / "missing.obj")


def test_normalize_corpus_uses_one_extent(cube, sphere):
    extent, (a, b) = normalize_corpus([cube.scaled(3.0), sphere])
    assert np.isclose(extent, 3.0)
    assert np.isclose(np.abs(a.vertices).max(), 0.5)
    assert np.isclose(np.abs(b.vertices).max(), np.abs(sphere.vertices).max() / 3.0)
    again, _ = normalize_corpus([a, b])
    assert np.isclose(again, 1.0)
    with pytest.raises(MeshError):
        normalize_corpus([])


def test_normalize_corpus_divides_by_the_origin_centred_cube(cube):
    shifted = cube.with_vertices(cube.vertices * 2.0 + 1.0)
    extent, (moved,) = normalize_corpus([shifted])
    # bounding box is [0, 2]^3 with side 2, the origin-centred cube has side 4
    assert np.isclose(extent, 4.0)
    assert np.allclose(moved.vertices.min(axis=0), 0.0) and np.allclose(moved.vertices.max(axis=0), 0.5)


def test_surface_samples_lie_on_the_surface(cube, rng):
    points, faces, bary = sample_surface(cube, 500, rng)
    assert np.allclose(np.abs(points).max(axis=1), 0.5)
    assert np.allclose(bary.sum(axis=1), 1.0) and np.all(bary >= 0)
    moved = cube.with_vertices(cube.vertices * 2.0 + 1.0)
    assert np.allclose(barycentric_points(moved, faces, bary), points * 2.0 + 1.0)


def test_surface_sampling_is_area_weighted(rng):
    # two disjoint boxes, the second with four times the area
    small = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    big = trimesh.creation.box(extents=(2.0, 2.0, 2.0))
    big.apply_translation([5.0, 0.0, 0.0])
    both = TriMesh.from_trimesh(trimesh.util.concatenate([small, big]))
    points, _, _ = sample_surface(both, 20000, rng)
    share = np.mean(points[:, 0] > 2.0)
    assert share == pytest.approx(0.8, abs=0.02)


def test_empty_mesh_cannot_be_sampled(rng):
    with pytest.raises(MeshError):
        sample_surface(TriMesh.empty(), 10, rng)


def test_closest_points_match_brute_force(sphere, rng):
    points = rng.uniform(-0.6, 0.6, size=(60, 3))
    closest, distance, face, bary = closest_points(sphere, points)
    assert np.allclose(distance, _brute_force_distance(sphere, points))
    assert np.allclose(np.linalg.norm(closest - points, axis=1), distance)
    assert np.allclose(barycentric_points(sphere, face, bary), closest)


def test_closest_point_on_cube_face(cube):
    closest, distance, _, _ = closest_points(cube, [[0.1, 0.2, 2.0], [0.0, 0.0, 0.0]])
    assert np.allclose(closest[0], [0.1, 0.2, 0.5])
    assert np.allclose(distance, [1.5, 0.5])


@given(arrays(np.float64, (4, 3), elements=st.floats(-2, 2)))
def test_closest_point_weights_are_convex(p):
    triangle = TriMesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
    closest, _, face, bary = closest_points(triangle, p)
    assert np.all(face == 0) and np.all(bary >= 0.0)
    assert np.allclose(bary.sum(axis=1), 1.0)
    assert np.allclose(barycentric_points(triangle, face, bary), closest, atol=1e-9)


def test_inside_tests(sphere, rng):
    directions = rng.normal(size=(400, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = np.concatenate([rng.uniform(0.0, 0.27, 200), rng.uniform(0.33, 0.5, 200)])
    points = directions * radii[:, None]
    expected = radii < 0.3
    assert np.array_equal(contains(sphere, points), expected)
    assert np.array_equal(flood_fill_inside(sphere, points, resolution=64), expected)


def test_inside_test_needs_watertight(cube):
    with pytest.raises(MeshError, match="watertight"):
        contains(TriMesh(cube.vertices, cube.faces[:-1]), np.zeros((1, 3)))


@pytest.mark.parametrize("sign", ["parity", "flood_fill"])
def test_signed_distance_to_cube(cube, sign):
    sdf = mesh_signed_distance(cube, np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.3, 0.0]]), sign, 64)
    assert np.allclose(sdf, [-0.5, 0.5, -0.2])
    assert isinstance(mesh_signed_distance(cube, np.array([0.0, 0.0, 0.9])), float)


def test_signed_distance_rejects_unknown_sign(cube):
    with pytest.raises(ValueError, match="sign"):
        mesh_signed_distance(cube, np.zeros(3), sign="winding")
