import numpy as np
import pytest

from latentfit import tape as tp
from latentfit.errors import MissingInputError
from latentfit.tape import GradientTape
from latentfit.volume import (
    GridError,
    SdfGrid,
    load_grid,
    marching_cubes,
    sample_grid,
    save_grid,
    trilinear,
    trilinear_mask,
)
from tests.gradcheck import check_gradients

SLOPE = np.array([1.0, 2.0, 3.0])


@pytest.fixture
def linear_grid():
    return SdfGrid.from_function(lambda p: p @ SLOPE + 0.5, 9)


def _sphere_sdf(p):
    return np.linalg.norm(p, axis=1) - 0.3


def test_unit_box_layout():
    grid = SdfGrid.unit_box(5)
    assert np.isclose(grid.voxel_size, 0.25)
    assert np.allclose(grid.origin, -0.5) and np.allclose(grid.upper, 0.5)
    wide = SdfGrid.unit_box(12, half_extent=0.55)
    assert np.isclose(wide.voxel_size, 0.1)
    assert wide.node_positions().shape == (12**3, 3)


def test_trilinear_reproduces_affine_fields(linear_grid, rng):
    points = rng.uniform(-0.5, 0.5, size=(40, 3))
    assert np.allclose(trilinear(linear_grid, points), points @ SLOPE + 0.5)
    assert np.isclose(trilinear(linear_grid, np.array([0.5, 0.5, 0.5])), 3.5)


def _multilinear(p):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    return 1.0 + x + 2.0 * y - z + 3.0 * x * y - 2.0 * x * z + y * z + 4.0 * x * y * z


def test_trilinear_reproduces_multilinear_fields(rng):
    grid = SdfGrid.from_function(_multilinear, 5)
    points = rng.uniform(-0.5, 0.5, size=(60, 3))
    assert np.allclose(trilinear(grid, points), _multilinear(points), atol=1e-12)


def test_trilinear_is_continuous_across_cell_faces(rng):
    grid = SdfGrid.unit_box(6, rng.normal(size=6**3))
    points = rng.uniform(-0.45, 0.45, size=(30, 3))
    for axis in range(3):
        face = points.copy()
        face[:, axis] = grid.origin[axis] + 2 * grid.voxel_size
        below, above = face.copy(), face.copy()
        below[:, axis] -= 1e-10
        above[:, axis] += 1e-10
        assert np.allclose(trilinear(grid, below), trilinear(grid, face), atol=1e-8)
        assert np.allclose(trilinear(grid, above), trilinear(grid, face), atol=1e-8)


def test_trilinear_rejects_outside_queries(linear_grid):
    with pytest.raises(GridError, match="outside"):
        trilinear(linear_grid, np.array([[0.0, 0.0, 0.6]]))


def test_mask_needs_all_cell_corners(linear_grid):
    linear_grid.mask[4, 4, 4] = False
    node = linear_grid.origin + 4 * linear_grid.voxel_size
    assert not trilinear_mask(linear_grid, node + 0.01)
    assert not trilinear_mask(linear_grid, node - 0.01)
    assert trilinear_mask(linear_grid, node + 1.5 * linear_grid.voxel_size)


def test_sample_grid_gradient_of_affine_field(linear_grid, rng):
    tape = GradientTape()
    points = tape.watch(rng.uniform(-0.45, 0.45, size=(10, 3)), "points")
    values, usable = sample_grid(linear_grid, points)
    grads = tape.backward(tp.sum_(values))
    assert usable.all()
    assert np.allclose(grads["points"], SLOPE)


def test_sample_grid_gradient_matches_finite_differences(rng):
    grid = SdfGrid.from_function(_sphere_sdf, 17)
    points = rng.uniform(-0.4, 0.4, size=(8, 3))
    check_gradients(lambda p: tp.sum_(tp.square(sample_grid(grid, p)[0])), points, rtol=1e-4, atol=1e-6)


def test_sample_grid_outside_points_are_unusable(linear_grid):
    tape = GradientTape()
    points = tape.watch(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.9]]), "points")
    values, usable = sample_grid(linear_grid, points)
    grads = tape.backward(tp.sum_(values))
    assert list(usable) == [True, False]
    assert np.isclose(values.value[1], trilinear(linear_grid, np.array([0.0, 0.0, 0.5])))
    assert np.allclose(grads["points"][1], 0.0)


def test_marching_cubes_of_a_sphere():
    mesh = marching_cubes(SdfGrid.from_function(_sphere_sdf, 32))
    assert mesh.watertight
    assert np.allclose(np.linalg.norm(mesh.vertices, axis=1), 0.3, atol=0.01)


def test_marching_cubes_is_exact_on_planes():
    normal = np.array([1.0, 2.0, 0.5])
    mesh = marching_cubes(SdfGrid.from_function(lambda p: p @ normal - 0.1, 9))
    assert not mesh.is_empty
    assert np.allclose(mesh.vertices @ normal - 0.1, 0.0, atol=1e-5)


def test_marching_cubes_without_crossing_is_empty():
    assert marching_cubes(SdfGrid.unit_box(4, np.ones(64))).is_empty


def test_marching_cubes_needs_finite_values():
    values = np.ones(64)
    values[3] = np.nan
    with pytest.raises(GridError, match="finite"):
        marching_cubes(SdfGrid.unit_box(4, values))


def test_grid_file_keeps_values_and_mask(tmp_path, rng):
    grid = SdfGrid.unit_box(6, rng.normal(size=216), half_extent=0.55)
    grid.mask[0, 1, 2] = False
    loaded = load_grid(save_grid(grid, tmp_path / "g.sdf"))
    assert np.array_equal(loaded.values, grid.values)
    assert np.array_equal(loaded.mask, grid.mask)
    assert np.allclose(loaded.origin, grid.origin) and loaded.voxel_size == grid.voxel_size


def test_bad_grid_files(tmp_path):
    with pytest.raises(MissingInputError):
        load_grid(tmp_path / "missing.sdf")
    path = save_grid(SdfGrid.unit_box(3), tmp_path / "g.sdf")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(GridError, match="bytes"):
        load_grid(path)
    (tmp_path / "other.sdf").write_bytes(b"NOTAGRID" + bytes(60))
    with pytest.raises(GridError):
        load_grid(tmp_path / "other.sdf")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"values": np.zeros((4, 4)), "origin": np.zeros(3), "voxel_size": 0.1},
        {"values": np.zeros((4, 4, 4)), "origin": np.zeros(3), "voxel_size": 0.0},
        {"values": np.zeros((4, 4, 4)), "origin": np.zeros(3), "voxel_size": 0.1, "mask": np.ones((3, 3, 3))},
    ],
)
def test_grid_validation(kwargs):
    with pytest.raises(GridError):
        SdfGrid(**kwargs)
