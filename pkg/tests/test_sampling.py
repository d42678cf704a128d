import numpy as np
import pytest
import trimesh
from scipy.spatial.transform import Rotation

from latentfit.mesh import MeshError, TriMesh
from latentfit.sampling import sample_flow_pairs, sample_shape_points


@pytest.fixture
def sphere():
    return TriMesh.from_trimesh(trimesh.creation.icosphere(subdivisions=2, radius=0.3))


def test_shape_samples_split_and_band(sphere, rng):
    samples = sample_shape_points(sphere, 300, 200, rng, band=0.05)
    assert len(samples) == 500
    assert samples.near_surface.sum() == 300 and samples.uniform.sum() == 200
    assert np.all(np.abs(samples.sdf[samples.near_surface]) <= 0.05)
    assert np.all(np.abs(samples.points[samples.uniform]) <= 0.5)


def test_shape_sample_signs_follow_the_surface(sphere, rng):
    samples = sample_shape_points(sphere, 50, 400, rng)
    radius = np.linalg.norm(samples.points, axis=1)
    clear = np.abs(radius - 0.3) > 0.02
    assert np.array_equal(samples.sdf[clear] < 0, radius[clear] < 0.3)
    assert np.allclose(samples.sdf[clear], radius[clear] - 0.3, atol=0.01)


def test_shape_samples_are_reproducible(sphere):
    a = sample_shape_points(sphere, 40, 40, np.random.default_rng(7))
    b = sample_shape_points(sphere, 40, 40, np.random.default_rng(7))
    assert np.array_equal(a.points, b.points) and np.array_equal(a.sdf, b.sdf)


def test_shape_samples_need_a_closed_mesh(sphere, rng):
    with pytest.raises(MeshError, match="watertight"):
        sample_shape_points(TriMesh(sphere.vertices, sphere.faces[1:]), 10, 10, rng)
    with pytest.raises(ValueError):
        sample_shape_points(sphere, -1, 10, rng)


def test_flow_pairs_follow_a_rigid_motion(sphere, rng):
    rotation = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    shift = np.array([0.05, 0.0, -0.02])
    posed = sphere.with_vertices(sphere.vertices @ rotation.T + shift)
    pairs = sample_flow_pairs(sphere, posed, 400, rng, identity=2, pose=5)
    assert len(pairs) == 400 and (pairs.identity, pairs.pose) == (2, 5)
    assert np.allclose(pairs.posed, pairs.canonical @ rotation.T + shift)
    assert np.allclose(pairs.flow, pairs.posed - pairs.canonical)


def test_flow_offsets_use_both_scales(sphere, rng):
    pairs = sample_flow_pairs(sphere, sphere, 1000, rng, sigmas=(0.01, 0.002))
    assert np.all(pairs.sigma[:500] == 0.01) and np.all(pairs.sigma[500:] == 0.002)
    assert np.std(pairs.offset[:500]) == pytest.approx(0.01, rel=0.15)
    assert np.std(pairs.offset[500:]) == pytest.approx(0.002, rel=0.15)
    assert np.allclose(pairs.flow, 0.0)


def test_flow_pairs_need_shared_connectivity(sphere, rng):
    other = TriMesh.from_trimesh(trimesh.creation.icosphere(subdivisions=1, radius=0.3))
    with pytest.raises(MeshError, match="identical"):
        sample_flow_pairs(sphere, other, 10, rng)
