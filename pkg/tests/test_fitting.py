from dataclasses import replace

import numpy as np
import pytest
import trimesh

from latentfit.config import FitConfig, PoseConfig, ShapeConfig
from latentfit.encoders import EncoderPair, VoxelEncoder
from latentfit.fitting import (
    HISTORY_FIELDS,
    FittingDivergence,
    FittingProblem,
    FittingResult,
    depth_to_observation,
    fit_sequence,
    frame_energy,
    initialize_codes,
    interpolate_codes,
    reconstruct_sequence,
    repose,
    sample_fitting_points,
    transfer,
)
from latentfit.mesh import MeshError, TriMesh
from latentfit.mlp import LatentCode, pose_decoder_forward, shape_decoder_forward
from latentfit.spaces import init_pose_space, init_shape_space
from latentfit.synth import Camera, render_depth
from latentfit.tape import GradientTape, Tensor
from latentfit.volume import sample_grid
from tests.gradcheck import check_gradients

FIT = FitConfig(resolution=12, iterations=6, n_t=200, n_b=50, batch_size=2, mesh_resolution=16, log_every=2)


def _spaces(seed, level=None):
    """Untrained spaces whose shape field crosses zero inside the box, or sits at ``level`` everywhere."""
    rng = np.random.default_rng(seed)
    shape = init_shape_space(2, ShapeConfig(code_dim=4, width=16, bands=2, code_init_std=0.1), rng)
    shape.codes[1] = shape.codes[0]
    last = shape.decoder.layers[-1]
    if level is None:
        last.bias[:] -= np.arctanh(np.median(shape.grid(0, 16).values))
    else:
        last.magnitude[:] = 0.0
        last.bias[:] = np.arctanh(level)
    pose = init_pose_space(shape, [0, 1, 1], PoseConfig(code_dim=3, width=16, bands=2, output_scale=0.01), rng)
    return shape, pose


@pytest.fixture(scope="module")
def sphere():
    return TriMesh.from_trimesh(trimesh.creation.icosphere(subdivisions=3, radius=0.3))


@pytest.fixture(scope="module")
def frames(sphere):
    camera = Camera.facing_origin(24, 45.0, 1.6)
    return [render_depth(sphere.with_vertices(sphere.vertices + [0.02 * k, 0.0, 0.0]), camera) for k in range(3)]


@pytest.fixture
def problem(frames):
    shape, pose = _spaces(0)
    return FittingProblem.from_frames(shape, pose, frames, FIT)


def test_observation_of_a_sphere(sphere):
    frame = render_depth(sphere, Camera.facing_origin(65, 45.0, 1.6))
    grid = depth_to_observation(frame, 17, trunc=0.01, band=0.1)
    assert grid.resolution == (17, 17, 17)
    # nodes on the optical axis at z = 0.5, 0.375, 0.3125 and 0.25
    assert np.isclose(grid.values[8, 8, 16], 0.1) and grid.mask[8, 8, 16]
    assert np.isclose(grid.values[8, 8, 14], 0.075, atol=0.005) and grid.mask[8, 8, 14]
    assert np.isclose(grid.values[8, 8, 13], 0.0125, atol=0.005) and grid.mask[8, 8, 13]
    assert not grid.mask[8, 8, 12]
    # rays that miss the sphere carry no observation
    assert not grid.mask[0, 0, 16] and np.isclose(grid.values[0, 0, 16], 0.1)


def test_problem_checks_its_parts(frames):
    shape, pose = _spaces(0)
    other_shape, _ = _spaces(1)
    observations = [depth_to_observation(f, 8) for f in frames]
    clouds = [f.points() for f in frames]
    with pytest.raises(ValueError, match="at least one frame"):
        FittingProblem(shape, pose, [], [], FIT)
    with pytest.raises(ValueError, match="point cloud"):
        FittingProblem(shape, pose, observations, clouds[:2], FIT)
    with pytest.raises(ValueError, match="resolution"):
        FittingProblem(shape, pose, observations[:2] + [depth_to_observation(frames[2], 9)], clouds, FIT)
    with pytest.raises(ValueError, match="different shape space"):
        FittingProblem(other_shape, pose, observations, clouds, FIT)


def test_default_initialization_uses_mean_codes(problem):
    shape, poses = initialize_codes(problem)
    assert np.allclose(shape.values, problem.shape_space.codes.mean(axis=0)) and shape.role == "shape"
    assert len(poses) == 3
    assert all(np.allclose(p.values, problem.pose_space.codes.mean(axis=0)) for p in poses)
    poses[0].values[:] = 1.0
    assert not np.allclose(poses[1].values, 1.0)


def test_encoder_initialization(problem, rng):
    encoders = EncoderPair(VoxelEncoder.init(8, (2, 4), 4, "shape", rng), VoxelEncoder.init(8, (2, 4), 3, "pose", rng))
    shape, poses = initialize_codes(problem, encoders)
    assert shape.dim == 4 and [p.dim for p in poses] == [3, 3, 3]
    problem.config = replace(FIT, use_shape_encoder=False)
    shape, _ = initialize_codes(problem, encoders)
    assert np.allclose(shape.values, problem.shape_space.codes.mean(axis=0))


def test_fitting_points_hug_the_decoded_surface(rng):
    shape, _ = _spaces(0)
    points, fallback = sample_fitting_points(shape, shape.codes[0], 300, rng, displacement=1e-6, resolution=16)
    assert points.shape == (300, 3) and not fallback
    assert np.all(np.abs(points) <= 0.55 + 1e-3)


def test_empty_surface_falls_back_to_the_box(rng):
    shape, _ = _spaces(0, level=0.9)
    with pytest.warns(UserWarning, match="empty surface"):
        points, fallback = sample_fitting_points(shape, shape.codes[0], 100, rng, resolution=8)
    assert fallback and np.all(np.abs(points) <= 0.5)


def _front_points(rng, n=40):
    """Canonical points just in front of the sphere as seen from the camera."""
    d = np.column_stack([rng.normal(0.0, 0.3, n), rng.normal(0.0, 0.3, n), np.ones(n)])
    return d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(0.38, 0.45, (n, 1))


def _frame_terms(problem, j, x, shape, pose, icp_active=False):
    canonical = shape_decoder_forward(problem.shape_space.decoder, shape, x)
    return frame_energy(problem, j, x, canonical, shape, pose, {}, icp_active)


def _codes(problem):
    return Tensor(problem.shape_space.codes[0]), {q: Tensor(c) for q, c in enumerate(problem.pose_space.codes)}


def test_frame_energy_terms_are_sums_divided_by_the_batch_size(problem, rng):
    x = _front_points(rng)
    shape, pose = _codes(problem)
    terms = _frame_terms(problem, 1, x, shape, pose)
    config = problem.config

    flows = {q: pose_decoder_forward(problem.pose_space.decoder, shape, pose[q], x).value for q in range(3)}
    observed, usable = sample_grid(problem.observations[1], Tensor(x + flows[1]))
    canonical = shape_decoder_forward(problem.shape_space.decoder, shape, x).value
    clamp = config.delta
    residual = np.abs(np.clip(canonical, -clamp, clamp) - np.clip(observed.value, -clamp, clamp))
    assert usable.any()
    assert np.isclose(terms["recon"].value, residual[usable].sum() / len(x))

    prior = np.sum(shape.value**2) / config.sigma_shape**2 + np.sum(pose[1].value ** 2) / config.sigma_pose**2
    assert np.isclose(terms["code"].value, prior / len(x))

    smooth = sum(np.mean(np.sum((flows[1] - flows[q]) ** 2, axis=1)) for q in (0, 2))
    assert np.isclose(terms["temporal"].value, config.lambda_t * smooth)
    assert terms["icp"].value == 0.0


def test_masked_out_frame_has_no_reconstruction_energy(problem, rng):
    for grid in problem.observations:
        grid.mask[:] = False
    tape = GradientTape()
    shape = tape.watch(problem.shape_space.codes[0], "shape")
    pose = {q: tape.watch(c, f"pose{q}") for q, c in enumerate(problem.pose_space.codes)}
    terms = _frame_terms(problem, 1, _front_points(rng), shape, pose)
    assert terms["recon"].value == 0.0
    grads = tape.backward(terms["recon"])
    assert all(np.all(g == 0.0) for g in grads.values())


def test_temporal_term_is_symmetric(frames, rng):
    shape_space, pose_space = _spaces(0)
    problem = FittingProblem.from_frames(shape_space, pose_space, frames[:2], FIT)
    x = _front_points(rng)
    shape, pose = _codes(problem)
    forward = _frame_terms(problem, 0, x, shape, pose)["temporal"].value
    backward = _frame_terms(problem, 1, x, shape, pose)["temporal"].value
    assert forward > 0.0
    assert np.isclose(forward, backward)


def test_single_frame_has_no_temporal_term(frames, rng):
    shape_space, pose_space = _spaces(0)
    problem = FittingProblem.from_frames(shape_space, pose_space, frames[:1], FIT)
    shape, pose = _codes(problem)
    terms = _frame_terms(problem, 0, _front_points(rng), shape, {0: pose[0]}, icp_active=True)
    assert terms["temporal"].value == 0.0


def test_frame_energy_gradient_matches_finite_differences(problem, rng):
    # every canonical point counts as near-surface so the matched set stays fixed
    problem.config = replace(FIT, eps_icp=10.0, lambda_icp=0.5)
    x = _front_points(rng, 20)

    def energy(shape, p0, p1, p2):
        terms = _frame_terms(problem, 1, x, shape, {0: p0, 1: p1, 2: p2}, icp_active=True)
        assert terms["icp"].value > 0.0
        return terms["recon"] + terms["code"] + terms["temporal"] + terms["icp"]

    check_gradients(energy, problem.shape_space.codes[0], *problem.pose_space.codes, rtol=1e-4, atol=1e-6)


def test_fit_records_every_iteration(problem):
    result = fit_sequence(problem, seed=4)
    assert len(result.history) == 6 and list(result.history[0]) == list(HISTORY_FIELDS)
    assert [row["iteration"] for row in result.history] == list(range(6))
    assert all(np.isfinite(row["loss"]) for row in result.history)
    # icp runs for the first half, learning rates halve every quarter
    assert all(row["icp"] == 0.0 for row in result.history[3:])
    assert [row["lr_shape"] for row in result.history[:3]] == pytest.approx([5e-4, 2.5e-4, 1.25e-4])
    assert result.shape_code.dim == 4 and len(result.pose_codes) == 3
    assert not result.used_fallback


def test_fit_is_reproducible(frames):
    a = fit_sequence(FittingProblem.from_frames(*_spaces(0), frames, FIT), seed=5)
    b = fit_sequence(FittingProblem.from_frames(*_spaces(0), frames, FIT), seed=5)
    assert np.array_equal(a.shape_code.values, b.shape_code.values)
    assert all(np.array_equal(p.values, q.values) for p, q in zip(a.pose_codes, b.pose_codes))


def test_fit_moves_the_codes(problem):
    shape, poses = initialize_codes(problem)
    result = fit_sequence(problem, init=(shape, poses), seed=1)
    assert not np.allclose(result.shape_code.values, shape.values)


def test_fit_checks_initial_pose_count(problem):
    shape, poses = initialize_codes(problem)
    with pytest.raises(ValueError, match="initial pose codes"):
        fit_sequence(problem, init=(shape, poses[:2]))


def test_divergence_reports_the_last_codes(frames):
    shape, pose = _spaces(0)
    pose.decoder.layers[-1].bias[:] = np.nan
    problem = FittingProblem.from_frames(shape, pose, frames, FIT)
    start_shape, start_poses = initialize_codes(problem)
    with pytest.raises(FittingDivergence) as info:
        fit_sequence(problem, init=(start_shape, start_poses))
    assert info.value.diagnostics["iteration"] == 0
    assert np.allclose(info.value.shape_code, start_shape.values)
    assert info.value.pose_codes.shape == (3, 3)


def test_result_file(tmp_path, problem):
    result = fit_sequence(problem, seed=2)
    loaded = FittingResult.load(result.save(tmp_path / "fit.ckpt", {"fit": {"iterations": 6}}))
    assert np.array_equal(loaded.shape_code.values, result.shape_code.values)
    assert all(np.array_equal(p.values, q.values) for p, q in zip(loaded.pose_codes, result.pose_codes))
    assert loaded.history == [] and loaded.used_fallback == result.used_fallback
    lines = result.write_history(tmp_path / "fit_history.csv").read_text().splitlines()
    assert len(lines) == 7


def test_reconstruction_shares_connectivity():
    shape, pose = _spaces(0)
    result = FittingResult(shape.code(0), [pose.code(j) for j in range(3)])
    canonical, posed = reconstruct_sequence(result, shape, pose, resolution=16)
    assert result.canonical is canonical and len(posed) == 3
    assert all(m.same_topology(canonical) for m in posed)
    assert not np.allclose(posed[0].vertices, canonical.vertices)


def test_reposing_an_empty_surface_fails():
    shape, pose = _spaces(0, level=0.9)
    with pytest.raises(MeshError, match="empty"):
        repose(shape, pose, shape.codes[0], [pose.codes[0]], resolution=8)


def test_interpolation_hits_both_ends():
    a, b = LatentCode([0.0, 2.0], "pose"), LatentCode([1.0, 0.0], "pose")
    path = interpolate_codes(a, b, 5)
    assert len(path) == 5 and all(c.role == "pose" for c in path)
    assert np.allclose(path[0].values, a.values) and np.allclose(path[-1].values, b.values)
    assert np.allclose(path[2].values, [0.5, 1.0])
    with pytest.raises(ValueError, match="at least 2"):
        interpolate_codes(a, b, 1)
    with pytest.raises(ValueError, match="dimensions"):
        interpolate_codes(a, LatentCode([1.0, 2.0, 3.0]), 3)


def test_transfer_poses_another_identity():
    shape, pose = _spaces(0)
    canonical, posed = transfer(shape, pose, shape.code(0), [pose.code(1), pose.code(2)], resolution=16)
    assert len(posed) == 2 and all(m.same_topology(canonical) for m in posed)
    with pytest.raises(ValueError, match="at least one pose code"):
        transfer(shape, pose, shape.code(1), [])
