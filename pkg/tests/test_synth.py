import numpy as np
import pytest
import trimesh
import yaml

from latentfit.config import CorpusConfig
from latentfit.errors import IncompatibleInputError, MissingInputError
from latentfit.mesh import TriMesh
from latentfit.synth import (
    Camera,
    CorpusManifest,
    DepthFrame,
    IdentitySpec,
    PoseSpec,
    build_corpus,
    build_identity,
    generate_corpus,
    interpolate_poses,
    load_depth,
    pose_identity,
    render_depth,
    sample_identity_spec,
    sample_pose,
    save_depth,
    skeleton,
)

SPEC = IdentitySpec(0.5, 0.1, (0.3, 0.25), (0.06, 0.05))

TINY = CorpusConfig(
    identities=2,
    poses_per_identity=2,
    limbs_per_side=1,
    held_out_identities=1,
    sequences=1,
    sequence_frames=3,
    keyposes=2,
    ring_vertices=8,
    rings_per_bone=3,
    cap_rings=2,
    image_size=16,
)


@pytest.fixture(scope="module")
def figure():
    return build_identity(SPEC, ring_vertices=12, rings_per_bone=4, cap_rings=3)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(TINY, seed=3)


def test_identity_spec_validation():
    assert SPEC.limb_count == 2
    with pytest.raises(ValueError, match="length and a radius"):
        IdentitySpec(0.5, 0.1, (0.3,), ())
    with pytest.raises(ValueError, match="positive"):
        IdentitySpec(0.5, -0.1)


def test_skeleton_layout():
    skel = skeleton(SPEC)
    assert skel.bone_count == 5 and skel.root == 2
    assert np.allclose(skel.starts[1:], skel.ends[:-1])
    assert np.isclose(skel.ends[-1] - skel.starts[0], 0.5 + 2 * 0.55)
    assert np.isclose(skel.starts[0], -skel.ends[-1])
    assert skel.joint_bones == [1, 0, 3, 4]
    assert list(skel.parents) == [1, 2, -1, 2, 3]


def test_figure_mesh_is_closed_and_outward(figure):
    mesh = figure.mesh
    assert mesh.watertight and mesh.euler_characteristic() == 2
    assert mesh.to_trimesh().volume > 0
    assert np.allclose(figure.weights.sum(axis=1), 1.0)
    assert figure.weights.shape == (len(mesh.vertices), 5)


def test_canonical_pose_keeps_vertices(figure):
    posed = pose_identity(figure, PoseSpec.canonical(4))
    assert posed.same_topology(figure.mesh)
    assert np.allclose(posed.vertices, figure.mesh.vertices)


def test_global_transform_is_rigid(figure):
    shift = np.array([0.01, -0.02, 0.03])
    posed = pose_identity(figure, PoseSpec(np.zeros((4, 3)), global_translation=shift))
    assert np.allclose(posed.vertices, figure.mesh.vertices + shift)


def test_outer_joint_moves_only_its_chain(figure):
    angles = np.zeros((4, 3))
    angles[3] = [0.0, 0.0, 0.8]
    posed = pose_identity(figure, PoseSpec(angles))
    moved = np.linalg.norm(posed.vertices - figure.mesh.vertices, axis=1) > 1e-12
    assert not np.any(moved & (figure.weights[:, 4] == 0))
    assert np.any(moved)
    rigid = figure.weights[:, 4] == 1
    joint = figure.skeleton.joints[4]
    before = np.linalg.norm(figure.mesh.vertices[rigid] - joint, axis=1)
    after = np.linalg.norm(posed.vertices[rigid] - joint, axis=1)
    assert np.allclose(before, after)


def test_pose_checks(figure):
    with pytest.raises(ValueError, match="limit"):
        pose_identity(figure, PoseSpec(np.full((4, 3), 2.0)))
    with pytest.raises(ValueError, match="joints"):
        pose_identity(figure, PoseSpec.canonical(3))


def test_pose_spec_helpers(rng):
    pose = sample_pose(rng, 4, np.deg2rad(100.0), 0.6)
    pose.check_limits(np.deg2rad(60.0) + 1e-9)
    assert not pose.is_canonical and PoseSpec.canonical(4).is_canonical
    restored = PoseSpec.from_dict(yaml.safe_load(yaml.safe_dump(pose.to_dict())))
    assert np.allclose(restored.joint_angles, pose.joint_angles)


def test_interpolated_poses_pass_through_keys(rng):
    keys = [sample_pose(rng, 2, 1.0, 1.0) for _ in range(3)]
    path = interpolate_poses(keys, 9)
    assert len(path) == 9
    assert np.allclose(path[0].joint_angles, keys[0].joint_angles)
    assert np.allclose(path[4].joint_angles, keys[1].joint_angles)
    assert np.allclose(path[-1].global_translation, keys[-1].global_translation)
    assert len(interpolate_poses(keys[:1], 4)) == 4


def test_identity_specs_are_reproducible():
    a = sample_identity_spec(np.random.default_rng(5), 2)
    b = sample_identity_spec(np.random.default_rng(5), 2)
    assert a == b and a.limb_count == 2


def test_render_depth_of_a_sphere():
    sphere = TriMesh.from_trimesh(trimesh.creation.icosphere(subdivisions=3, radius=0.2))
    camera = Camera.facing_origin(33, 45.0, 1.6)
    frame = render_depth(sphere, camera)
    assert np.isclose(frame.depth[16, 16], 1.4, atol=0.005)
    assert frame.depth[0, 0] == 0.0
    points = frame.points()
    assert len(points) == np.count_nonzero(frame.depth)
    assert np.allclose(np.linalg.norm(points, axis=1), 0.2, atol=0.005)
    assert np.all(points[:, 2] > 0)


def test_depth_frame_file(tmp_path, rng):
    camera = Camera.facing_origin(8, 60.0, 2.0)
    frame = DepthFrame(rng.uniform(0, 2, size=(8, 8)), camera.fx, camera.fy, camera.cx, camera.cy, camera.cam_to_world)
    loaded = load_depth(save_depth(frame, tmp_path / "f.depth"))
    assert np.array_equal(loaded.depth, frame.depth)
    assert np.allclose(loaded.cam_to_world, frame.cam_to_world) and loaded.fx == frame.fx
    with pytest.raises(MissingInputError):
        load_depth(tmp_path / "missing.depth")
    (tmp_path / "bad.depth").write_bytes(b"x" * 200)
    with pytest.raises(IncompatibleInputError, match="version"):
        load_depth(tmp_path / "bad.depth")


def test_depth_frame_validation():
    with pytest.raises(ValueError, match="non-negative"):
        DepthFrame(-np.ones((2, 2)), 1.0, 1.0, 0.5, 0.5, np.eye(4))


def test_camera_dict_is_yaml_safe():
    camera = Camera.facing_origin(16, 45.0, 1.6)
    restored = Camera.from_dict(yaml.safe_load(yaml.safe_dump(camera.to_dict())))
    assert np.allclose(restored.cam_to_world, camera.cam_to_world) and restored.fx == pytest.approx(camera.fx)


def test_corpus_layout(corpus):
    assert len(corpus.canonical) == 2 and len(corpus.held_out_canonical) == 1
    assert corpus.pose_to_identity == [0, 0, 1, 1]
    assert [s.kind for s in corpus.sequences] == ["pose", "identity"]
    assert all(len(s.frames) == len(s.meshes) == 3 for s in corpus.sequences)
    for j, i in enumerate(corpus.pose_to_identity):
        assert corpus.posed[j].same_topology(corpus.canonical[i])
    meshes = corpus.canonical + corpus.held_out_canonical + corpus.posed + [m for s in corpus.sequences for m in s.meshes]
    assert np.isclose(max(np.abs(m.vertices).max() for m in meshes), 0.5)


def test_shared_poses_repeat_across_identities(corpus):
    assert np.allclose(corpus.poses[0].joint_angles, corpus.poses[2].joint_angles)


def test_corpus_is_deterministic(corpus):
    again = build_corpus(TINY, seed=3, threads=2)
    assert np.isclose(again.scale, corpus.scale)
    assert all(np.array_equal(a.vertices, b.vertices) for a, b in zip(again.posed, corpus.posed))
    assert np.array_equal(again.sequences[0].frames[1].depth, corpus.sequences[0].frames[1].depth)


def test_corpus_files(tmp_path):
    manifest = generate_corpus(TINY, tmp_path / "corpus", seed=3)
    loaded = CorpusManifest.load(tmp_path / "corpus")
    assert loaded.data == yaml.safe_load(manifest.dump())
    assert len(loaded.canonical_meshes()) == 2 and all(m.watertight for m in loaded.canonical_meshes())
    assert len(loaded.posed_meshes()) == 4
    sequence = loaded.sequence("seq_000")
    assert len(sequence["frames"]) == 3
    frame = load_depth(loaded.path(sequence["frames"][0]["depth"]))
    assert frame.depth.shape == (16, 16)
    with pytest.raises(MissingInputError):
        loaded.sequence("seq_999")


def test_manifest_version_is_checked(tmp_path):
    generate_corpus(TINY, tmp_path, seed=0)
    path = tmp_path / "manifest.yaml"
    data = yaml.safe_load(path.read_text())
    data["format_version"] = 99
    path.write_text(yaml.safe_dump(data))
    with pytest.raises(IncompatibleInputError, match="version"):
        CorpusManifest.load(tmp_path)
    with pytest.raises(MissingInputError):
        CorpusManifest.load(tmp_path / "nowhere")


def test_render_depth_keeps_the_nearest_hit():
    front = trimesh.creation.icosphere(subdivisions=2, radius=0.1)
    front.apply_translation([0.0, 0.0, 0.4])
    back = trimesh.creation.icosphere(subdivisions=2, radius=0.2)
    both = TriMesh.from_trimesh(trimesh.util.concatenate([front, back]))
    camera = Camera.facing_origin(33, 45.0, 1.6)
    assert np.isclose(render_depth(both, camera).depth[16, 16], 1.1, atol=0.005)
    # hits closer than ``near`` are skipped
    assert np.isclose(render_depth(both, camera, near=1.35).depth[16, 16], 1.4, atol=0.005)
    assert not render_depth(TriMesh.empty(), camera).depth.any()
