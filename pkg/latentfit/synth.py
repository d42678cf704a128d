"""
Procedural corpus of articulated capsule figures.

A figure is one tube swept along a straight skeleton: a torso segment in the
middle with the same limb chain attached on either side, capped by hemispheres.
Every identity with the same limb count shares one connectivity, and posing by
linear blend skinning only moves vertices, so canonical and posed meshes are in
exact dense correspondence.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from latentfit.config import CorpusConfig
from latentfit.errors import IncompatibleInputError, MissingInputError
from latentfit.mesh import MeshError, TriMesh, load_obj, normalize_corpus, save_obj
from latentfit.utils import atomic_write_text, derive_rng, parallel_map

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEPTH_MAGIC = b"LFDEPTH1"
DEPTH_VERSION = 1
_DEPTH_HEADER = struct.Struct("<8sIII4d16d")

# derive_rng stage keys
_IDENTITY, _POSE, _SEQUENCE = 1, 2, 3


@dataclass(frozen=True)
class IdentitySpec:
    torso_length: float
    torso_radius: float
    limb_lengths: tuple = ()
    limb_radii: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "limb_lengths", tuple(float(v) for v in self.limb_lengths))
        object.__setattr__(self, "limb_radii", tuple(float(v) for v in self.limb_radii))
        if len(self.limb_lengths) != len(self.limb_radii):
            raise ValueError("Every limb needs both a length and a radius.")
        values = (self.torso_length, self.torso_radius) + self.limb_lengths + self.limb_radii
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise ValueError(f"Identity dimensions must be positive and finite: {self}.")

    @property
    def limb_count(self) -> int:
        return len(self.limb_lengths)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class PoseSpec:
    """
    Joint rotations as XYZ Euler angles in radians, one row per joint, followed
    by a global rigid transform (rotation vector and translation).
    """

    joint_angles: np.ndarray
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "joint_angles", np.asarray(self.joint_angles, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "global_rotation", np.asarray(self.global_rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "global_translation", np.asarray(self.global_translation, dtype=np.float64).reshape(3))

    @classmethod
    def canonical(cls, joints: int) -> PoseSpec:
        return cls(np.zeros((joints, 3)))

    @property
    def is_canonical(self) -> bool:
        return not (self.joint_angles.any() or self.global_rotation.any() or self.global_translation.any())

    def check_limits(self, limit: float) -> None:
        if np.any(np.abs(self.joint_angles) > limit + 1e-12):
            raise ValueError(f"Joint angles exceed the limit of {np.rad2deg(limit):.1f} degrees.")

    def to_dict(self) -> dict:
        return {
            "joint_angles": self.joint_angles.tolist(),
            "global_rotation": self.global_rotation.tolist(),
            "global_translation": self.global_translation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PoseSpec:
        return cls(np.array(data["joint_angles"]).reshape(-1, 3), data["global_rotation"], data["global_translation"])


@dataclass
class Skeleton:
    """Bones ordered along +x; ``joints[b]`` is where bone ``b`` hinges on ``parents[b]``."""

    starts: np.ndarray
    ends: np.ndarray
    radii: np.ndarray
    parents: np.ndarray
    joints: np.ndarray
    root: int

    @property
    def bone_count(self) -> int:
        return len(self.starts)

    @property
    def joint_bones(self) -> list[int]:
        """Bones driven by ``PoseSpec.joint_angles`` rows: left chain outwards, then right chain outwards."""
        left = list(range(self.root - 1, -1, -1))
        right = list(range(self.root + 1, self.bone_count))
        return left + right

    def blend_width(self) -> float:
        lengths = self.ends - self.starts
        return float(min(0.25 * lengths.min(), 0.5 * self.radii.min()))


def skeleton(spec: IdentitySpec) -> Skeleton:
    n = spec.limb_count
    lengths = list(reversed(spec.limb_lengths)) + [spec.torso_length] + list(spec.limb_lengths)
    radii = list(reversed(spec.limb_radii)) + [spec.torso_radius] + list(spec.limb_radii)
    lengths, radii = np.array(lengths), np.array(radii)
    left_end = -spec.torso_length / 2.0 - sum(spec.limb_lengths)
    edges = left_end + np.concatenate([[0.0], np.cumsum(lengths)])
    starts, ends = edges[:-1], edges[1:]

    parents = np.full(2 * n + 1, -1)
    joints = np.zeros((2 * n + 1, 3))
    for b in range(2 * n + 1):
        if b < n:
            parents[b], joints[b, 0] = b + 1, ends[b]
        elif b > n:
            parents[b], joints[b, 0] = b - 1, starts[b]
    return Skeleton(starts, ends, radii, parents, joints, root=n)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _axial_weights(skel: Skeleton, x: np.ndarray) -> np.ndarray:
    """Per-bone weights for points at axial coordinate ``x``."""
    bone = np.clip(np.searchsorted(skel.ends, x, side="right"), 0, skel.bone_count - 1)
    weights = np.zeros((len(x), skel.bone_count))
    weights[np.arange(len(x)), bone] = 1.0
    w = skel.blend_width()
    for b in range(1, skel.bone_count):
        at = skel.starts[b]
        near = np.abs(x - at) < w
        if not near.any():
            continue
        s = _smoothstep((x[near] - (at - w)) / (2.0 * w))
        weights[near] = 0.0
        weights[near, b - 1] = 1.0 - s
        weights[near, b] = s
    return weights


@dataclass
class SkinnedMesh:
    mesh: TriMesh
    weights: np.ndarray
    skeleton: Skeleton


def build_identity(
    spec: IdentitySpec, ring_vertices: int = 24, rings_per_bone: int = 8, cap_rings: int = 6
) -> SkinnedMesh:
    """Watertight canonical mesh of ``spec`` with per-vertex skinning weights."""
    if ring_vertices < 3 or rings_per_bone < 1 or cap_rings < 1:
        raise ValueError("Mesh resolution parameters are too small.")
    skel = skeleton(spec)
    body_x = np.concatenate(
        [np.linspace(s, e, rings_per_bone, endpoint=False) for s, e in zip(skel.starts, skel.ends)]
        + [[skel.ends[-1]]]
    )
    weights_body = _axial_weights(skel, body_x)
    radius_body = weights_body @ skel.radii

    r_left, r_right = skel.radii[0], skel.radii[-1]
    phi = np.arange(cap_rings - 1, 0, -1) * (np.pi / 2.0) / cap_rings
    left_x = skel.starts[0] - r_left * np.sin(phi)
    right_x = skel.ends[-1] + r_right * np.sin(phi[::-1])
    ring_x = np.concatenate([left_x, body_x, right_x])
    ring_r = np.concatenate([r_left * np.cos(phi), radius_body, r_right * np.cos(phi[::-1])])

    one_hot = np.eye(skel.bone_count)
    ring_w = np.concatenate(
        [np.repeat(one_hot[:1], len(left_x), 0), weights_body, np.repeat(one_hot[-1:], len(right_x), 0)]
    )

    theta = 2.0 * np.pi * np.arange(ring_vertices) / ring_vertices
    rings = len(ring_x)
    ring_points = np.stack(
        [
            np.repeat(ring_x, ring_vertices),
            np.outer(ring_r, np.cos(theta)).ravel(),
            np.outer(ring_r, np.sin(theta)).ravel(),
        ],
        axis=1,
    )
    poles = np.array([[skel.starts[0] - r_left, 0.0, 0.0], [skel.ends[-1] + r_right, 0.0, 0.0]])
    vertices = np.concatenate([poles[:1], ring_points, poles[1:]])
    weights = np.concatenate([one_hot[:1], np.repeat(ring_w, ring_vertices, 0), one_hot[-1:]])

    def ring_index(i: int, j: np.ndarray) -> np.ndarray:
        return 1 + i * ring_vertices + (j % ring_vertices)

    j = np.arange(ring_vertices)
    faces = [np.stack([np.zeros_like(j), ring_index(0, j + 1), ring_index(0, j)], axis=1)]
    for i in range(rings - 1):
        a, b = ring_index(i, j), ring_index(i, j + 1)
        c, d = ring_index(i + 1, j + 1), ring_index(i + 1, j)
        faces.append(np.stack([a, b, c], axis=1))
        faces.append(np.stack([a, c, d], axis=1))
    last = len(vertices) - 1
    faces.append(np.stack([np.full_like(j, last), ring_index(rings - 1, j), ring_index(rings - 1, j + 1)], axis=1))

    mesh = TriMesh(vertices, np.concatenate(faces), watertight=True)
    if np.any(mesh.face_areas <= 0):
        raise MeshError("Figure mesh has degenerate triangles.")
    return SkinnedMesh(mesh, weights, skel)


def bone_transforms(skel: Skeleton, pose: PoseSpec) -> np.ndarray:
    """World transforms ``(bones, 4, 4)`` of every bone, without the global transform."""
    transforms = np.tile(np.eye(4), (skel.bone_count, 1, 1))
    bones = skel.joint_bones
    if len(pose.joint_angles) != len(bones):
        raise ValueError(f"Pose has {len(pose.joint_angles)} joints, skeleton has {len(bones)}.")
    local = {b: Rotation.from_euler("xyz", angles).as_matrix() for b, angles in zip(bones, pose.joint_angles)}
    for b in bones:  # parents precede children in this order
        hinge = np.eye(4)
        hinge[:3, :3] = local[b]
        hinge[:3, 3] = skel.joints[b] - local[b] @ skel.joints[b]
        transforms[b] = transforms[skel.parents[b]] @ hinge
    return transforms


def pose_identity(
    canonical: SkinnedMesh, pose: PoseSpec, joint_limit: float = np.deg2rad(100.0)
) -> TriMesh:
    """Linear blend skinning of the canonical figure; vertex order and faces are kept."""
    pose.check_limits(joint_limit)
    transforms = bone_transforms(canonical.skeleton, pose)
    v = canonical.mesh.vertices
    homogeneous = np.concatenate([v, np.ones((len(v), 1))], axis=1)
    blended = np.einsum("vb,bij->vij", canonical.weights, transforms)
    posed = np.einsum("vij,vj->vi", blended, homogeneous)[:, :3]
    rotation = Rotation.from_rotvec(pose.global_rotation).as_matrix()
    posed = posed @ rotation.T + pose.global_translation
    return canonical.mesh.with_vertices(posed)


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray

    @classmethod
    def facing_origin(cls, image_size: int, fov_deg: float, distance: float) -> Camera:
        """Camera on +z looking at the origin; image x right, image y down."""
        focal = (image_size / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
        pose = np.eye(4)
        pose[:3, :3] = np.diag([1.0, -1.0, -1.0])
        pose[:3, 3] = (0.0, 0.0, distance)
        centre = (image_size - 1) / 2.0
        return cls(image_size, image_size, focal, focal, centre, centre, pose)

    def to_dict(self) -> dict:
        return {
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "cam_to_world": self.cam_to_world.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Camera:
        return cls(**{**data, "cam_to_world": np.array(data["cam_to_world"], dtype=np.float64)})

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z, shape ``(height, width, 3)``."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, dtype=float)], axis=-1)


@dataclass
class DepthFrame:
    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        if self.depth.ndim != 2:
            raise ValueError(f"Depth image must be 2-D, got {self.depth.shape}.")
        if min(self.fx, self.fy) <= 0:
            raise ValueError("Focal lengths must be positive.")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("Depths must be finite and non-negative.")

    @property
    def camera(self) -> Camera:
        h, w = self.depth.shape
        return Camera(w, h, self.fx, self.fy, self.cx, self.cy, self.cam_to_world)

    def points(self) -> np.ndarray:
        """World-space back-projection of every pixel with a hit."""
        rays = self.camera.pixel_rays()
        hit = self.depth > 0
        local = rays[hit] * self.depth[hit][:, None]
        return local @ self.cam_to_world[:3, :3].T + self.cam_to_world[:3, 3]


def render_depth(mesh: TriMesh, camera: Camera, near: float = 1e-6) -> DepthFrame:
    """Casts one ray per pixel; each pixel keeps the camera-frame depth of its nearest hit beyond ``near``."""
    depth = np.full(camera.height * camera.width, np.inf)
    if not mesh.is_empty:
        rotation, eye = camera.cam_to_world[:3, :3], camera.cam_to_world[:3, 3]
        directions = camera.pixel_rays().reshape(-1, 3) @ rotation.T
        origins = np.tile(eye, (len(directions), 1))
        locations, index_ray, _ = mesh.to_trimesh().ray.intersects_location(origins, directions, multiple_hits=True)
        if len(index_ray):
            z = (np.asarray(locations) - eye) @ rotation[:, 2]
            ahead = z > near
            np.minimum.at(depth, np.asarray(index_ray)[ahead], z[ahead])
    depth[~np.isfinite(depth)] = 0.0
    depth = depth.reshape(camera.height, camera.width)
    return DepthFrame(depth, camera.fx, camera.fy, camera.cx, camera.cy, camera.cam_to_world.copy())


def save_depth(frame: DepthFrame, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = frame.depth.shape
    header = _DEPTH_HEADER.pack(
        DEPTH_MAGIC, DEPTH_VERSION, w, h, frame.fx, frame.fy, frame.cx, frame.cy, *frame.cam_to_world.ravel()
    )
    path.write_bytes(header + frame.depth.astype("<f8").tobytes(order="C"))
    return path


def load_depth(path: str | os.PathLike) -> DepthFrame:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"Depth frame {path} does not exist.")
    data = path.read_bytes()
    if len(data) < _DEPTH_HEADER.size:
        raise IncompatibleInputError(f"{path} is truncated.")
    fields = _DEPTH_HEADER.unpack_from(data)
    magic, version, w, h = fields[:4]
    if magic != DEPTH_MAGIC or version != DEPTH_VERSION:
        raise IncompatibleInputError(f"{path} is not a version {DEPTH_VERSION} depth frame.")
    if len(data) != _DEPTH_HEADER.size + 8 * w * h:
        raise IncompatibleInputError(f"{path} has an unexpected size.")
    depth = np.frombuffer(data, dtype="<f8", offset=_DEPTH_HEADER.size).reshape(h, w)
    return DepthFrame(depth.astype(np.float64), *fields[4:8], np.array(fields[8:]).reshape(4, 4))


def sample_identity_spec(rng: np.random.Generator, limbs: int) -> IdentitySpec:
    limb_lengths = rng.uniform(0.22, 0.36, size=limbs)
    limb_radii = np.sort(rng.uniform(0.045, 0.075, size=limbs))[::-1]
    return IdentitySpec(
        torso_length=float(rng.uniform(0.45, 0.65)),
        torso_radius=float(rng.uniform(0.09, 0.13)),
        limb_lengths=tuple(limb_lengths),
        limb_radii=tuple(limb_radii),
    )


def sample_pose(rng: np.random.Generator, joints: int, limit: float, pose_range: float) -> PoseSpec:
    span = limit * pose_range
    angles = rng.uniform(-span, span, size=(joints, 3))
    angles[:, 0] *= 0.25  # twist about the bone axis stays small
    return PoseSpec(
        angles,
        global_rotation=rng.uniform(-0.2, 0.2, size=3) * pose_range,
        global_translation=rng.uniform(-0.02, 0.02, size=3),
    )


def interpolate_poses(keys: list[PoseSpec], frames: int) -> list[PoseSpec]:
    """Eased piecewise-linear pose trajectory through ``keys``."""
    if len(keys) == 1 or frames == 1:
        return [keys[0]] * frames
    s = np.linspace(0.0, len(keys) - 1, frames)
    out = []
    for value in s:
        k = min(int(value), len(keys) - 2)
        t = 0.5 - 0.5 * np.cos(np.pi * (value - k))
        a, b = keys[k], keys[k + 1]
        out.append(
            PoseSpec(
                (1 - t) * a.joint_angles + t * b.joint_angles,
                (1 - t) * a.global_rotation + t * b.global_rotation,
                (1 - t) * a.global_translation + t * b.global_translation,
            )
        )
    return out


@dataclass
class SequenceRecord:
    name: str
    identity: str
    kind: str
    poses: list[PoseSpec]
    meshes: list[TriMesh] = field(default_factory=list)
    frames: list[DepthFrame] = field(default_factory=list)


@dataclass
class Corpus:
    scale: float
    identity_names: list[str]
    identity_specs: list[IdentitySpec]
    canonical: list[TriMesh]
    held_out_names: list[str]
    held_out_specs: list[IdentitySpec]
    held_out_canonical: list[TriMesh]
    poses: list[PoseSpec]
    posed: list[TriMesh]
    pose_to_identity: list[int]
    sequences: list[SequenceRecord]
    camera: Camera


@dataclass
class CorpusManifest:
    root: Path
    data: dict

    @property
    def scale(self) -> float:
        return float(self.data["scale"])

    @property
    def identities(self) -> list[dict]:
        return self.data["identities"]

    @property
    def held_out_identities(self) -> list[dict]:
        return self.data["held_out_identities"]

    @property
    def posed(self) -> list[dict]:
        return self.data["posed"]

    @property
    def pose_to_identity(self) -> list[int]:
        return list(self.data["pose_to_identity"])

    @property
    def sequences(self) -> list[dict]:
        return self.data["sequences"]

    @property
    def camera(self) -> Camera:
        return Camera.from_dict(self.data["camera"])

    def path(self, relative: str) -> Path:
        return self.root / relative

    def canonical_meshes(self) -> list[TriMesh]:
        return [load_obj(self.path(item["canonical"])) for item in self.identities]

    def posed_meshes(self) -> list[TriMesh]:
        return [load_obj(self.path(item["mesh"])) for item in self.posed]

    def sequence(self, name: str) -> dict:
        for item in self.sequences:
            if item["name"] == name:
                return item
        raise MissingInputError(f"Corpus has no sequence named {name!r}.")

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    @classmethod
    def load(cls, root: str | os.PathLike) -> CorpusManifest:
        root = Path(root)
        path = root / "manifest.yaml"
        if not path.is_file():
            raise MissingInputError(f"No corpus manifest at {path}.")
        data = yaml.safe_load(path.read_text())
        version = data.get("format_version") if isinstance(data, dict) else None
        if version != MANIFEST_VERSION:
            raise IncompatibleInputError(f"Unsupported corpus manifest version {version}.")
        manifest = cls(root, data)
        manifest.validate()
        return manifest

    def validate(self) -> None:
        count = len(self.identities)
        m = self.pose_to_identity
        if len(m) != len(self.posed):
            raise IncompatibleInputError("pose_to_identity must cover every posed instance.")
        if any(not 0 <= i < count for i in m):
            raise IncompatibleInputError("pose_to_identity refers to a missing identity.")


def build_corpus(config: CorpusConfig, seed: int = 0, threads: int = 1) -> Corpus:
    config.validate()
    limit = np.deg2rad(config.joint_limit_deg)
    joints = 2 * config.limbs_per_side
    resolution = (config.ring_vertices, config.rings_per_bone, config.cap_rings)

    total = config.identities + config.held_out_identities
    specs = [sample_identity_spec(derive_rng(seed, _IDENTITY, i), config.limbs_per_side) for i in range(total)]
    figures = parallel_map(lambda spec: build_identity(spec, *resolution), specs, threads)

    def pose_list(identity: int) -> list[PoseSpec]:
        key = 0 if config.shared_poses else identity
        rng = derive_rng(seed, _POSE, key)
        return [sample_pose(rng, joints, limit, config.pose_range) for _ in range(config.poses_per_identity)]

    poses, pose_to_identity = [], []
    for i in range(config.identities):
        poses.extend(pose_list(i))
        pose_to_identity.extend([i] * config.poses_per_identity)
    posed = parallel_map(
        lambda item: pose_identity(figures[item[0]], item[1], limit), list(zip(pose_to_identity, poses)), threads
    )

    sequences = []
    seq_sources = [(k % config.identities, "pose") for k in range(config.sequences)]
    seq_sources += [(config.identities + h, "identity") for h in range(config.held_out_identities)]
    for k, (figure, kind) in enumerate(seq_sources):
        rng = derive_rng(seed, _SEQUENCE, k)
        keys = [sample_pose(rng, joints, limit, config.pose_range) for _ in range(config.keyposes)]
        trajectory = interpolate_poses(keys, config.sequence_frames)
        name = f"seq_{k:03d}"
        held_out = figure - config.identities
        identity = f"identity_{figure:03d}" if held_out < 0 else f"held_out_{held_out:03d}"
        record = SequenceRecord(name, identity, kind, trajectory)
        record.meshes = parallel_map(lambda p, f=figure: pose_identity(figures[f], p, limit), trajectory, threads)
        sequences.append(record)

    everything = [f.mesh for f in figures] + posed + [m for s in sequences for m in s.meshes]
    scale, normalized = normalize_corpus(everything)
    canonical = normalized[:total]
    posed = normalized[total : total + len(posed)]
    offset = total + len(posed)
    for record in sequences:
        record.meshes = normalized[offset : offset + len(record.meshes)]
        offset += len(record.meshes)

    camera = Camera.facing_origin(config.image_size, config.fov_deg, config.camera_distance)
    for record in sequences:
        record.frames = parallel_map(lambda mesh: render_depth(mesh, camera), record.meshes, threads)
    logger.info(
        "Built corpus: %d identities, %d posed, %d sequences, scale %.6f",
        config.identities,
        len(posed),
        len(sequences),
        scale,
    )
    return Corpus(
        scale=scale,
        identity_names=[f"identity_{i:03d}" for i in range(config.identities)],
        identity_specs=specs[: config.identities],
        canonical=canonical[: config.identities],
        held_out_names=[f"held_out_{h:03d}" for h in range(config.held_out_identities)],
        held_out_specs=specs[config.identities :],
        held_out_canonical=canonical[config.identities :],
        poses=poses,
        posed=posed,
        pose_to_identity=pose_to_identity,
        sequences=sequences,
        camera=camera,
    )


def write_corpus(corpus: Corpus, out_dir: str | os.PathLike, seed: int, config: CorpusConfig) -> CorpusManifest:
    root = Path(out_dir)
    identities = []
    for name, spec, mesh in zip(corpus.identity_names, corpus.identity_specs, corpus.canonical):
        rel = f"canonical/{name}.obj"
        save_obj(mesh, root / rel)
        identities.append({"name": name, "spec": spec.to_dict(), "canonical": rel})
    held_out = []
    for name, spec, mesh in zip(corpus.held_out_names, corpus.held_out_specs, corpus.held_out_canonical):
        rel = f"canonical/{name}.obj"
        save_obj(mesh, root / rel)
        held_out.append({"name": name, "spec": spec.to_dict(), "canonical": rel})
    posed = []
    for j, (pose, mesh, identity) in enumerate(zip(corpus.poses, corpus.posed, corpus.pose_to_identity)):
        rel = f"posed/{corpus.identity_names[identity]}_pose_{j:04d}.obj"
        save_obj(mesh, root / rel)
        posed.append({"name": f"posed_{j:04d}", "identity": identity, "pose": pose.to_dict(), "mesh": rel})
    sequences = []
    for record in corpus.sequences:
        frames = []
        for f, (pose, mesh, frame) in enumerate(zip(record.poses, record.meshes, record.frames)):
            mesh_rel = f"sequences/{record.name}/gt_{f:04d}.obj"
            depth_rel = f"sequences/{record.name}/frame_{f:04d}.depth"
            save_obj(mesh, root / mesh_rel)
            save_depth(frame, root / depth_rel)
            frames.append({"depth": depth_rel, "mesh": mesh_rel, "pose": pose.to_dict()})
        sequences.append(
            {"name": record.name, "identity": record.identity, "kind": record.kind, "frames": frames}
        )

    data = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "scale": float(corpus.scale),
        "corpus_config": {k: v for k, v in asdict(config).items()},
        "camera": corpus.camera.to_dict(),
        "identities": identities,
        "held_out_identities": held_out,
        "posed": posed,
        "pose_to_identity": list(corpus.pose_to_identity),
        "sequences": sequences,
    }
    manifest = CorpusManifest(root, data)
    manifest.validate()
    atomic_write_text(root / "manifest.yaml", manifest.dump())
    return manifest


def generate_corpus(
    config: CorpusConfig, out_dir: str | os.PathLike, seed: int = 0, threads: int = 1
) -> CorpusManifest:
    return write_corpus(build_corpus(config, seed, threads), out_dir, seed, config)
