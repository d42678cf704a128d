"""
Training samples for the shape and pose spaces.

Shape samples pair a point with the mesh's signed distance there, drawn near
the surface and uniformly in the unit box. Flow samples pair a canonical point
with its posed counterpart: one triangle, one barycentric triple and one normal
offset are evaluated on both meshes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latentfit.mesh import MeshError, TriMesh, barycentric_points, mesh_signed_distance, sample_surface

NEAR_SURFACE = 0
UNIFORM = 1
FLOW_SIGMAS = (0.01, 0.002)


@dataclass
class SdfSamples:
    points: np.ndarray
    sdf: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.sdf)

    @property
    def near_surface(self) -> np.ndarray:
        return self.source == NEAR_SURFACE

    @property
    def uniform(self) -> np.ndarray:
        return self.source == UNIFORM


@dataclass
class FlowSamples:
    canonical: np.ndarray
    posed: np.ndarray
    face_index: np.ndarray
    barycentric: np.ndarray
    offset: np.ndarray
    sigma: np.ndarray
    identity: int = 0
    pose: int = 0

    def __len__(self) -> int:
        return len(self.canonical)

    @property
    def flow(self) -> np.ndarray:
        return self.posed - self.canonical


def sample_shape_points(
    mesh: TriMesh,
    n_near: int,
    n_uniform: int,
    rng: np.random.Generator,
    band: float = 0.05,
    max_rounds: int = 50,
) -> SdfSamples:
    """
    ``n_near`` points within ``band`` of the surface followed by ``n_uniform``
    points in the unit box.

    Near-surface candidates are area-weighted surface points moved by an
    isotropic Gaussian whose scale is ``band / 2`` for half the draws and
    ``band / 10`` for the rest; candidates whose distance leaves the band are
    redrawn.
    """
    if not mesh.watertight:
        raise MeshError("Shape samples need a watertight mesh.")
    if n_near < 0 or n_uniform < 0:
        raise ValueError("Sample counts must be non-negative.")

    near_points, near_sdf = [], []
    missing = n_near
    for _ in range(max_rounds):
        if missing == 0:
            break
        draw = int(missing * 1.5) + 16
        base, _, _ = sample_surface(mesh, draw, rng)
        scale = np.where(rng.random(draw) < 0.5, band / 2.0, band / 10.0)
        candidates = base + rng.normal(size=(draw, 3)) * scale[:, None]
        sdf = mesh_signed_distance(mesh, candidates)
        keep = np.abs(sdf) <= band
        near_points.append(candidates[keep][:missing])
        near_sdf.append(sdf[keep][:missing])
        missing -= len(near_sdf[-1])
    if missing:
        raise MeshError(f"Could not place {n_near} samples within {band} of the surface.")

    uniform = rng.uniform(-0.5, 0.5, size=(n_uniform, 3))
    uniform_sdf = mesh_signed_distance(mesh, uniform) if n_uniform else np.zeros(0)
    return SdfSamples(
        points=np.concatenate(near_points + [uniform]).reshape(-1, 3),
        sdf=np.concatenate(near_sdf + [uniform_sdf]),
        source=np.repeat(np.array([NEAR_SURFACE, UNIFORM]), [n_near, n_uniform]),
    )


def _vertex_normals(mesh: TriMesh) -> np.ndarray:
    weighted = np.cross(
        mesh.triangles[:, 1] - mesh.triangles[:, 0], mesh.triangles[:, 2] - mesh.triangles[:, 0]
    )
    normals = np.zeros_like(mesh.vertices)
    for corner in range(3):
        np.add.at(normals, mesh.faces[:, corner], weighted)
    return normals


def _surface_normals(mesh: TriMesh, face_index: np.ndarray, barycentric: np.ndarray) -> np.ndarray:
    # Barycentric blend of area-weighted vertex normals, so the offset direction
    # follows each mesh smoothly across shared edges.
    normals = barycentric_points(mesh.with_vertices(_vertex_normals(mesh)), face_index, barycentric)
    return normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)


def sample_flow_pairs(
    canonical: TriMesh,
    posed: TriMesh,
    n: int,
    rng: np.random.Generator,
    sigmas: tuple[float, float] = FLOW_SIGMAS,
    identity: int = 0,
    pose: int = 0,
) -> FlowSamples:
    """
    Corresponding canonical/posed points, each displaced along its own mesh's
    normal by the same offset. Half the offsets use ``sigmas[0]``, half
    ``sigmas[1]``.
    """
    if not canonical.same_topology(posed):
        raise MeshError("Flow pairs need meshes with identical vertex count and faces.")
    _, face_index, barycentric = sample_surface(canonical, n, rng)
    sigma = np.where(np.arange(n) < n // 2, sigmas[0], sigmas[1])
    offset = rng.normal(size=n) * sigma

    def displaced(mesh: TriMesh) -> np.ndarray:
        base = barycentric_points(mesh, face_index, barycentric)
        return base + offset[:, None] * _surface_normals(mesh, face_index, barycentric)

    return FlowSamples(
        canonical=displaced(canonical),
        posed=displaced(posed),
        face_index=face_index,
        barycentric=barycentric,
        offset=offset,
        sigma=sigma,
        identity=identity,
        pose=pose,
    )
