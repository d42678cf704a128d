"""
Indexed triangle meshes: OBJ exchange, corpus normalization, closest-point
queries, inside tests and signed distance.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import trimesh
from scipy import ndimage

from latentfit.errors import LatentfitError, MissingInputError

logger = logging.getLogger(__name__)


class MeshError(LatentfitError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    watertight: bool = False

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("Face indices out of range.")
        if self.watertight and not edges_closed(self.faces):
            raise MeshError("Mesh flagged watertight is not closed.")

    @classmethod
    def empty(cls) -> TriMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @classmethod
    def closed(cls, vertices: np.ndarray, faces: np.ndarray) -> TriMesh:
        """Build a mesh and set the watertight flag when closedness verifies."""
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        return cls(vertices, faces, watertight=len(faces) > 0 and edges_closed(faces))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def face_normals(self) -> np.ndarray:
        tris = self.triangles
        normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        return normals / np.maximum(norms, 1e-300)

    @property
    def face_areas(self) -> np.ndarray:
        tris = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def bounds(self) -> np.ndarray:
        if len(self.vertices) == 0:
            return np.zeros((2, 3))
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return len(used) - len(_unique_edges(self.faces)) + len(self.faces)

    def same_topology(self, other: TriMesh) -> bool:
        return len(self.vertices) == len(other.vertices) and np.array_equal(self.faces, other.faces)

    def with_vertices(self, vertices: np.ndarray) -> TriMesh:
        """Same connectivity, new positions; closedness is topological so the flag carries over."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"Vertex array {vertices.shape} does not match {self.vertices.shape}.")
        return TriMesh(vertices, self.faces, watertight=self.watertight)

    def scaled(self, factor: float) -> TriMesh:
        return self.with_vertices(self.vertices * factor)

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> TriMesh:
        return cls.closed(np.array(mesh.vertices, dtype=np.float64), np.array(mesh.faces))


def _unique_edges(faces: np.ndarray) -> np.ndarray:
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(edges, axis=1), axis=0)


def edges_closed(faces: np.ndarray) -> bool:
    """Every undirected edge is shared by exactly two triangles."""
    faces = np.asarray(faces).reshape(-1, 3)
    if len(faces) == 0:
        return False
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    _, counts = np.unique(np.sort(edges, axis=1), axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def load_obj(path: str | os.PathLike) -> TriMesh:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"Mesh {path} does not exist.")
    loaded = trimesh.load(path, file_type="obj", process=False, maintain_order=True, force="mesh")
    if not isinstance(loaded, trimesh.Trimesh):
        raise MeshError(f"{path} does not hold a single triangle mesh.")
    return TriMesh.from_trimesh(loaded)


def save_obj(mesh: TriMesh, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = trimesh.exchange.obj.export_obj(
        mesh.to_trimesh(), include_normals=False, include_color=False, include_texture=False, digits=12
    )
    path.write_text(text)
    return path


def normalize_corpus(meshes: Sequence[TriMesh]) -> tuple[float, list[TriMesh]]:
    """
    Divide every mesh by one global extent.

    The divisor is ``2 * max|coordinate|`` over the corpus: the side of the
    smallest origin-centred cube holding every mesh. Meshes are not re-centred,
    so for an off-centre corpus this exceeds the largest bounding-box extent.
    The rescaled meshes all lie in ``[-0.5, 0.5]^3``. Returns the divisor and
    the rescaled meshes.
    """
    if len(meshes) == 0:
        raise MeshError("Cannot normalize an empty corpus.")
    extent = 2.0 * max(float(np.abs(m.vertices).max(initial=0.0)) for m in meshes)
    if extent <= 0:
        raise MeshError("Corpus has zero extent.")
    return extent, [m.scaled(1.0 / extent) for m in meshes]


def sample_surface(
    mesh: TriMesh, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Area-weighted surface samples.

    Returns points ``(n, 3)``, face indices ``(n,)`` and barycentric weights
    ``(n, 3)`` so the same samples can be re-evaluated on any mesh sharing the
    connectivity.
    """
    if mesh.is_empty:
        raise MeshError("Cannot sample an empty mesh.")
    if not mesh.area > 0:
        raise MeshError("Mesh has zero surface area.")
    points, face_index = trimesh.sample.sample_surface(mesh.to_trimesh(), n, seed=rng)
    face_index = np.asarray(face_index, dtype=np.int64)
    barycentric = _barycentric(mesh, face_index, points)
    return barycentric_points(mesh, face_index, barycentric), face_index, barycentric


def barycentric_points(mesh: TriMesh, face_index: np.ndarray, barycentric: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkd->nd", barycentric, mesh.triangles[face_index])


def _barycentric(mesh: TriMesh, face_index: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Convex weights of ``points`` on their faces; round-off is clipped back into the triangle."""
    if len(face_index) == 0:
        return np.zeros((0, 3))
    bary = trimesh.triangles.points_to_barycentric(mesh.triangles[face_index], points)
    bary = np.clip(np.nan_to_num(bary, nan=1.0 / 3.0), 0.0, None)
    return bary / bary.sum(axis=1, keepdims=True)


def closest_points(mesh: TriMesh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact closest surface points.

    Returns ``(closest, distance, face_index, barycentric)``.
    """
    if mesh.is_empty:
        raise MeshError("Cannot query distances to an empty mesh.")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    closest, distance, face_index = trimesh.proximity.closest_point(mesh.to_trimesh(), points)
    face_index = np.asarray(face_index, dtype=np.int64)
    closest = np.asarray(closest, dtype=np.float64)
    return closest, np.asarray(distance, dtype=np.float64), face_index, _barycentric(mesh, face_index, closest)


def unsigned_distance(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    return closest_points(mesh, points)[1]


def contains(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Ray-parity inside test against a watertight mesh."""
    if not mesh.watertight:
        raise MeshError("Inside test requires a watertight mesh.")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    return np.asarray(mesh.to_trimesh().contains(points), dtype=bool)


def flood_fill_inside(mesh: TriMesh, points: np.ndarray, resolution: int = 128) -> np.ndarray:
    """
    Inside test by voxel flood fill.

    Voxels touched by the surface are solid; everything not reachable from the
    grid border through empty voxels counts as inside. Accurate to about one
    voxel near the surface.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo, hi = mesh.bounds
    voxel = float((hi - lo).max()) / (resolution - 4)
    origin = lo - 2.0 * voxel
    shape = np.ceil((hi - origin) / voxel).astype(int) + 3

    n_samples = int(min(4e6, max(1e4, 8.0 * mesh.area / voxel**2)))
    surface, _, _ = sample_surface(mesh, n_samples, np.random.default_rng(0))
    solid = np.zeros(shape, dtype=bool)
    cells = np.floor((np.concatenate([surface, mesh.vertices]) - origin) / voxel).astype(int)
    solid[tuple(cells.T)] = True
    inside = ndimage.binary_fill_holes(solid)

    cells = np.floor((points - origin) / voxel).astype(int)
    in_grid = np.all((cells >= 0) & (cells < shape), axis=1)
    result = np.zeros(len(points), dtype=bool)
    result[in_grid] = inside[tuple(cells[in_grid].T)]
    return result


def mesh_signed_distance(
    mesh: TriMesh, x: np.ndarray, sign: str = "parity", resolution: int = 128
) -> np.ndarray | float:
    """
    Signed distance to a watertight mesh, negative inside.

    ``x`` may be one point or an ``(n, 3)`` batch; ``sign`` picks the ray-parity
    test or the voxel flood-fill fallback.
    """
    if not mesh.watertight:
        raise MeshError("Signed distance requires a watertight mesh.")
    x = np.asarray(x, dtype=np.float64)
    points = x.reshape(-1, 3)
    distance = unsigned_distance(mesh, points)
    if sign == "parity":
        inside = contains(mesh, points)
    elif sign == "flood_fill":
        inside = flood_fill_inside(mesh, points, resolution)
    else:
        raise ValueError(f"Unknown sign method {sign!r}.")
    sdf = np.where(inside, -distance, distance)
    return float(sdf[0]) if x.ndim == 1 else sdf
