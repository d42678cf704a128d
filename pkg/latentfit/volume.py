"""
Regular signed-distance grids: trilinear lookups, differentiable sampling and
isosurface extraction.

Values sit on grid nodes ``origin + voxel_size * (i, j, k)``. The ``mask`` marks
usable nodes (``True``); occluded or unobserved nodes are ``False``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from skimage import measure

from latentfit import tape as tp
from latentfit.errors import LatentfitError, MissingInputError
from latentfit.mesh import TriMesh
from latentfit.tape import Tensor

GRID_MAGIC = b"LFSDFGRD"
GRID_VERSION = 1
_HEADER = struct.Struct("<8sI3I3dd")

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


class GridError(LatentfitError):
    pass


@dataclass
class SdfGrid:
    values: np.ndarray
    origin: np.ndarray
    voxel_size: float
    mask: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise GridError(f"Grid values must be 3-D with at least 2 nodes per axis, got {self.values.shape}.")
        if not self.voxel_size > 0:
            raise GridError(f"Voxel size must be positive, got {self.voxel_size}.")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise GridError(f"Mask shape {self.mask.shape} does not match values {self.values.shape}.")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * (np.array(self.values.shape) - 1)

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[d] + self.voxel_size * np.arange(n) for d, n in enumerate(self.values.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    @classmethod
    def unit_box(cls, resolution: int, values: np.ndarray | None = None, half_extent: float = 0.5) -> SdfGrid:
        """Grid with ``resolution`` nodes per axis spanning ``[-half_extent, half_extent]^3``."""
        if values is None:
            values = np.zeros((resolution,) * 3)
        return cls(values.reshape((resolution,) * 3), np.full(3, -half_extent), 2.0 * half_extent / (resolution - 1))

    @classmethod
    def from_function(
        cls, fn: Callable[[np.ndarray], np.ndarray], resolution: int, half_extent: float = 0.5
    ) -> SdfGrid:
        grid = cls.unit_box(resolution, half_extent=half_extent)
        grid.values = np.asarray(fn(grid.node_positions()), dtype=np.float64).reshape(grid.values.shape)
        return grid


def _cell_coordinates(grid: SdfGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = (points - grid.origin) / grid.voxel_size
    base = np.clip(np.floor(u).astype(np.int64), 0, np.array(grid.values.shape) - 2)
    return base, u - base


def _in_bounds(grid: SdfGrid, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    u = (points - grid.origin) / grid.voxel_size
    return np.all((u >= -tol) & (u <= np.array(grid.values.shape) - 1 + tol), axis=1)


def _corner_weights(frac: np.ndarray) -> np.ndarray:
    # (n, 8) products of per-axis linear weights, corners ordered like _CORNERS
    w = np.stack([1.0 - frac, frac], axis=2)
    return w[:, 0, _CORNERS[:, 0]] * w[:, 1, _CORNERS[:, 1]] * w[:, 2, _CORNERS[:, 2]]


def _corner_values(array: np.ndarray, base: np.ndarray) -> np.ndarray:
    idx = base[:, None, :] + _CORNERS[None]
    return array[idx[..., 0], idx[..., 1], idx[..., 2]]


def trilinear(grid: SdfGrid, x: np.ndarray) -> np.ndarray | float:
    """Trilinear blend of the 8 nodes around each query; queries must lie inside the grid."""
    x = np.asarray(x, dtype=np.float64)
    points = x.reshape(-1, 3)
    if not np.all(_in_bounds(grid, points)):
        raise GridError("Trilinear query outside the grid bounds.")
    base, frac = _cell_coordinates(grid, points)
    out = np.sum(_corner_weights(frac) * _corner_values(grid.values, base), axis=1)
    return float(out[0]) if x.ndim == 1 else out


def trilinear_mask(grid: SdfGrid, x: np.ndarray) -> np.ndarray | bool:
    """A query is usable only when all 8 corners of its cell are usable."""
    x = np.asarray(x, dtype=np.float64)
    points = x.reshape(-1, 3)
    if not np.all(_in_bounds(grid, points)):
        raise GridError("Mask query outside the grid bounds.")
    base, _ = _cell_coordinates(grid, points)
    out = np.all(_corner_values(grid.mask, base), axis=1)
    return bool(out[0]) if x.ndim == 1 else out


def sample_grid(grid: SdfGrid, points: Tensor) -> tuple[Tensor, np.ndarray]:
    """
    Differentiable trilinear lookup at ``points`` of shape ``(n, 3)``.

    Points outside the grid are clamped to the border and reported unusable,
    together with points in cells that touch a masked node.
    """
    points = tp.as_tensor(points)
    p = points.value
    inside = _in_bounds(grid, p)
    clamped = np.clip(p, grid.origin, grid.upper)
    base, frac = _cell_coordinates(grid, clamped)
    corners = _corner_values(grid.values, base)
    values = np.sum(_corner_weights(frac) * corners, axis=1)
    usable = inside & np.all(_corner_values(grid.mask, base), axis=1)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        w = np.stack([1.0 - frac, frac], axis=2)
        dw = np.array([-1.0, 1.0])
        grad = np.zeros_like(p)
        for axis in range(3):
            factors = []
            for other in range(3):
                if other == axis:
                    factors.append(dw[_CORNERS[:, other]][None, :])
                else:
                    factors.append(w[:, other, _CORNERS[:, other]])
            d = factors[0] * factors[1] * factors[2]
            grad[:, axis] = np.sum(d * corners, axis=1) / grid.voxel_size
        grad *= inside[:, None]
        return (g[:, None] * grad,)

    return tp.apply_op(values, (points,), backward), usable


def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriMesh:
    """
    Triangulate the ``iso`` level set of the grid.

    Returns an empty mesh when the grid never crosses the level. The watertight
    flag is set when the surface closes, which holds whenever it stays away
    from the grid border.
    """
    if not np.all(np.isfinite(grid.values)):
        raise GridError("Marching cubes needs finite grid values.")
    if not (grid.values.min() < iso < grid.values.max()):
        return TriMesh.empty()
    vertices, faces, _, _ = measure.marching_cubes(
        grid.values,
        level=iso,
        spacing=(grid.voxel_size,) * 3,
        gradient_direction="ascent",
        allow_degenerate=True,
    )
    return TriMesh.closed(vertices.astype(np.float64) + grid.origin, faces)


def save_grid(grid: SdfGrid, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, *grid.values.shape, *grid.origin, grid.voxel_size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(grid.values.astype("<f8").tobytes(order="C"))
        f.write(grid.mask.astype(np.uint8).tobytes(order="C"))
    return path


def load_grid(path: str | os.PathLike) -> SdfGrid:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"Grid {path} does not exist.")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise GridError(f"{path} is truncated.")
    magic, version, nx, ny, nz, ox, oy, oz, voxel = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC or version != GRID_VERSION:
        raise GridError(f"{path} is not a version {GRID_VERSION} SDF grid.")
    count = nx * ny * nz
    if len(data) != _HEADER.size + 9 * count:
        raise GridError(f"{path} has {len(data)} bytes, expected {_HEADER.size + 9 * count}.")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size)
    mask = np.frombuffer(data, dtype=np.uint8, count=count, offset=_HEADER.size + 8 * count)
    return SdfGrid(
        values.reshape(nx, ny, nz).astype(np.float64),
        np.array([ox, oy, oz]),
        voxel,
        mask.reshape(nx, ny, nz).astype(bool),
    )
