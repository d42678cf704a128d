from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from latentfit.errors import LatentfitError

TIE_CANDIDATES = 8


class EmptyIndexError(LatentfitError):
    pass


class PointIndex:
    """
    Exact nearest-neighbour queries over a fixed point set.

    Ties are resolved towards the lowest point index. The indexed points are
    copied and made read-only, so one index can serve concurrent queries.
    """

    def __init__(self, points: np.ndarray) -> None:
        points = np.array(points, dtype=np.float64).reshape(-1, 3)
        points.setflags(write=False)
        self.points = points
        self._tree = cKDTree(points) if len(points) else None

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest indexed point for each query row."""
        if self._tree is None:
            raise EmptyIndexError("Cannot query an empty point index.")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(TIE_CANDIDATES, len(self.points))
        distances, indices = self._tree.query(queries, k=k)
        if k == 1:
            return distances, indices.astype(np.int64)
        distances = np.atleast_2d(distances)
        indices = np.atleast_2d(indices)
        tied = distances == distances[:, :1]
        best = np.where(tied, indices, np.iinfo(np.int64).max).min(axis=1)
        return distances[:, 0], best.astype(np.int64)


def nearest_neighbor(index: PointIndex, q: np.ndarray) -> tuple[np.ndarray, np.ndarray | float]:
    """Nearest indexed point and its distance; batched when ``q`` is ``(n, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    distances, indices = index.query(q)
    points = index.points[indices]
    if q.ndim == 1:
        return points[0], float(distances[0])
    return points, distances
