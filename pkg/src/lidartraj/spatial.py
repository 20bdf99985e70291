"""Spatial search and gridding utilities shared by the pipeline stages.

The point index is a median-split axis-aligned bounding-box tree with leaf
size 16 (scipy's cKDTree with ``balanced_tree=True`` builds exactly that);
queries are exact, so a radius query returns the same set as a linear scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

LEAF_SIZE = 16


class PointIndex:
    """Exact nearest-neighbour / radius queries over a fixed set of 3D points."""

    def __init__(self, points: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(self.points, leafsize=leaf_size, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.points)

    def radius_query(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Indices of all points within ``radius`` of ``center``, ascending."""
        idx = self._tree.query_ball_point(np.asarray(center, float), radius)
        return np.sort(np.asarray(idx, dtype=np.int64))

    def nearest(self, queries: np.ndarray, max_distance: float = np.inf):
        """Nearest point for each query row.

        Returns (distances, indices); queries with no point within
        ``max_distance`` get distance inf and index ``len(self)``.
        """
        d, i = self._tree.query(np.asarray(queries, float), k=1, distance_upper_bound=max_distance)
        return d, i

    def knn(self, queries: np.ndarray, k: int):
        """k nearest points per query row: (distances (N,k), indices (N,k))."""
        d, i = self._tree.query(np.asarray(queries, float), k=k)
        if k == 1:
            d, i = d[:, None], i[:, None]
        return d, i


def voxel_keys(points: np.ndarray, pitch: float) -> np.ndarray:
    """Integer voxel coordinates floor(p / pitch); negatives floor towards -inf."""
    return np.floor(np.asarray(points, float) / pitch).astype(np.int64)


_LANE_BITS = 21
_LANE_BIAS = 1 << (_LANE_BITS - 1)
_LANE_LIMIT = _LANE_BIAS - 1


def pack_voxel_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer voxel coords into one int64 per voxel (collision-free)."""
    if np.any(np.abs(keys) > _LANE_LIMIT):
        raise ValueError("voxel coordinates exceed packable range")
    k = keys + _LANE_BIAS
    return (k[:, 0] << (2 * _LANE_BITS)) | (k[:, 1] << _LANE_BITS) | k[:, 2]


def voxel_downsample(points: np.ndarray, pitch: float, weights: np.ndarray | None = None):
    """Replace each occupied voxel by the centroid of its points.

    Output rows are ordered by voxel key, so the result is independent of
    any prior ordering of equal input sets up to summation order.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points.copy()
    packed = pack_voxel_keys(voxel_keys(points, pitch))
    uniq, inverse = np.unique(packed, return_inverse=True)
    if weights is None:
        counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
        out = np.empty((len(uniq), 3))
        for axis in range(3):
            out[:, axis] = np.bincount(inverse, weights=points[:, axis], minlength=len(uniq))
        return out / counts[:, None]
    wsum = np.bincount(inverse, weights=weights, minlength=len(uniq))
    out = np.empty((len(uniq), 3))
    for axis in range(3):
        out[:, axis] = np.bincount(inverse, weights=points[:, axis] * weights, minlength=len(uniq))
    return out / wsum[:, None]
