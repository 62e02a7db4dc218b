"""Point cloud container and exact spatial queries shared by every stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class PointCloud:
    """Positions plus optional binary labels and named per-point scalars.

    positions : (n, 3) float64, meters, finite
    labels    : optional (n,) uint8 in {0, 1}; 1 = bolt
    channels  : dict of name -> (n,) float64
    """

    positions: np.ndarray
    labels: np.ndarray | None = None
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be an (n, 3) array")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite coordinates")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (len(self),):
                raise ValueError("labels length must match point count")
            if self.labels.size and self.labels.max() > 1:
                raise ValueError("labels must be 0 or 1")
        for name, values in list(self.channels.items()):
            values = np.ascontiguousarray(values, dtype=np.float64)
            if values.shape != (len(self),):
                raise ValueError(f"channel {name!r} length must match point count")
            self.channels[name] = values

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, ids) -> "PointCloud":
        """New cloud restricted to the given point ids (labels/channels carried)."""
        ids = np.asarray(ids)
        labels = self.labels[ids] if self.labels is not None else None
        channels = {k: v[ids] for k, v in self.channels.items()}
        return PointCloud(self.positions[ids], labels, channels)

    def with_channel(self, name: str, values) -> "PointCloud":
        channels = dict(self.channels)
        channels[name] = np.asarray(values, dtype=np.float64)
        return PointCloud(self.positions, self.labels, channels)


class SpatialIndex:
    """Immutable exact k-NN / radius index over one cloud (kd-tree backed).

    Results match a brute-force scan; k-NN ties are broken by ascending
    point id so queries are fully deterministic.
    """

    def __init__(self, cloud: PointCloud):
        self._positions = cloud.positions.copy()
        self._positions.setflags(write=False)
        self._tree = cKDTree(self._positions)

    @property
    def n_points(self) -> int:
        return self._positions.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self._positions

    def radius_query(self, center, r: float) -> np.ndarray:
        """Ids of all points with Euclidean distance <= r from center, ascending."""
        if r <= 0:
            raise ValueError("radius must be positive")
        ids = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), r)
        return np.sort(np.asarray(ids, dtype=np.int64))

    def knn_query(self, center, k: int) -> np.ndarray:
        """The k nearest ids in nondecreasing distance order, ties by ascending id."""
        n = self.n_points
        if k > n:
            raise ValueError(f"k={k} exceeds point count {n}")
        if k < 1:
            raise ValueError("k must be >= 1")
        center = np.asarray(center, dtype=np.float64)
        d, _ = self._tree.query(center, k=k)
        dk = float(np.atleast_1d(d)[-1])
        # Re-rank every candidate at distance <= dk so boundary ties follow
        # the ascending-id rule exactly.
        cand = np.asarray(
            self._tree.query_ball_point(center, dk * (1.0 + 1e-12) + 1e-300),
            dtype=np.int64,
        )
        dist = np.sqrt(((self._positions[cand] - center) ** 2).sum(axis=1))
        order = np.lexsort((cand, dist))
        return cand[order][:k]

    def query_ball_all(self, r: float, workers: int = 1):
        """Neighbor id lists within r for every indexed point (list of arrays)."""
        return self._tree.query_ball_point(self._positions, r, workers=workers)

    def knn_all(self, k: int, workers: int = 1):
        """Distances and ids of the k nearest neighbors of every indexed point."""
        return self._tree.query(self._positions, k=k, workers=workers)

    def tree(self) -> cKDTree:
        return self._tree


def mean_point_spacing(cloud: PointCloud, workers: int = 1) -> float:
    """Mean distance from each point to its single nearest neighbor."""
    if len(cloud) < 2:
        raise ValueError("mean_point_spacing requires at least 2 points")
    tree = cKDTree(cloud.positions)
    d, _ = tree.query(cloud.positions, k=2, workers=workers)
    return float(d[:, 1].mean())
