"""Bolt distance and distribution maps over an identified cloud."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from boltpipe.cloud import PointCloud
from boltpipe.metrics import extract_instances

# Color-bin edges used when exporting RGB ramps.
DISTANCE_BINS = (0.6, 1.4)   # meters: blue below, red above
COUNT_BINS = (6, 16)         # bolts within the unit radius: red below, blue above


def bolt_centroids(cloud: PointCloud, labels, eps: float = 0.1,
                   min_pts: int = 50) -> np.ndarray:
    """(m, 3) centroids, one per extracted bolt instance."""
    instances = extract_instances(cloud, labels, eps, min_pts)
    if not instances:
        return np.empty((0, 3))
    return np.stack([cloud.positions[inst].mean(axis=0) for inst in instances])


def distance_map(cloud: PointCloud, bolt_points: np.ndarray) -> np.ndarray:
    """Per-point Euclidean distance to the nearest bolt point."""
    bolt_points = np.atleast_2d(np.asarray(bolt_points, dtype=np.float64))
    if bolt_points.size == 0:
        raise ValueError("bolt point set is empty")
    tree = cKDTree(bolt_points)
    d, _ = tree.query(cloud.positions, k=1)
    return np.asarray(d, dtype=np.float64)


def distribution_map(cloud: PointCloud, centroids: np.ndarray,
                     radius: float = 2.0) -> np.ndarray:
    """Per-point count of bolt centroids within the given radius."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if centroids.size == 0:
        return np.zeros(len(cloud), dtype=np.float64)
    tree = cKDTree(centroids)
    counts = tree.query_ball_point(cloud.positions, radius, return_length=True)
    return np.asarray(counts, dtype=np.float64)


def _ramp(values, lo, hi, invert=False):
    t = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    if invert:
        t = 1.0 - t
    red = np.round(255 * t)
    blue = np.round(255 * (1.0 - t))
    return red, blue


def attach_maps(cloud: PointCloud, bolt_points: np.ndarray,
                centroids: np.ndarray, radius: float = 2.0,
                rgb: bool = False) -> PointCloud:
    """Attach 'distance' and 'bolt_count' channels (plus optional red/blue
    ramp channels clamped at the standard bin edges)."""
    out = cloud.with_channel("distance", distance_map(cloud, bolt_points))
    out = out.with_channel("bolt_count", distribution_map(cloud, centroids, radius))
    if rgb:
        red, blue = _ramp(out.channels["distance"], *DISTANCE_BINS)
        out = out.with_channel("distance_red", red)
        out = out.with_channel("distance_blue", blue)
        red, blue = _ramp(out.channels["bolt_count"], *COUNT_BINS, invert=True)
        out = out.with_channel("count_red", red)
        out = out.with_channel("count_blue", blue)
    return out
