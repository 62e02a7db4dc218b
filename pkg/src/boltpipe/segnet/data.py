"""Tiling of filtered clouds into fixed-size network samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from boltpipe.cloud import PointCloud

LAMBDA_CHANNELS = ("lambda1", "lambda2", "lambda3")
BLOCK_SIZE = 2.0  # meters, XY footprint of one tile column


@dataclass
class SampleTile:
    """(n_s, 6) feature rows (x, y, z, l1, l2, l3) with XYZ centered on the
    tile centroid, plus binary labels and the source point ids."""

    features: np.ndarray
    labels: np.ndarray
    point_ids: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != 6:
            raise ValueError("tile features must be (n_s, 6)")
        if np.any(self.features[:, 3:] < 0):
            raise ValueError("eigenvalue columns must be nonnegative")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels length must match tile size")


def _feature_matrix(cloud: PointCloud) -> np.ndarray:
    for name in LAMBDA_CHANNELS:
        if name not in cloud.channels:
            raise ValueError(f"cloud is missing the {name!r} channel")
    return np.column_stack(
        [cloud.positions] + [cloud.channels[c] for c in LAMBDA_CHANNELS]
    )


def _block_keys(positions: np.ndarray) -> np.ndarray:
    cells = np.floor(positions[:, :2] / BLOCK_SIZE).astype(np.int64)
    return cells[:, 0] * (2**31) + cells[:, 1]


def _make_tile(feat, labels, ids) -> SampleTile:
    feat = feat.copy()
    feat[:, :3] -= feat[:, :3].mean(axis=0)
    return SampleTile(feat, labels.astype(np.uint8), ids)


def make_tiles(cloud: PointCloud, n_s: int = 2048, seed: int = 0,
               tiles_per_block: int = 1) -> list[SampleTile]:
    """One training tile per 2 m x 2 m block (more with tiles_per_block),
    sampled to exactly n_s points: with replacement when the block is
    smaller than n_s, without replacement otherwise. Deterministic in seed.
    """
    if len(cloud) == 0:
        raise ValueError("cannot tile an empty cloud")
    feat = _feature_matrix(cloud)
    labels = cloud.labels if cloud.labels is not None else np.zeros(
        len(cloud), dtype=np.uint8
    )
    rng = np.random.default_rng(seed)
    keys = _block_keys(cloud.positions)
    tiles = []
    for key in np.unique(keys):
        ids = np.flatnonzero(keys == key)
        for _ in range(tiles_per_block):
            pick = rng.choice(ids, size=n_s, replace=len(ids) < n_s)
            pick = np.sort(pick)
            tiles.append(_make_tile(feat[pick], labels[pick], pick))
    return tiles


def cover_tiles(cloud: PointCloud, n_s: int = 2048) -> list[SampleTile]:
    """Deterministic inference tiling: per block, chunks of n_s points over
    a fixed shuffle of the block (so each tile mixes the block's structures
    rather than taking consecutive storage order), the last chunk wrapping
    to the start, so every point lands in at least one tile."""
    if len(cloud) == 0:
        raise ValueError("cannot tile an empty cloud")
    feat = _feature_matrix(cloud)
    labels = cloud.labels if cloud.labels is not None else np.zeros(
        len(cloud), dtype=np.uint8
    )
    keys = _block_keys(cloud.positions)
    shuffle = np.random.default_rng(0)
    tiles = []
    for key in np.unique(keys):
        ids = shuffle.permutation(np.flatnonzero(keys == key))
        if len(ids) <= n_s:
            reps = int(np.ceil(n_s / len(ids)))
            pick = np.tile(ids, reps)[:n_s]
            tiles.append(_make_tile(feat[pick], labels[pick], pick))
            continue
        for start in range(0, len(ids), n_s):
            chunk = ids[start:start + n_s]
            if len(chunk) < n_s:
                chunk = np.concatenate([chunk, ids[: n_s - len(chunk)]])
            tiles.append(_make_tile(feat[chunk], labels[chunk], chunk))
    return tiles
