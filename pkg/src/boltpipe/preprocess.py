"""Pre-processing filters: k-NN plane-residual outlier removal, cloth
simulation floor removal, and connected-component pruning.

All three are strictly subtractive; labels and channels ride along.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from boltpipe.cloud import PointCloud, SpatialIndex


@dataclass
class PreprocessConfig:
    knn_k: int = 6
    knn_sigma_mult: float = 1.0
    csf_grid: float = 0.4
    csf_iterations: int = 500
    csf_threshold: float = 0.5
    csf_rigidness: int = 2
    cc_voxel: float = 0.016
    cc_min_points: int = 10000

    def __post_init__(self):
        if not 4 <= self.knn_k <= 15:
            raise ValueError("knn_k must be between 4 and 15")
        if not 400 <= self.csf_iterations <= 500:
            raise ValueError("csf_iterations must be between 400 and 500")
        for name in ("csf_grid", "csf_threshold", "cc_voxel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def knn_outlier_filter(cloud: PointCloud, k: int = 6,
                       sigma_mult: float = 1.0) -> PointCloud:
    """Remove points whose orthogonal residual to the least-squares plane of
    their k nearest neighbors exceeds sigma_mult times the global residual
    standard deviation. Collinear neighborhoods get residual 0 (retained).
    """
    if not 4 <= k <= 15:
        raise ValueError("k must be between 4 and 15")
    if len(cloud) <= k:
        raise ValueError("cloud must have more than k points")
    index = SpatialIndex(cloud)
    _, idx = index.knn_all(k + 1)
    nbrs = cloud.positions[idx[:, 1:]]  # exclude the point itself
    mean = nbrs.mean(axis=1)
    centered = nbrs - mean[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigval, eigvec = np.linalg.eigh(cov)
    normal = eigvec[:, :, 0]  # eigenvector of the smallest eigenvalue
    residual = np.abs(np.einsum("ni,ni->n", cloud.positions - mean, normal))
    # Plane underdetermined (neighbors collinear): second eigenvalue ~ 0.
    degenerate = eigval[:, 1] <= 1e-12 * np.maximum(eigval[:, 2], 1e-300)
    residual[degenerate] = 0.0
    threshold = sigma_mult * residual.std()
    return cloud.subset(np.flatnonzero(residual <= threshold))


def _simulate_cloth(terrain: np.ndarray, iterations: int, rigidness: int,
                    gravity_step: float) -> np.ndarray:
    """Drop a grid cloth onto a terrain height field (NaN = unsupported).

    Nodes fall by gravity_step per iteration, clamp (and pin) on terrain,
    and are pulled toward their 4-neighbor average `rigidness` times per
    iteration. Returns the settled node heights.
    """
    has_terrain = np.isfinite(terrain)
    start = np.nanmax(terrain[has_terrain]) if has_terrain.any() else 0.0
    z = np.full(terrain.shape, start + gravity_step, dtype=np.float64)
    pinned = np.zeros(terrain.shape, dtype=bool)
    for _ in range(iterations):
        z = np.where(pinned, z, z - gravity_step)
        hit = has_terrain & ~pinned & (z <= terrain)
        z = np.where(hit, terrain, z)
        pinned |= hit
        for _ in range(rigidness):
            padded = np.pad(z, 1, mode="edge")
            avg = (padded[:-2, 1:-1] + padded[2:, 1:-1]
                   + padded[1:-1, :-2] + padded[1:-1, 2:]) / 4.0
            z = np.where(pinned, z, z + 0.5 * (avg - z))
    return z


def cloth_simulation_filter(cloud: PointCloud, cfg: PreprocessConfig | None = None):
    """Split the cloud into (ground, offground) with a cloth draped over the
    Z-inverted points. Points within csf_threshold of the settled cloth are
    ground. Gravity is -Z of the scan frame.
    """
    if cfg is None:
        cfg = PreprocessConfig()
    if len(cloud) == 0:
        raise ValueError("cloud is empty")
    pos = cloud.positions
    inv_z = -pos[:, 2]
    lo = pos[:, :2].min(axis=0)
    hi = pos[:, :2].max(axis=0)
    extent = hi - lo
    nx = int(np.floor(extent[0] / cfg.csf_grid)) + 2
    ny = int(np.floor(extent[1] / cfg.csf_grid)) + 2
    if extent[0] < cfg.csf_grid or extent[1] < cfg.csf_grid:
        warnings.warn("cloud footprint smaller than one cloth cell; skipping CSF")
        empty = cloud.subset(np.empty(0, dtype=np.int64))
        return empty, cloud

    ix = np.clip(((pos[:, 0] - lo[0]) / cfg.csf_grid).astype(np.int64), 0, nx - 1)
    iy = np.clip(((pos[:, 1] - lo[1]) / cfg.csf_grid).astype(np.int64), 0, ny - 1)
    flat = ix * ny + iy
    terrain = np.full(nx * ny, -np.inf)
    np.maximum.at(terrain, flat, inv_z)
    terrain[~np.isfinite(terrain)] = np.nan
    cloth = _simulate_cloth(terrain.reshape(nx, ny), cfg.csf_iterations,
                            cfg.csf_rigidness, gravity_step=0.05 * cfg.csf_grid)

    # Bilinear interpolation of the cloth at each point's XY (cell centers).
    fx = (pos[:, 0] - lo[0]) / cfg.csf_grid - 0.5
    fy = (pos[:, 1] - lo[1]) / cfg.csf_grid - 0.5
    x0 = np.clip(np.floor(fx).astype(np.int64), 0, nx - 2)
    y0 = np.clip(np.floor(fy).astype(np.int64), 0, ny - 2)
    tx = np.clip(fx - x0, 0.0, 1.0)
    ty = np.clip(fy - y0, 0.0, 1.0)
    c = cloth
    height = ((1 - tx) * (1 - ty) * c[x0, y0] + tx * (1 - ty) * c[x0 + 1, y0]
              + (1 - tx) * ty * c[x0, y0 + 1] + tx * ty * c[x0 + 1, y0 + 1])
    ground_mask = np.abs(inv_z - height) <= cfg.csf_threshold
    ground = cloud.subset(np.flatnonzero(ground_mask))
    offground = cloud.subset(np.flatnonzero(~ground_mask))
    return ground, offground


def connected_component_filter(cloud: PointCloud, voxel: float = 0.016,
                               min_points: int = 10000) -> PointCloud:
    """Keep only points in 26-connected voxel components with >= min_points
    points. Voxel grid is anchored at the cloud minimum, pitch `voxel`."""
    if voxel <= 0:
        raise ValueError("voxel pitch must be positive")
    if len(cloud) == 0:
        return cloud
    pos = cloud.positions
    cells = np.floor((pos - pos.min(axis=0)) / voxel).astype(np.int64)
    ny = int(cells[:, 1].max()) + 2
    nz = int(cells[:, 2].max()) + 2
    keys = (cells[:, 0] * ny + cells[:, 1]) * nz + cells[:, 2]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    m = uniq.shape[0]

    rows = []
    cols = []
    offsets = [(dx, dy, dz)
               for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
               if (dx, dy, dz) > (0, 0, 0)]
    for dx, dy, dz in offsets:
        shifted = uniq + (dx * ny + dy) * nz + dz
        pos_idx = np.searchsorted(uniq, shifted)
        pos_idx = np.clip(pos_idx, 0, m - 1)
        hit = uniq[pos_idx] == shifted
        rows.append(np.flatnonzero(hit))
        cols.append(pos_idx[hit])
    if rows:
        row = np.concatenate(rows)
        col = np.concatenate(cols)
    else:
        row = col = np.empty(0, dtype=np.int64)
    graph = sparse.coo_matrix((np.ones(len(row), dtype=np.int8), (row, col)),
                              shape=(m, m))
    n_comp, comp = connected_components(graph, directed=False)
    comp_sizes = np.bincount(comp, weights=counts, minlength=n_comp)
    keep_comp = comp_sizes >= min_points
    keep = keep_comp[comp[inverse]]
    return cloud.subset(np.flatnonzero(keep))


def preprocess(cloud: PointCloud, cfg: PreprocessConfig | None = None,
               keep_floor: bool = False):
    """Full chain: k-NN outlier filter -> CSF floor removal -> connected
    components. Returns (clean_cloud, stats with per-step wall times)."""
    import time

    if cfg is None:
        cfg = PreprocessConfig()
    stats: dict[str, float] = {"points_in": float(len(cloud))}

    t0 = time.perf_counter()
    out = knn_outlier_filter(cloud, cfg.knn_k, cfg.knn_sigma_mult)
    stats["time_knn_filter"] = time.perf_counter() - t0
    stats["points_after_knn"] = float(len(out))

    t0 = time.perf_counter()
    if not keep_floor:
        _, out = cloth_simulation_filter(out, cfg)
    stats["time_csf"] = time.perf_counter() - t0
    stats["points_after_csf"] = float(len(out))

    t0 = time.perf_counter()
    out = connected_component_filter(out, cfg.cc_voxel, cfg.cc_min_points)
    stats["time_components"] = time.perf_counter() - t0
    stats["points_out"] = float(len(out))
    return out, stats
