"""Per-point PCA eigenvalues over an adaptive support radius and the derived
planarity / omnivariance / curvature features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from boltpipe.accel import HAVE_NUMBA, njit, prange
from boltpipe.cloud import PointCloud, SpatialIndex, mean_point_spacing


def influence_radius(ps: float) -> float:
    """Adaptive PCA support radius from the mean point spacing (meters).

    r = 5*ps - 16*ps^2, positive only for 0 < ps < 5/16.
    """
    if not 0.0 < ps < 5.0 / 16.0:
        raise ValueError(f"point spacing {ps} outside (0, 5/16)")
    return 5.0 * ps - 16.0 * ps * ps


@njit(cache=True)
def _eig3_sym(a00, a01, a02, a11, a12, a22):
    """Eigenvalues of a symmetric 3x3 matrix, descending (closed form)."""
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    if p1 == 0.0:
        e0, e1, e2 = a00, a11, a22
        if e0 < e1:
            e0, e1 = e1, e0
        if e1 < e2:
            e1, e2 = e2, e1
        if e0 < e1:
            e0, e1 = e1, e0
        return e0, e1, e2
    q = (a00 + a11 + a22) / 3.0
    b00 = a00 - q
    b11 = a11 - q
    b22 = a22 - q
    p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    detb = (
        b00 * (b11 * b22 - a12 * a12)
        - a01 * (a01 * b22 - a12 * a02)
        + a02 * (a01 * a12 - b11 * a02)
    )
    r = detb / (2.0 * p * p * p)
    if r < -1.0:
        r = -1.0
    elif r > 1.0:
        r = 1.0
    phi = np.arccos(r) / 3.0
    e0 = q + 2.0 * p * np.cos(phi)
    e2 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e1 = 3.0 * q - e0 - e2
    return e0, e1, e2


@njit(cache=True, parallel=True)
def _eigenvalues_csr_numba(positions, indices, indptr, out):
    n = indptr.shape[0] - 1
    for i in prange(n):
        start = indptr[i]
        stop = indptr[i + 1]
        m = stop - start
        if m < 3:
            out[i, 0] = 0.0
            out[i, 1] = 0.0
            out[i, 2] = 0.0
            continue
        mx = 0.0
        my = 0.0
        mz = 0.0
        for j in range(start, stop):
            p = indices[j]
            mx += positions[p, 0]
            my += positions[p, 1]
            mz += positions[p, 2]
        mx /= m
        my /= m
        mz /= m
        c00 = 0.0
        c01 = 0.0
        c02 = 0.0
        c11 = 0.0
        c12 = 0.0
        c22 = 0.0
        for j in range(start, stop):
            p = indices[j]
            dx = positions[p, 0] - mx
            dy = positions[p, 1] - my
            dz = positions[p, 2] - mz
            c00 += dx * dx
            c01 += dx * dy
            c02 += dx * dz
            c11 += dy * dy
            c12 += dy * dz
            c22 += dz * dz
        c00 /= m
        c01 /= m
        c02 /= m
        c11 /= m
        c12 /= m
        c22 /= m
        e0, e1, e2 = _eig3_sym(c00, c01, c02, c11, c12, c22)
        if e2 < 0.0:
            e2 = 0.0
        if e1 < e2:
            e1 = e2
        if e0 < e1:
            e0 = e1
        out[i, 0] = e0
        out[i, 1] = e1
        out[i, 2] = e2


def _eigenvalues_csr_numpy(positions, indices, indptr, out):
    n = indptr.shape[0] - 1
    counts = np.diff(indptr)
    valid = counts >= 3
    out[~valid] = 0.0
    if not valid.any():
        return
    # Per-neighborhood covariance via segment sums over the flattened CSR.
    pts = positions[indices]
    starts = indptr[:-1].copy()
    # reduceat needs strictly valid start offsets; empty segments handled below
    starts = np.minimum(starts, len(indices) - 1) if len(indices) else starts
    sums = np.add.reduceat(pts, starts, axis=0) if len(indices) else np.zeros((n, 3))
    outer = pts[:, :, None] * pts[:, None, :]
    sq = (
        np.add.reduceat(outer.reshape(len(pts), 9), starts, axis=0)
        if len(indices)
        else np.zeros((n, 9))
    )
    counts_f = counts.astype(np.float64)
    empty = counts == 0
    sums[empty] = 0.0
    sq[empty] = 0.0
    counts_f[empty] = 1.0
    mean = sums / counts_f[:, None]
    cov = sq.reshape(n, 3, 3) / counts_f[:, None, None] - mean[:, :, None] * mean[:, None, :]
    eigs = np.linalg.eigvalsh(cov[valid])[:, ::-1]
    eigs = np.maximum(eigs, 0.0)
    out[valid] = eigs


def local_eigenvalues(cloud: PointCloud, index: SpatialIndex, r: float,
                      workers: int = 1) -> np.ndarray:
    """(n, 3) eigenvalue array, descending per row, of each point's local
    covariance over the radius-r neighborhood (query point included).

    Neighborhoods with fewer than 3 points yield (0, 0, 0).
    """
    if r <= 0:
        raise ValueError("support radius must be positive")
    neighbor_lists = index.query_ball_all(r, workers=workers)
    indptr = np.zeros(len(cloud) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(lst) for lst in neighbor_lists])
    indices = (
        np.concatenate([np.asarray(lst, dtype=np.int64) for lst in neighbor_lists])
        if indptr[-1]
        else np.empty(0, dtype=np.int64)
    )
    out = np.empty((len(cloud), 3), dtype=np.float64)
    if HAVE_NUMBA:
        _eigenvalues_csr_numba(cloud.positions, indices, indptr, out)
    else:
        _eigenvalues_csr_numpy(cloud.positions, indices, indptr, out)
    return out


@dataclass
class GeomFeatures:
    """Per-point planarity, omnivariance, and curvature arrays."""

    planarity: np.ndarray
    omnivariance: np.ndarray
    curvature: np.ndarray


def geometric_features(eigenvalues: np.ndarray) -> GeomFeatures:
    """Planarity (l2-l3)/l1, omnivariance (l1*l2*l3)^(1/3), curvature
    l3/(l1+l2+l3). Singular neighborhoods (zero denominators) yield zeros.
    """
    e = np.atleast_2d(np.asarray(eigenvalues, dtype=np.float64))
    l1, l2, l3 = e[:, 0], e[:, 1], e[:, 2]
    if np.any(l3 < 0) or np.any(l2 > l1) or np.any(l3 > l2):
        raise ValueError("eigenvalues must satisfy l1 >= l2 >= l3 >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        planarity = np.where(l1 > 0, (l2 - l3) / np.where(l1 > 0, l1, 1.0), 0.0)
        total = l1 + l2 + l3
        curvature = np.where(total > 0, l3 / np.where(total > 0, total, 1.0), 0.0)
    omnivariance = np.cbrt(l1 * l2 * l3)
    if np.asarray(eigenvalues).ndim == 1:
        return GeomFeatures(planarity[0], omnivariance[0], curvature[0])
    return GeomFeatures(planarity, omnivariance, curvature)


def compute_feature_channels(cloud: PointCloud, index: SpatialIndex | None = None,
                             r: float | None = None,
                             workers: int = 1) -> PointCloud:
    """Attach lambda1..3, planarity, omnivariance, curvature channels.

    The support radius defaults to influence_radius(mean_point_spacing).
    """
    if index is None:
        index = SpatialIndex(cloud)
    if r is None:
        r = influence_radius(mean_point_spacing(cloud))
    eigs = local_eigenvalues(cloud, index, r, workers=workers)
    feats = geometric_features(eigs)
    out = cloud
    for name, values in (
        ("lambda1", eigs[:, 0]),
        ("lambda2", eigs[:, 1]),
        ("lambda3", eigs[:, 2]),
        ("planarity", feats.planarity),
        ("omnivariance", feats.omnivariance),
        ("curvature", feats.curvature),
    ):
        out = out.with_channel(name, values)
    return out
