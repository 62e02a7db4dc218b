import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boltpipe.cloud import PointCloud, SpatialIndex
from boltpipe.geomfilter import (
    FilterConfig,
    _dbscan_kdtree,
    curvature_threshold,
    dbscan,
    geometry_sensitive_filter,
    roi_refine,
    split_by_curvature,
)
from oracles import brute_dbscan, partitions_equal


class TestFilterConfig:
    def test_defaults(self):
        cfg = FilterConfig()
        assert cfg.percentile == 90.0
        assert cfg.dbscan_eps == 0.1
        assert cfg.dbscan_min_pts == 50
        assert cfg.g_th == 400
        assert cfg.roi_radius == 0.1

    @pytest.mark.parametrize("kw", [
        {"percentile": 0.0}, {"percentile": 100.0}, {"dbscan_eps": 0.0},
        {"roi_radius": -1.0}, {"dbscan_min_pts": 0}, {"g_th": 0},
    ])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            FilterConfig(**kw)


class TestCurvatureThreshold:
    def test_one_to_hundred(self):
        assert curvature_threshold(np.arange(1.0, 101.0), 90.0) == 90.0

    def test_constant(self):
        assert curvature_threshold(np.full(17, 3.5), 50.0) == 3.5

    def test_single_value(self):
        assert curvature_threshold([2.0], 99.0) == 2.0

    def test_empty(self):
        with pytest.raises(ValueError):
            curvature_threshold([], 90.0)

    @settings(max_examples=40, deadline=None)
    @given(values=st.lists(st.floats(-100, 100), min_size=1, max_size=200),
           p=st.floats(0.5, 99.5))
    def test_nearest_rank_oracle(self, values, p):
        import math
        want = sorted(values)[max(1, math.ceil(p / 100 * len(values))) - 1]
        assert curvature_threshold(values, p) == want


class TestSplitByCurvature:
    def _cloud(self, curv):
        n = len(curv)
        return PointCloud(np.arange(3 * n, dtype=float).reshape(n, 3),
                          labels=np.zeros(n, dtype=np.uint8),
                          channels={"curvature": np.asarray(curv, float)})

    def test_all_below(self):
        high, low = split_by_curvature(self._cloud([0.1, 0.2, 0.3]), 0.5)
        assert len(high) == 0 and len(low) == 3

    def test_negative_threshold_takes_all(self):
        high, low = split_by_curvature(self._cloud([0.1, 0.2]), -1.0)
        assert len(high) == 2 and len(low) == 0

    def test_strict_inequality(self):
        high, low = split_by_curvature(self._cloud([0.5, 0.6]), 0.5)
        assert len(high) == 1
        assert high.channels["curvature"][0] == 0.6

    def test_partition(self, rng):
        curv = rng.uniform(0, 1, 200)
        high, low = split_by_curvature(self._cloud(curv), 0.7)
        assert len(high) + len(low) == 200

    def test_percentile_bound(self, rng):
        curv = rng.uniform(0, 1, 1000)
        c_th = curvature_threshold(curv, 90.0)
        high, _ = split_by_curvature(self._cloud(curv), c_th)
        assert len(high) <= 100

    def test_missing_channel(self):
        with pytest.raises(ValueError):
            split_by_curvature(PointCloud(np.zeros((2, 3))), 0.5)


class TestDbscan:
    def test_validation(self):
        with pytest.raises(ValueError):
            dbscan(np.zeros((2, 3)), 0.0, 5)
        with pytest.raises(ValueError):
            dbscan(np.zeros((2, 3)), 0.1, 0)

    def test_empty(self):
        cs = dbscan(np.empty((0, 3)), 0.1, 5)
        assert cs.n_clusters == 0
        assert cs.assignment.size == 0

    def test_two_blobs(self, rng):
        a = rng.normal(0, 0.01, (100, 3))
        b = rng.normal(0, 0.01, (100, 3)) + [1.0, 0, 0]
        cs = dbscan(np.vstack([a, b]), 0.1, 50)
        assert cs.n_clusters == 2
        assert not np.any(cs.assignment == -1)
        assert len(set(cs.assignment[:100])) == 1
        assert len(set(cs.assignment[100:])) == 1

    def test_too_few_for_core(self, rng):
        cs = dbscan(rng.normal(0, 0.01, (30, 3)), 0.1, 50)
        assert cs.n_clusters == 0
        assert np.all(cs.assignment == -1)

    def test_one_dense_blob(self, rng):
        pts = rng.uniform(0, 0.05, (500, 3))
        cs = dbscan(pts, 0.1, 50)
        assert cs.n_clusters == 1
        assert np.all(cs.assignment == 0)

    def test_every_cluster_has_a_core_point(self, rng):
        # border points can be claimed by an earlier cluster, so cluster
        # sizes may drop below min_pts; each must still contain a core
        pts = rng.uniform(0, 1, (800, 3))
        eps, min_pts = 0.12, 8
        cs = dbscan(pts, eps, min_pts)
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        core = (d2 <= eps * eps).sum(axis=1) >= min_pts
        for c in range(cs.n_clusters):
            assert core[cs.members(c)].any()

    def test_matches_brute_force_small(self, rng):
        for trial in range(8):
            n = int(rng.integers(20, 300))
            pts = rng.uniform(0, 1, (n, 3)) * rng.uniform(0.3, 2.0)
            eps = float(rng.choice([0.05, 0.1, 0.2]))
            min_pts = int(rng.choice([5, 50]))
            got = dbscan(pts, eps, min_pts)
            want_labels, want_n = brute_dbscan(pts, eps, min_pts)
            assert got.n_clusters == want_n
            assert partitions_equal(got.assignment, want_labels)

    def test_matches_brute_force_grid_path(self, rng):
        # > 512 points exercises the accelerated grid traversal
        pts = np.vstack([
            rng.normal(0, 0.05, (300, 3)),
            rng.normal(0, 0.05, (300, 3)) + [0.6, 0, 0],
            rng.uniform(-1, 1.5, (100, 3)),
        ])
        got = dbscan(pts, 0.1, 20)
        want_labels, want_n = brute_dbscan(pts, 0.1, 20)
        assert got.n_clusters == want_n
        assert partitions_equal(got.assignment, want_labels)

    def test_grid_and_kdtree_paths_agree(self, rng):
        pts = rng.uniform(0, 1, (700, 3))
        got = dbscan(pts, 0.15, 10)
        labels, n = _dbscan_kdtree(np.ascontiguousarray(pts), 0.15, 10)
        assert n == got.n_clusters
        assert np.array_equal(labels, got.assignment)


class TestRoiRefine:
    def test_large_cluster_kept_verbatim(self, rng):
        pts = rng.normal(0, 0.02, (600, 3))
        cloud = PointCloud(pts)
        index = SpatialIndex(cloud)
        member_ids = np.arange(100, 600)
        cs = dbscan(pts[member_ids], 0.5, 5)
        assert cs.n_clusters == 1
        keep = roi_refine(cs, member_ids, index, g_th=400, roi_radius=1e-6)
        assert np.array_equal(keep, member_ids)

    def test_small_cluster_expands_to_roi(self, rng):
        base = rng.normal(0, 0.01, (200, 3))          # dense blob
        far = rng.normal(0, 0.01, (50, 3)) + [5, 0, 0]
        cloud = PointCloud(np.vstack([base, far]))
        index = SpatialIndex(cloud)
        member_ids = np.arange(0, 100)                 # half the blob clustered
        cs = dbscan(cloud.positions[member_ids], 0.5, 5)
        keep = roi_refine(cs, member_ids, index, g_th=400, roi_radius=0.5)
        # ROI ball recovers the whole blob, not the far points
        assert set(range(200)) <= set(keep)
        assert not (set(range(200, 250)) & set(keep))

    def test_zero_clusters(self, rng):
        cloud = PointCloud(rng.normal(0, 1, (10, 3)))
        cs = dbscan(cloud.positions[:3], 1e-6, 5)
        keep = roi_refine(cs, np.arange(3), SpatialIndex(cloud), 400, 0.1)
        assert keep.size == 0

    def test_output_sorted_unique(self, rng):
        pts = rng.normal(0, 0.02, (300, 3))
        cloud = PointCloud(pts)
        cs = dbscan(pts, 0.5, 5)
        keep = roi_refine(cs, np.arange(300), SpatialIndex(cloud), 10, 1.0)
        assert np.array_equal(keep, np.unique(keep))


class TestGeometrySensitiveFilter:
    def test_requires_points(self):
        with pytest.raises(ValueError):
            geometry_sensitive_filter(PointCloud(np.zeros((1, 3))))

    def test_synthetic_scan_quality(self, small_scan, filtered_scan):
        _, cloud, _ = small_scan
        filtered, stats = filtered_scan
        assert stats["bolt_points_preserved_pct"] >= 95.0
        assert stats["background_removed_pct"] >= 70.0
        bolts = int(filtered.labels.sum())
        background = len(filtered) - bolts
        assert background <= 20 * bolts
        # every bolt instance survives with enough points for matching
        ids = np.flatnonzero(filtered.labels == 1)
        cs = dbscan(filtered.positions[ids], 0.1, 50)
        assert cs.n_clusters == 6

    def test_output_subset_of_input(self, small_scan, filtered_scan):
        _, cloud, _ = small_scan
        filtered, _ = filtered_scan
        full = {p.tobytes() for p in cloud.positions}
        sample = filtered.positions[:: max(1, len(filtered) // 200)]
        assert all(p.tobytes() in full for p in sample)

    def test_channels_attached(self, filtered_scan):
        filtered, _ = filtered_scan
        for name in ("lambda1", "lambda2", "lambda3", "curvature"):
            assert name in filtered.channels

    def test_flat_plane_no_crash(self, rng):
        pts = np.column_stack([rng.uniform(0, 2, 4000),
                               rng.uniform(0, 2, 4000),
                               rng.normal(0, 0.001, 4000)])
        filtered, stats = geometry_sensitive_filter(PointCloud(pts))
        assert len(filtered) <= len(pts)

    def test_deterministic_and_thread_invariant(self, rng):
        pts = np.vstack([rng.uniform(0, 1, (3000, 3)),
                         rng.normal(0.5, 0.01, (500, 3))])
        cloud = PointCloud(pts)
        a, _ = geometry_sensitive_filter(cloud, workers=1)
        b, _ = geometry_sensitive_filter(cloud, workers=1)
        c, _ = geometry_sensitive_filter(cloud, workers=4)
        assert a.positions.tobytes() == b.positions.tobytes()
        assert a.positions.tobytes() == c.positions.tobytes()
