import numpy as np
import pytest

from boltpipe.segnet.network import (
    MLPBlock,
    SegConfig,
    SegModel,
    _edges_backward,
    _edges_forward,
    _maxpool_backward,
    _maxpool_forward,
    knn_graph,
)
from oracles import brute_knn, numeric_gradient

TINY = SegConfig(k=5, transform_width=8, transform_hidden=4,
                 edge_widths=(8, 8, 8), agg_width=16, head_widths=(16, 8))


def tiny_batch(rng, n=64):
    xyz = rng.normal(0, 1, (n, 3))
    lam = np.sort(rng.uniform(0, 1, (n, 3)), axis=1)[:, ::-1]
    feats = np.column_stack([xyz, lam])
    labels = rng.integers(0, 2, n).astype(np.float64)
    return feats, labels


class TestKnnGraph:
    def test_matches_brute_small_path(self, rng):
        pts = rng.normal(0, 1, (60, 4))
        idx = knn_graph(pts, 7)
        for i in range(60):
            others = np.delete(np.arange(60), i)
            want = others[brute_knn(pts[others], pts[i], 7)]
            assert np.array_equal(idx[i], want)

    def test_matches_brute_large_path(self, rng):
        # > 512 rows exercises the argpartition branch
        pts = rng.normal(0, 1, (600, 3))
        idx = knn_graph(pts, 6)
        for i in range(0, 600, 97):
            others = np.delete(np.arange(600), i)
            want = others[brute_knn(pts[others], pts[i], 6)]
            assert np.array_equal(idx[i], want)

    def test_tie_breaking_ascending_id(self):
        pts = np.array([[0.0, 0], [1.0, 0], [-1.0, 0], [0.0, 1], [0.0, -1]])
        idx = knn_graph(pts, 3)
        assert np.array_equal(idx[0], [1, 2, 3])

    def test_self_excluded(self, rng):
        pts = rng.normal(0, 1, (30, 3))
        idx = knn_graph(pts, 5)
        for i in range(30):
            assert i not in idx[i]

    def test_k_too_large(self, rng):
        with pytest.raises(ValueError):
            knn_graph(rng.normal(0, 1, (5, 3)), 5)


class TestEdges:
    def test_forward_values(self):
        f = np.array([[1.0, 2.0], [3.0, 5.0], [0.0, 0.0]])
        idx = np.array([[1], [2], [0]])
        e = _edges_forward(f, idx)
        assert np.array_equal(e, [[1, 2, 2, 3], [3, 5, -3, -5], [0, 0, 1, 2]])

    def test_backward_matches_finite_differences(self, rng):
        f = rng.normal(0, 1, (7, 3))
        idx = knn_graph(f, 3)
        w = rng.normal(0, 1, 7 * 3 * 6)

        def loss(ff):
            return float(_edges_forward(ff, idx).ravel() @ w)

        de = w.reshape(7 * 3, 6)
        df = _edges_backward(de, f.shape, idx)
        h = 1e-6
        for i in range(7):
            for j in range(3):
                fp = f.copy()
                fp[i, j] += h
                fm = f.copy()
                fm[i, j] -= h
                num = (loss(fp) - loss(fm)) / (2 * h)
                assert df[i, j] == pytest.approx(num, abs=1e-6)


class TestMaxpool:
    def test_first_max_wins_on_tie(self):
        x = np.array([[[2.0, 1.0], [2.0, 3.0]]])  # tie in channel 0
        y, arg = _maxpool_forward(x, axis=1)
        assert np.array_equal(y, [[2.0, 3.0]])
        assert np.array_equal(arg, [[0, 1]])
        dx = _maxpool_backward(np.array([[1.0, 1.0]]), arg, x.shape, axis=1)
        assert np.array_equal(dx, [[[1.0, 0.0], [0.0, 1.0]]])


class TestMLPBlock:
    def _init(self, rng, **kw):
        blk = MLPBlock("b", 4, 3, **kw)
        params, state = {}, {}
        blk.init(params, state, rng)
        return blk, params, state

    def test_zero_init_outputs_bias(self, rng):
        blk, params, state = self._init(rng, bn=False, act=False,
                                        zero_init=True)
        out, _ = blk.forward(rng.normal(0, 1, (10, 4)), params, state)
        assert np.all(out == 0.0)

    def test_batchnorm_normalizes(self, rng):
        blk, params, state = self._init(rng, act=False)
        out, _ = blk.forward(rng.normal(3, 2, (500, 4)), params, state)
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-10)
        assert np.allclose(out.std(axis=0), 1.0, atol=1e-2)

    def test_running_stats_update(self, rng):
        blk, params, state = self._init(rng)
        x = rng.normal(0, 1, (100, 4))
        before = state["b/running_mean"].copy()
        blk.forward(x, params, state, mode="train")
        assert not np.array_equal(before, state["b/running_mean"])
        frozen = state["b/running_mean"].copy()
        blk.forward(x, params, state, mode="batch")
        assert np.array_equal(frozen, state["b/running_mean"])

    @pytest.mark.parametrize("kw", [
        dict(bn=False, act=False), dict(bn=False, act=True),
        dict(bn=True, act=True),
    ])
    def test_gradcheck(self, rng, kw):
        blk, params, state = self._init(rng, **kw)
        x = rng.normal(0, 1, (20, 4))
        w = rng.normal(0, 1, (20, 3))

        def scalar():
            out, _ = blk.forward(x, params, state, mode="batch")
            return float((out * w).sum())

        out, cache = blk.forward(x, params, state, mode="batch")
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        blk.backward(w, cache, params, grads)
        coords = [(k, i) for k in sorted(params)
                  for i in range(0, params[k].size, max(1, params[k].size // 4))]
        num = numeric_gradient(scalar, params, coords)
        got = np.array([grads[k].flat[i] for k, i in coords])
        assert np.allclose(got, num, rtol=1e-5, atol=1e-7)

    def test_input_gradient(self, rng):
        blk, params, state = self._init(rng, bn=False)
        x = rng.normal(0, 1, (12, 4))
        w = rng.normal(0, 1, (12, 3))
        _, cache = blk.forward(x, params, state)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        dx = blk.backward(w, cache, params, grads)
        h = 1e-6
        for i, j in [(0, 0), (5, 2), (11, 3)]:
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            op, _ = blk.forward(xp, params, state, mode="batch")
            om, _ = blk.forward(xm, params, state, mode="batch")
            num = float(((op - om) * w).sum()) / (2 * h)
            assert dx[i, j] == pytest.approx(num, abs=1e-5)


class TestSpatialTransform:
    def test_identity_at_zero_init(self, rng):
        model = SegModel(TINY, seed=1)
        xyz = rng.normal(0, 1, (40, 3))
        matrix, xyz_t, _ = model.spatial_transform(xyz, mode="batch")
        assert np.allclose(matrix, np.eye(3), atol=1e-12)
        assert np.allclose(xyz_t, xyz, atol=1e-12)

    def test_permutation_invariant_matrix(self, rng):
        model = SegModel(TINY, seed=1)
        # perturb so the transform is not trivially identity
        model.params["tf_out/W"] = rng.normal(0, 0.05,
                                              model.params["tf_out/W"].shape)
        xyz = rng.normal(0, 1, (40, 3))
        perm = rng.permutation(40)
        m1, _, _ = model.spatial_transform(xyz, mode="batch")
        m2, _, _ = model.spatial_transform(xyz[perm], mode="batch")
        assert np.allclose(m1, m2, atol=1e-9)


class TestEdgeConvLayer:
    def test_identical_features_zero_edge_diff(self, rng):
        # all points identical: f_j - f_i vanishes, so a no-bn block output
        # depends only on the f_i half of the weights
        blk = MLPBlock("e", 4, 3, bn=False, act=False)
        params, state = {}, {}
        blk.init(params, state, rng)
        f = np.tile([[1.0, 2.0]], (6, 1))
        idx = np.tile([[1]], (6, 1))
        idx[1] = 0
        e = _edges_forward(f, idx)
        assert np.all(e[:, 2:] == 0.0)
        out, _ = blk.forward(e, params, state)
        want = np.array([1.0, 2.0, 0, 0]) @ params["e/W"] + params["e/b"]
        assert np.allclose(out, np.tile(want, (6, 1)))

    def test_hand_computed_tiny_layer(self):
        # n=4, d=2, width=3, k=1: linear edge map then max over one neighbor
        f = np.array([[0.0, 0], [1.0, 0], [0.0, 2], [1.0, 2]])
        idx = knn_graph(f, 1)
        assert np.array_equal(idx.ravel(), [1, 0, 3, 2])
        W = np.arange(12.0).reshape(4, 3)
        b = np.array([0.5, -0.5, 0.0])
        e = _edges_forward(f, idx)
        out = e @ W + b
        # row 0: f_i=(0,0), diff=(1,0) -> [6,7,8] + b
        assert np.allclose(out[0], [6.5, 6.5, 8.0])
        # row 3: f_i=(1,2), diff=(-1,0) -> W row sums
        want = W[0] * 1 + W[1] * 2 + W[2] * -1 + b
        assert np.allclose(out[3], want)


class TestSegModelForward:
    def test_output_shape_and_finite(self, rng):
        model = SegModel(TINY, seed=0)
        feats, _ = tiny_batch(rng)
        logits, cache = model.forward(feats, mode="batch")
        assert logits.shape == (64,)
        assert np.all(np.isfinite(logits))

    def test_duplicate_points_ok(self, rng):
        model = SegModel(TINY, seed=0)
        feats, _ = tiny_batch(rng, 32)
        feats = np.vstack([feats, feats[:8]])
        logits, _ = model.forward(feats, mode="batch")
        assert logits.shape == (40,)

    def test_permutation_equivariance(self, rng):
        model = SegModel(TINY, seed=2)
        feats, _ = tiny_batch(rng, 48)
        perm = rng.permutation(48)
        a, _ = model.forward(feats, mode="batch")
        b, _ = model.forward(feats[perm], mode="batch")
        assert np.allclose(a[perm], b, atol=1e-9)

    def test_nonfinite_raises(self, rng):
        model = SegModel(TINY, seed=0)
        model.params["head_out/b"][:] = np.nan
        feats, _ = tiny_batch(rng, 32)
        with pytest.raises(FloatingPointError):
            model.forward(feats, mode="batch")

    def test_deterministic(self, rng):
        feats, _ = tiny_batch(rng, 40)
        a, _ = SegModel(TINY, seed=3).forward(feats, mode="batch")
        b, _ = SegModel(TINY, seed=3).forward(feats, mode="batch")
        assert np.array_equal(a, b)


class TestSegModelBackward:
    def test_end_to_end_gradcheck(self, rng):
        model = SegModel(TINY, seed=4)
        # move off the zero-init saddle of the transform output layer
        model.params["tf_out/W"] = rng.normal(
            0, 0.01, model.params["tf_out/W"].shape)
        feats, labels = tiny_batch(rng)
        w = rng.normal(0, 1, 64)

        def scalar():
            logits, _ = model.forward(feats, mode="batch")
            return float(logits @ w)

        logits, cache = model.forward(feats, mode="batch")
        grads = model.backward(w, cache)
        rng2 = np.random.default_rng(99)
        keys = sorted(model.params)
        coords = []
        while len(coords) < 200:
            k = keys[rng2.integers(len(keys))]
            coords.append((k, int(rng2.integers(model.params[k].size))))
        num = numeric_gradient(scalar, model.params, coords, h=1e-5)
        got = np.array([grads[k].flat[i] for k, i in coords])
        scale = np.maximum(np.abs(num), 1e-3)
        assert np.max(np.abs(got - num) / scale) < 1e-4

    def test_gradient_is_descent_direction(self, rng):
        from boltpipe.segnet.training import weighted_bce, weighted_bce_grad
        model = SegModel(TINY, seed=5)
        feats, labels = tiny_batch(rng)
        logits, cache = model.forward(feats, mode="batch")
        loss0 = weighted_bce(logits, labels)
        grads = model.backward(weighted_bce_grad(logits, labels), cache)
        step = 1e-2
        for k in model.params:
            model.params[k] = model.params[k] - step * grads[k]
        logits1, _ = model.forward(feats, mode="batch")
        assert weighted_bce(logits1, labels) < loss0

    def test_head_bias_gradient_closed_form(self, rng):
        # dLoss/d(head_out/b) is just the summed upstream logit gradient
        model = SegModel(TINY, seed=6)
        feats, _ = tiny_batch(rng, 40)
        dlogits = rng.normal(0, 1, 40)
        _, cache = model.forward(feats, mode="batch")
        grads = model.backward(dlogits, cache)
        assert grads["head_out/b"][0] == pytest.approx(dlogits.sum(),
                                                       rel=1e-12)

    def test_grads_accumulate(self, rng):
        model = SegModel(TINY, seed=7)
        feats, _ = tiny_batch(rng, 40)
        dlogits = rng.normal(0, 1, 40)
        _, cache = model.forward(feats, mode="batch")
        once = model.backward(dlogits, cache)
        twice = model.backward(dlogits, cache, grads=once)
        _, cache2 = model.forward(feats, mode="batch")
        fresh = model.backward(dlogits, cache2)
        assert np.allclose(twice["head_out/W"], 2 * fresh["head_out/W"])


class TestSegConfig:
    def test_k_validation(self):
        with pytest.raises(ValueError):
            SegConfig(k=0)

    def test_defaults(self):
        cfg = SegConfig()
        assert cfg.k == 20
        assert cfg.edge_widths == (64, 64, 64)
        assert cfg.lrelu_slope == 0.2
