"""EdgeConv segmentation network in plain numpy.

Forward and backward passes are hand-written; the backward pass is exact
up to two stated conventions: max-pool subgradients pick the first
maximizing index, and gradients do not flow through dynamic k-NN graph
construction (neighbor indices are constants for one step).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5


@dataclass
class SegConfig:
    k: int = 20
    transform_width: int = 64
    transform_hidden: int = 32
    edge_widths: tuple = (64, 64, 64)
    agg_width: int = 256
    head_widths: tuple = (256, 128)
    bn_momentum: float = 0.1
    lrelu_slope: float = 0.2

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """(n, k) neighbor ids by Euclidean distance in the given feature space,
    self excluded, ties broken by ascending id."""
    n = features.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be < point count {n}")
    sq = (features * features).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
    np.fill_diagonal(d2, np.inf)
    if n <= 512:
        cand = np.argsort(d2, axis=1, kind="stable")[:, :k]
        return cand
    # argpartition with slack, then an exact (distance, id) re-rank
    kk = min(n - 1, k + 8)
    cand = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
    cd = np.take_along_axis(d2, cand, axis=1)
    order = np.lexsort((cand, cd), axis=1)
    return np.take_along_axis(cand, order, axis=1)[:, :k]


def _edges_forward(f: np.ndarray, idx: np.ndarray):
    """Edge features concat(f_i, f_j - f_i) as an (n*k, 2d) matrix."""
    n, d = f.shape
    k = idx.shape[1]
    fj = f[idx]                       # (n, k, d)
    e = np.empty((n, k, 2 * d))
    e[:, :, :d] = f[:, None, :]
    e[:, :, d:] = fj - f[:, None, :]
    return e.reshape(n * k, 2 * d)


def _edges_backward(de: np.ndarray, f_shape, idx: np.ndarray) -> np.ndarray:
    n, d = f_shape
    k = idx.shape[1]
    de = de.reshape(n, k, 2 * d)
    df = (de[:, :, :d] - de[:, :, d:]).sum(axis=1)
    np.add.at(df, idx.ravel(), de[:, :, d:].reshape(n * k, d))
    return df


def _maxpool_forward(x: np.ndarray, axis: int):
    arg = np.argmax(x, axis=axis)
    y = np.take_along_axis(x, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    return y, arg


def _maxpool_backward(dy: np.ndarray, arg: np.ndarray, shape, axis: int):
    dx = np.zeros(shape)
    np.put_along_axis(dx, np.expand_dims(arg, axis),
                      np.expand_dims(dy, axis), axis=axis)
    return dx


class MLPBlock:
    """linear -> optional batch-norm -> optional leaky rectifier, acting on
    (rows, d_in). Parameters live in the model's flat dicts under
    `<name>/W`, `<name>/b`, `<name>/gamma`, `<name>/beta`."""

    def __init__(self, name: str, d_in: int, d_out: int, *, bn=True, act=True,
                 zero_init=False, slope=0.2, momentum=0.1):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.bn = bn
        self.act = act
        self.zero_init = zero_init
        self.slope = slope
        self.momentum = momentum

    def init(self, params: dict, state: dict, rng):
        scale = 0.0 if self.zero_init else np.sqrt(2.0 / self.d_in)
        params[self.name + "/W"] = rng.normal(0, 1, (self.d_in, self.d_out)) * scale
        params[self.name + "/b"] = np.zeros(self.d_out)
        if self.bn:
            params[self.name + "/gamma"] = np.ones(self.d_out)
            params[self.name + "/beta"] = np.zeros(self.d_out)
            state[self.name + "/running_mean"] = np.zeros(self.d_out)
            state[self.name + "/running_var"] = np.ones(self.d_out)

    def forward(self, x, params, state, mode="train"):
        """mode: 'train' (batch stats, update running), 'batch' (batch stats,
        no update), 'running' (use running stats)."""
        W = params[self.name + "/W"]
        b = params[self.name + "/b"]
        z = x @ W + b
        cache = {"x": x, "W": W}
        if self.bn:
            gamma = params[self.name + "/gamma"]
            beta = params[self.name + "/beta"]
            if mode == "running":
                mean = state[self.name + "/running_mean"]
                var = state[self.name + "/running_var"]
            else:
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if mode == "train":
                    m = self.momentum
                    state[self.name + "/running_mean"] *= 1 - m
                    state[self.name + "/running_mean"] += m * mean
                    state[self.name + "/running_var"] *= 1 - m
                    state[self.name + "/running_var"] += m * var
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mean) * inv
            z = gamma * xhat + beta
            cache.update(xhat=xhat, inv=inv, gamma=gamma,
                         batch_stats=mode != "running")
        if self.act:
            cache["pre_act"] = z
            z = np.where(z > 0, z, self.slope * z)
        return z, cache

    def backward(self, dy, cache, params, grads):
        if self.act:
            dy = np.where(cache["pre_act"] > 0, dy, self.slope * dy)
        if self.bn:
            xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
            grads[self.name + "/gamma"] += (dy * xhat).sum(axis=0)
            grads[self.name + "/beta"] += dy.sum(axis=0)
            if cache["batch_stats"]:
                m = dy.shape[0]
                dxhat = dy * gamma
                dy = inv * (dxhat - dxhat.mean(axis=0)
                            - xhat * (dxhat * xhat).mean(axis=0))
            else:
                dy = dy * gamma * inv
        x, W = cache["x"], cache["W"]
        grads[self.name + "/W"] += x.T @ dy
        grads[self.name + "/b"] += dy.sum(axis=0)
        return dy @ W.T


class SegModel:
    """Spatial transform + 3 dynamic EdgeConv layers + aggregation + head."""

    def __init__(self, cfg: SegConfig | None = None, seed: int = 0):
        self.cfg = cfg or SegConfig()
        c = self.cfg
        rng = np.random.default_rng(seed)
        kw = dict(slope=c.lrelu_slope, momentum=c.bn_momentum)
        self.blocks: dict[str, MLPBlock] = {}

        def block(name, d_in, d_out, **extra):
            self.blocks[name] = MLPBlock(name, d_in, d_out, **{**kw, **extra})

        block("tf_edge", 6, c.transform_width)
        block("tf_hidden", c.transform_width, c.transform_hidden, bn=False)
        block("tf_out", c.transform_hidden, 9, bn=False, act=False,
              zero_init=True)
        d = 6
        for i, w in enumerate(c.edge_widths):
            block(f"edge{i}", 2 * d, w)
            d = w
        cat = sum(c.edge_widths)
        block("agg", cat, c.agg_width)
        d = cat + c.agg_width
        for i, w in enumerate(c.head_widths):
            block(f"head{i}", d, w)
            d = w
        block("head_out", d, 1, bn=False, act=False)

        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        for blk in self.blocks.values():
            blk.init(self.params, self.state, rng)

    # -- forward -----------------------------------------------------------

    def spatial_transform(self, xyz, mode="train"):
        """Returns (matrix, transformed_xyz, cache)."""
        c = self.cfg
        idx = knn_graph(xyz, c.k)
        e = _edges_forward(xyz, idx)
        h, c1 = self.blocks["tf_edge"].forward(e, self.params, self.state, mode)
        n = xyz.shape[0]
        h = h.reshape(n, c.k, -1)
        hk, arg_k = _maxpool_forward(h, axis=1)
        v, arg_n = _maxpool_forward(hk, axis=0)
        g, c2 = self.blocks["tf_hidden"].forward(v[None, :], self.params,
                                                 self.state, mode)
        m9, c3 = self.blocks["tf_out"].forward(g, self.params, self.state, mode)
        matrix = np.eye(3) + m9.reshape(3, 3)
        xyz_t = xyz @ matrix
        cache = dict(idx=idx, c1=c1, c2=c2, c3=c3, arg_k=arg_k, arg_n=arg_n,
                     h_shape=h.shape, hk_shape=hk.shape, xyz=xyz)
        return matrix, xyz_t, cache

    def _transform_backward(self, dxyz_t, cache, grads):
        """Backward of the transform block; xyz itself is a network input so
        its gradient is dropped."""
        xyz = cache["xyz"]
        dmatrix = xyz.T @ dxyz_t
        dm9 = dmatrix.reshape(1, 9)
        dg = self.blocks["tf_out"].backward(dm9, cache["c3"], self.params, grads)
        dv = self.blocks["tf_hidden"].backward(dg, cache["c2"], self.params,
                                               grads)[0]
        dhk = _maxpool_backward(dv, cache["arg_n"], cache["hk_shape"], axis=0)
        dh = _maxpool_backward(dhk, cache["arg_k"], cache["h_shape"], axis=1)
        n, k, w = cache["h_shape"]
        self.blocks["tf_edge"].backward(dh.reshape(n * k, w), cache["c1"],
                                        self.params, grads)

    def forward(self, features: np.ndarray, mode="train"):
        """features: (n, 6) rows (x, y, z, l1, l2, l3), tile-centered.
        Returns (logits (n,), cache)."""
        c = self.cfg
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        xyz = features[:, :3]
        lam = features[:, 3:]
        matrix, xyz_t, tf_cache = self.spatial_transform(xyz, mode)

        f = np.concatenate([xyz_t, lam], axis=1)
        layer_caches = []
        layer_outputs = []
        for i in range(len(c.edge_widths)):
            idx = knn_graph(f, c.k)
            e = _edges_forward(f, idx)
            z, blk_cache = self.blocks[f"edge{i}"].forward(e, self.params,
                                                           self.state, mode)
            z = z.reshape(n, c.k, -1)
            out, arg = _maxpool_forward(z, axis=1)
            layer_caches.append(dict(idx=idx, blk=blk_cache, arg=arg,
                                     z_shape=z.shape, f_shape=f.shape))
            layer_outputs.append(out)
            f = out

        fcat = np.concatenate(layer_outputs, axis=1)
        a, agg_cache = self.blocks["agg"].forward(fcat, self.params,
                                                  self.state, mode)
        g, arg_g = _maxpool_forward(a, axis=0)
        hin = np.concatenate([fcat, np.broadcast_to(g, (n, g.shape[0]))], axis=1)

        h = hin
        head_caches = []
        for i in range(len(c.head_widths)):
            h, hc = self.blocks[f"head{i}"].forward(h, self.params, self.state,
                                                    mode)
            head_caches.append(hc)
        logits, out_cache = self.blocks["head_out"].forward(h, self.params,
                                                            self.state, mode)
        logits = logits[:, 0]
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits in head output")
        cache = dict(tf=tf_cache, layers=layer_caches, agg=agg_cache,
                     arg_g=arg_g, a_shape=a.shape, head=head_caches,
                     out=out_cache, n=n,
                     widths=[o.shape[1] for o in layer_outputs])
        return logits, cache

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward(self, dlogits: np.ndarray, cache, grads=None):
        """Accumulates parameter gradients for one tile; returns the grads
        dict. dlogits is dLoss/dlogit per point."""
        c = self.cfg
        if grads is None:
            grads = self.zero_grads()
        n = cache["n"]
        dh = self.blocks["head_out"].backward(dlogits[:, None], cache["out"],
                                              self.params, grads)
        for i in reversed(range(len(c.head_widths))):
            dh = self.blocks[f"head{i}"].backward(dh, cache["head"][i],
                                                  self.params, grads)
        cat = sum(c.edge_widths)
        dfcat = dh[:, :cat].copy()
        dg = dh[:, cat:].sum(axis=0)
        da = _maxpool_backward(dg, cache["arg_g"], cache["a_shape"], axis=0)
        dfcat += self.blocks["agg"].backward(da, cache["agg"], self.params,
                                             grads)

        # split the concatenated gradient back to the three layer outputs
        douts = []
        off = 0
        for w in cache["widths"]:
            douts.append(dfcat[:, off:off + w].copy())
            off += w

        df = None
        for i in reversed(range(len(c.edge_widths))):
            lc = cache["layers"][i]
            dout = douts[i]
            if df is not None:
                dout = dout + df
            dz = _maxpool_backward(dout, lc["arg"], lc["z_shape"], axis=1)
            nk = lc["z_shape"][0] * lc["z_shape"][1]
            de = self.blocks[f"edge{i}"].backward(dz.reshape(nk, -1), lc["blk"],
                                                  self.params, grads)
            df = _edges_backward(de, lc["f_shape"], lc["idx"])

        dxyz_t = df[:, :3]
        self._transform_backward(dxyz_t, cache["tf"], grads)
        return grads
