"""Weighted BCE loss, the Adam training loop, and whole-cloud prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from boltpipe.cloud import PointCloud
from boltpipe.segnet.data import SampleTile, cover_tiles
from boltpipe.segnet.network import SegModel


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    max_epochs: int = 32
    w_pos: float = 15.0 / 16.0
    w_neg: float = 1.0 / 16.0
    lr_decay: float = 0.5
    lr_decay_every: int = 16
    seed: int = 7
    tile_size: int = 2048

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if abs(self.w_pos + self.w_neg - 1.0) > 1e-12:
            raise ValueError("class weights must sum to 1")


def _softplus(x):
    return np.logaddexp(0.0, x)


def weighted_bce(logits, labels, w_pos=15.0 / 16.0, w_neg=1.0 / 16.0) -> float:
    """Mean weighted sigmoid BCE, evaluated in log-sum-exp form."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("logits and labels must have equal length")
    per_point = w_pos * y * _softplus(-x) + w_neg * (1.0 - y) * _softplus(x)
    return float(per_point.mean())


def weighted_bce_grad(logits, labels, w_pos=15.0 / 16.0,
                      w_neg=1.0 / 16.0) -> np.ndarray:
    """dLoss/dlogit of weighted_bce (mean reduction included)."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    sig = 1.0 / (1.0 + np.exp(-x))
    return (w_pos * y * (sig - 1.0) + w_neg * (1.0 - y) * sig) / x.size


def loss_and_grads(model: SegModel, tile: SampleTile, cfg: TrainConfig,
                   grads=None, mode="train"):
    """Forward + backward for one tile; accumulates into grads."""
    logits, cache = model.forward(tile.features, mode=mode)
    loss = weighted_bce(logits, tile.labels, cfg.w_pos, cfg.w_neg)
    dlogits = weighted_bce_grad(logits, tile.labels, cfg.w_pos, cfg.w_neg)
    grads = model.backward(dlogits, cache, grads)
    return loss, grads


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for key, g in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[key] -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def train(model: SegModel, tiles: list[SampleTile], cfg: TrainConfig,
          val_tiles: list[SampleTile] | None = None, verbose=False):
    """Adam training with the learning rate halved every lr_decay_every
    epochs. Returns (model, history) where history maps 'train' (and 'val'
    when validation tiles are given) to per-epoch mean losses.
    Deterministic under cfg.seed."""
    if not tiles:
        raise ValueError("no training tiles")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate)
    history: dict[str, list[float]] = {"train": []}
    if val_tiles:
        history["val"] = []
    for epoch in range(cfg.max_epochs):
        opt.lr = cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(len(tiles))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = model.zero_grads()
            batch_loss = 0.0
            for t in batch:
                loss, grads = loss_and_grads(model, tiles[t], cfg, grads)
                batch_loss += loss
            for g in grads.values():
                g /= len(batch)
            if not np.isfinite(batch_loss):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch} batch {start // cfg.batch_size}"
                )
            opt.step(model.params, grads)
            epoch_losses.append(batch_loss / len(batch))
        history["train"].append(float(np.mean(epoch_losses)))
        if val_tiles:
            losses = []
            for tile in val_tiles:
                logits, _ = model.forward(tile.features, mode="batch")
                losses.append(weighted_bce(logits, tile.labels, cfg.w_pos,
                                           cfg.w_neg))
            history["val"].append(float(np.mean(losses)))
        if verbose:
            msg = f"epoch {epoch + 1}/{cfg.max_epochs} train {history['train'][-1]:.4f}"
            if val_tiles:
                msg += f" val {history['val'][-1]:.4f}"
            print(msg)
    return model, history


def predict(model: SegModel, cloud: PointCloud, n_s: int = 2048,
            use_batch_stats: bool = True) -> PointCloud:
    """Label every point: deterministic covering tiles, probabilities
    averaged where a point is sampled multiply, label 1 iff mean
    probability strictly exceeds 0.5."""
    tiles = cover_tiles(cloud, n_s)
    prob_sum = np.zeros(len(cloud))
    counts = np.zeros(len(cloud))
    mode = "batch" if use_batch_stats else "running"
    for tile in tiles:
        logits, _ = model.forward(tile.features, mode=mode)
        probs = 1.0 / (1.0 + np.exp(-logits))
        np.add.at(prob_sum, tile.point_ids, probs)
        np.add.at(counts, tile.point_ids, 1.0)
    mean_prob = prob_sum / np.maximum(counts, 1.0)
    labels = (mean_prob > 0.5).astype(np.uint8)
    out = PointCloud(cloud.positions, labels, dict(cloud.channels))
    return out.with_channel("bolt_probability", mean_prob)
