"""Graph-based binary segmentation: dynamic EdgeConv network, tiling,
training, and model serialization."""

from boltpipe.segnet.data import SampleTile, cover_tiles, make_tiles
from boltpipe.segnet.modelio import load_model, save_model
from boltpipe.segnet.network import SegConfig, SegModel, knn_graph
from boltpipe.segnet.training import (
    Adam,
    TrainConfig,
    loss_and_grads,
    predict,
    train,
    weighted_bce,
    weighted_bce_grad,
)

__all__ = [
    "SampleTile", "cover_tiles", "make_tiles",
    "load_model", "save_model",
    "SegConfig", "SegModel", "knn_graph",
    "Adam", "TrainConfig", "loss_and_grads", "predict", "train",
    "weighted_bce", "weighted_bce_grad",
]
