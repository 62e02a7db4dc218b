"""Point-level IoU, bolt-instance TP/FP/FN counting, and
precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from boltpipe.cloud import PointCloud
from boltpipe.geomfilter import dbscan


@dataclass
class EvalReport:
    iou_bolt: float
    iou_background: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict:
        return {
            "iou_bolt": self.iou_bolt,
            "iou_background": self.iou_background,
            "ground_truth": self.tp + self.fn,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def iou(pred_labels, gt_labels, class_id: int) -> float:
    """|P n G| / |P u G| for the point sets of one class; 1.0 if both empty."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError("label arrays must have equal length")
    p = pred == class_id
    g = gt == class_id
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def extract_instances(cloud: PointCloud, labels, eps: float = 0.1,
                      min_pts: int = 50) -> list[np.ndarray]:
    """DBSCAN the label-1 points into instances; returns point id sets
    (indices into the full cloud). Noise belongs to no instance."""
    labels = np.asarray(labels)
    ids = np.flatnonzero(labels == 1)
    if ids.size == 0:
        return []
    clusters = dbscan(cloud.positions[ids], eps, min_pts)
    return [ids[clusters.members(c)] for c in range(clusters.n_clusters)]


def match_instances(pred_instances, gt_instances,
                    match_thresh: float = 0.5) -> tuple[int, int, int]:
    """Instance counting under the point-overlap rule.

    A ground-truth instance is detected iff >= match_thresh of its points
    lie inside the union of predicted instances; a predicted instance is
    spurious iff < match_thresh of its points lie inside the union of
    ground-truth instances. Returns (tp, fp, fn).
    """
    pred_union = (np.concatenate(pred_instances)
                  if pred_instances else np.empty(0, dtype=np.int64))
    gt_union = (np.concatenate(gt_instances)
                if gt_instances else np.empty(0, dtype=np.int64))
    pred_set = np.unique(pred_union)
    gt_set = np.unique(gt_union)

    fn = 0
    for inst in gt_instances:
        overlap = np.isin(inst, pred_set).mean() if len(inst) else 0.0
        if overlap < match_thresh:
            fn += 1
    tp = len(gt_instances) - fn
    fp = 0
    for inst in pred_instances:
        overlap = np.isin(inst, gt_set).mean() if len(inst) else 0.0
        if overlap < match_thresh:
            fp += 1
    return tp, fp, fn


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Standard classification metrics; zero when a denominator vanishes."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


def evaluate(pred_cloud: PointCloud, gt_cloud: PointCloud,
             match_thresh: float = 0.5, eps: float = 0.1,
             min_pts: int = 50) -> EvalReport:
    """Full report: both class IoUs plus instance-level metrics.

    Both clouds must cover the same points in the same order.
    """
    if pred_cloud.labels is None or gt_cloud.labels is None:
        raise ValueError("both clouds need labels")
    if len(pred_cloud) != len(gt_cloud):
        raise ValueError("clouds must have equal point counts")
    pred, gt = pred_cloud.labels, gt_cloud.labels
    pred_inst = extract_instances(pred_cloud, pred, eps, min_pts)
    gt_inst = extract_instances(gt_cloud, gt, eps, min_pts)
    tp, fp, fn = match_instances(pred_inst, gt_inst, match_thresh)
    precision, recall, f1 = precision_recall_f1(tp, fp, fn)
    return EvalReport(
        iou_bolt=iou(pred, gt, 1),
        iou_background=iou(pred, gt, 0),
        tp=tp, fp=fp, fn=fn,
        precision=precision, recall=recall, f1=f1,
    )
