"""Hard-threshold pseudo-labels from refined CAMs, and mIoU scoring."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from camforge.imaging import resize_bilinear


def normalize_cam(cam: np.ndarray) -> np.ndarray:
    """Per-class min-max scaling to [0, 1] over the spatial axes.

    A constant class map becomes all zeros.
    """
    cam = np.asarray(cam, dtype=np.float64)
    lo = cam.min(axis=(-2, -1), keepdims=True)
    hi = cam.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (cam - lo) / safe, 0.0)


def assign_labels(normalized: np.ndarray, ht: float, present: np.ndarray | None = None) -> np.ndarray:
    """Label each pixel with its argmax foreground class (ids from 1), or 0 if the max is below ht.

    ``present`` optionally restricts the candidates to the image's known
    classes; excluded channels can never win and never count toward the max.
    """
    if not 0.0 <= ht <= 1.0:
        raise ValueError(f"hard threshold must lie in [0, 1], got {ht}")
    normalized = np.asarray(normalized, dtype=np.float64)
    if present is not None:
        present = np.asarray(present).reshape(-1, 1, 1) > 0
        normalized = np.where(present, normalized, -1.0)
    best = normalized.max(axis=0)
    cls = normalized.argmax(axis=0) + 1  # argmax returns the first (lowest) id on ties
    return np.where(best < ht, 0, cls).astype(np.int64)


def pseudo_label(cam: np.ndarray, ht: float, size: tuple[int, int] | None = None,
                 present: np.ndarray | None = None) -> np.ndarray:
    """Upsample (bilinear) to ``size`` if given, normalise, threshold."""
    if size is not None and cam.shape[-2:] != tuple(size):
        cam = resize_bilinear(cam, tuple(size))
    return assign_labels(normalize_cam(cam), ht, present)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions. ``num_classes`` counts background."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} mask has ids outside [0, {num_classes})")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-class IoU (NaN where the class is absent from both masks) and their mean."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)
    present = ~np.isnan(iou)
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return mean, iou


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[float, np.ndarray]:
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes))


@dataclass(frozen=True)
class SweepResult:
    thresholds: list[float]
    miou: list[float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ht", "miou"])
        for ht, m in sorted(zip(self.thresholds, self.miou)):
            w.writerow([repr(float(ht)), repr(float(m))])
        return buf.getvalue()


def dataset_miou(cams: Sequence[np.ndarray], gts: Sequence[np.ndarray], ht: float,
                 num_classes: int, labels: Sequence[np.ndarray] | None = None
                 ) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Threshold every CAM, accumulate one confusion matrix, return (mIoU, per-class IoU, masks).

    ``num_classes`` counts background. ``labels`` are optional per-image
    multi-hot vectors used to gate the candidate classes.
    """
    if len(cams) != len(gts):
        raise ValueError(f"{len(cams)} CAMs but {len(gts)} ground-truth masks")
    if labels is not None and len(labels) != len(cams):
        raise ValueError(f"{len(cams)} CAMs but {len(labels)} label vectors")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    masks = []
    for i, (cam, gt) in enumerate(zip(cams, gts)):
        mask = pseudo_label(cam, ht, gt.shape, None if labels is None else labels[i])
        conf += confusion_matrix(mask, gt, num_classes)
        masks.append(mask)
    mean, per_class = iou_from_confusion(conf)
    return mean, per_class, masks


def sweep(cams: Sequence[np.ndarray], gts: Sequence[np.ndarray], thresholds: Sequence[float],
          num_classes: int, labels: Sequence[np.ndarray] | None = None) -> SweepResult:
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("threshold list is empty")
    scores = [dataset_miou(cams, gts, ht, num_classes, labels)[0] for ht in thresholds]
    return SweepResult(thresholds, scores)
