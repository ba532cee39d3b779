"""Confusion-matrix based segmentation scores; void pixels never count."""
import numpy as np

from .errors import ShapeError, UndefinedScoreError

VOID = 255


class ConfusionMatrix:
    """K x K counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def accumulate(self, pred, gt, void_label=VOID):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != void_label
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if g.size and (g.max() >= k or g.min() < 0 or p.max() >= k or p.min() < 0):
            raise ShapeError(f"labels outside [0, {k - 1}]")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def pixel_accuracy(self):
        return pixel_accuracy(self.counts)

    def per_class_iou(self):
        return per_class_iou(self.counts)

    def mean_iou(self):
        return mean_iou(self.counts)


def accumulate(cm, pred, gt, void_label=VOID):
    return cm.accumulate(pred, gt, void_label)


def _counts(cm):
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)


def pixel_accuracy(cm):
    c = _counts(cm)
    total = c.sum()
    if total == 0:
        raise UndefinedScoreError("pixel accuracy of an empty confusion matrix")
    return float(np.trace(c) / total)


def per_class_iou(cm):
    """IoU per class; NaN where the class has zero union."""
    c = _counts(cm)
    inter = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def mean_iou(cm):
    iou = per_class_iou(cm)
    valid = ~np.isnan(iou)
    if not valid.any():
        raise UndefinedScoreError("mean IoU undefined: every class has zero union")
    return float(iou[valid].mean())
