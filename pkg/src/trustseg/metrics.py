"""Mean intersection-over-union and trimap (boundary band) evaluation."""

from __future__ import annotations

import csv
from typing import Iterable, TextIO

import numpy as np
from scipy import ndimage

from .losses import UNLABELED

__all__ = [
    "MetricError",
    "ConfusionMatrix",
    "miou",
    "boundary_band",
    "trimap_miou",
    "TrimapAccumulator",
    "write_trimap_csv",
    "write_class_csv",
]


class MetricError(ValueError):
    pass


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt, mask=None) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        valid = (gt != UNLABELED) & (pred != UNLABELED)
        if mask is not None:
            valid &= np.asarray(mask, dtype=bool)
        k = self.n_classes
        g, p = gt[valid].astype(np.int64), pred[valid].astype(np.int64)
        if g.size and (max(g.max(), p.max()) >= k or min(g.min(), p.min()) < 0):
            raise MetricError("label outside 0..K-1")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou_per_class(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both prediction and truth."""
        inter = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, inter / np.maximum(union, 1), np.nan)

    def miou(self) -> float:
        iou = self.iou_per_class()
        if np.all(np.isnan(iou)):
            return float("nan")
        return float(np.nanmean(iou))


def _n_classes(*maps) -> int:
    k = 0
    for m in maps:
        m = np.asarray(m)
        v = m[m != UNLABELED]
        if v.size:
            k = max(k, int(v.max()) + 1)
    return max(k, 1)


def miou(pred, gt, mask=None, n_classes: int | None = None) -> float:
    """Mean IoU over classes present in gt or pred (unlabeled pixels ignored)."""
    k = n_classes or _n_classes(pred, gt)
    return ConfusionMatrix(k).update(pred, gt, mask).miou()


def boundary_band(gt, width: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``width`` of a pixel with another label."""
    if width < 1:
        raise MetricError("trimap width must be >= 1")
    gt = np.asarray(gt)
    footprint = np.ones((2 * width + 1, 2 * width + 1), dtype=bool)
    band = np.zeros(gt.shape, dtype=bool)
    labels = [v for v in np.unique(gt) if v != UNLABELED]
    for v in labels:
        other = (gt != v) & (gt != UNLABELED)
        near_other = ndimage.binary_dilation(other, structure=footprint)
        band |= (gt == v) & near_other
    return band


def trimap_miou(pred, gt, widths: Iterable[int], n_classes: int | None = None) -> list[tuple[int, float]]:
    """mIoU restricted to each boundary band; NaN where the band is empty."""
    k = n_classes or _n_classes(pred, gt)
    out = []
    for d in widths:
        band = boundary_band(gt, int(d))
        if not band.any():
            out.append((int(d), float("nan")))
            continue
        out.append((int(d), ConfusionMatrix(k).update(pred, gt, band).miou()))
    return out


class TrimapAccumulator:
    """Dataset-level confusion matrices per band width (plus the full image)."""

    def __init__(self, n_classes: int, widths: Iterable[int]):
        self.n_classes = n_classes
        self.widths = [int(w) for w in widths]
        self.full = ConfusionMatrix(n_classes)
        self.bands = {w: ConfusionMatrix(n_classes) for w in self.widths}

    def update(self, pred, gt) -> None:
        self.full.update(pred, gt)
        for w in self.widths:
            self.bands[w].update(pred, gt, boundary_band(gt, w))

    def results(self) -> list[tuple[int, float]]:
        return [(w, self.bands[w].miou() if self.bands[w].total else float("nan")) for w in self.widths]


def write_trimap_csv(fh: TextIO, rows: Iterable[tuple[int, float]], label: str = "") -> None:
    """Columns: label, width, miou (``nan`` marks an empty band)."""
    w = csv.writer(fh)
    w.writerow(["label", "width", "miou"])
    for width, value in rows:
        w.writerow([label, width, f"{value:.6f}"])


def write_class_csv(fh: TextIO, cm: ConfusionMatrix, label: str = "") -> None:
    """Columns: label, class, iou, gt_pixels, pred_pixels."""
    w = csv.writer(fh)
    w.writerow(["label", "class", "iou", "gt_pixels", "pred_pixels"])
    iou = cm.iou_per_class()
    for k in range(cm.n_classes):
        w.writerow([label, k, f"{iou[k]:.6f}", int(cm.counts[k].sum()), int(cm.counts[:, k].sum())])
