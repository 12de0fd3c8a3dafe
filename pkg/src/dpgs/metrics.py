"""Image and decomposition metrics."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput
from .losses import ssim as _ssim

PSNR_CAP = 99.0


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images report the 99 dB cap."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise InvalidInput(f"psnr: shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    return _ssim(np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64))


def label_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.size == 0:
        raise InvalidInput("label arrays must be non-empty and equally long")
    return float(np.mean(pred == gt))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


class IoUAccumulator:
    """Dataset-level IoU: intersections and unions summed over frames."""

    def __init__(self):
        self.inter = 0
        self.union = 0

    def add(self, pred, gt) -> None:
        p = np.asarray(pred) > 0
        g = np.asarray(gt) > 0
        self.inter += int(np.logical_and(p, g).sum())
        self.union += int(np.logical_or(p, g).sum())

    def value(self) -> float:
        return 1.0 if self.union == 0 else self.inter / self.union
