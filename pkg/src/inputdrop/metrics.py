"""Evaluation metrics: image quality, pose error, detection AP, accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0


class PoseError(ValueError):
    pass


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# image quality


def psnr(pred, target, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical inputs."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_same_shape(pred, target)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = torch.mean((pred.double() - target.double()) ** 2).item()
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(
    pred,
    target,
    peak: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean SSIM over all valid (unpadded) windows, averaged over channels.

    Accepts ``H x W``, ``C x H x W`` or ``N x C x H x W`` inputs.
    """
    pred, target = _as_tensor(pred).double(), _as_tensor(target).double()
    _check_same_shape(pred, target)
    while pred.dim() < 4:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    n, c, h, w = pred.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} is smaller than the {window}x{window} window")
    kernel = gaussian_window(window, sigma).expand(c, 1, window, window)

    def filt(x):
        return F.conv2d(x, kernel, groups=c)

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_x, mu_y = filt(pred), filt(target)
    sxx = filt(pred * pred) - mu_x**2
    syy = filt(target * target) - mu_y**2
    sxy = filt(pred * target) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


# ---------------------------------------------------------------------------
# pose


@dataclass(frozen=True)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        check_rotation(R)
        if t.shape != (3,):
            raise PoseError(f"translation must be a 3-vector, got shape {t.shape}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)


def check_rotation(R, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise PoseError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise PoseError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise PoseError("rotation determinant is not +1")
    return R


def rotation_distance(R1, R2) -> float:
    """Geodesic angle in radians between two rotations."""
    R1, R2 = check_rotation(R1), check_rotation(R2)
    cos = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def translation_error(t1, t2) -> float:
    d = np.asarray(t1, dtype=np.float64).reshape(-1) - np.asarray(t2, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(d))


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class DetectionBox:
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float | None = None
    image_id: str = ""

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def iou(a: DetectionBox, b: DetectionBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def average_precision(
    detections: Sequence[DetectionBox],
    ground_truth: Sequence[DetectionBox],
    iou_threshold: float = 0.5,
) -> float:
    """All-point interpolated AP for a single class.

    Detections are matched greedily in descending confidence against
    ground truth of the same ``image_id``; each ground truth box absorbs at
    most one detection. Ties in confidence keep the input order.
    """
    if any(d.confidence is None for d in detections):
        raise ValueError("detections must carry confidences")
    if not ground_truth:
        raise ValueError("average precision is undefined without ground truth")
    if not detections:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    matched = [False] * len(ground_truth)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        best, best_j = iou_threshold, -1
        for j, gt in enumerate(ground_truth):
            if matched[j] or gt.image_id != det.image_id:
                continue
            o = iou(det, gt)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            matched[best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / len(ground_truth)
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_iou(
    detections: Sequence[DetectionBox],
    ground_truth: Sequence[DetectionBox],
    iou_threshold: float = 0.5,
) -> float:
    """Mean AP over classes that have ground truth."""
    classes = sorted({g.class_id for g in ground_truth})
    if not classes:
        raise ValueError("mAP is undefined: no class has ground truth")
    aps = []
    for c in classes:
        dets = [d for d in detections if d.class_id == c]
        gts = [g for g in ground_truth if g.class_id == c]
        aps.append(average_precision(dets, gts, iou_threshold))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# classification and reporting


def classification_accuracy(logits, labels) -> float:
    logits, labels = _as_tensor(logits), _as_tensor(labels)
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"need N x K logits and N labels, got {tuple(logits.shape)} and {tuple(labels.shape)}")
    # torch.argmax returns the first maximal index, i.e. the lowest class on ties
    pred = torch.argmax(logits, dim=1)
    return (pred == labels.long()).double().mean().item()


def relative_gain(baseline: float, treated: float, lower_is_better: bool = False) -> float:
    """Percentage improvement of ``treated`` over ``baseline``."""
    if baseline == 0:
        raise ZeroDivisionError("relative gain needs a non-zero baseline")
    if lower_is_better:
        return (baseline - treated) / baseline * 100.0
    return (treated - baseline) / baseline * 100.0
