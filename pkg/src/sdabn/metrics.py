"""Denoising (PSNR, SSIM) and segmentation (mIoU, pixel/mean accuracy) metrics.

Conventions: images are clamped to [0, 1] before PSNR/SSIM, PSNR uses a peak
of 1.0 over the joint MSE of all channels and reports ``PSNR_CAP`` for
identical images; SSIM uses an 11x11 Gaussian window (sigma 1.5) in valid
mode, per channel, then averages. Segmentation metrics come from a confusion
matrix with rows = truth and columns = prediction; mIoU and mean accuracy
average only over classes for which the ratio is defined.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, UsageError

PSNR_CAP = 99.0
IGNORE_LABEL = 255


def _clamp(img) -> np.ndarray:
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    ref, tst = _clamp(reference), _clamp(test)
    if ref.shape != tst.shape:
        raise UsageError(f"psnr: shape {ref.shape} != {tst.shape}")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(reference: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over HxW or HxWxC images (channels last)."""
    ref, tst = _clamp(reference), _clamp(test)
    if ref.shape != tst.shape:
        raise UsageError(f"ssim: shape {ref.shape} != {tst.shape}")
    if min(ref.shape[:2]) < 11:
        raise UsageError(f"ssim needs images of at least 11x11, got {ref.shape[:2]}")
    if ref.ndim == 2:
        ref, tst = ref[..., None], tst[..., None]
    g = gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    scores = []
    for c in range(ref.shape[2]):
        x, y = ref[..., c], tst[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# segmentation


class ConfusionMatrix:
    """N x N counts; rows are ground truth, columns are predictions."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        cm = ConfusionMatrix(self.n_classes)
        cm.counts = self.counts.copy()
        return cm

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        cm = self.copy()
        cm.counts += other.counts
        return cm


def accumulate_confusion(cm: ConfusionMatrix, prediction: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    prediction, truth = np.asarray(prediction), np.asarray(truth)
    if prediction.shape != truth.shape:
        raise UsageError(f"confusion: shape {prediction.shape} != {truth.shape}")
    n = cm.n_classes
    valid = truth != IGNORE_LABEL
    t = truth[valid].astype(np.int64)
    p = prediction[valid].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= n):
        raise DataError(f"truth label outside [0, {n})")
    if prediction.size and (prediction.min() < 0 or prediction.max() >= n):
        raise DataError(f"predicted label outside [0, {n})")
    cm.counts += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
    return cm


def _require_counts(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise UsageError("confusion matrix is empty")
    return cm.counts.astype(np.float64)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    c = _require_counts(cm)
    diag = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, diag / union, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    return float(np.nanmean(per_class_iou(cm)))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    c = _require_counts(cm)
    return float(np.trace(c) / c.sum())


def mean_accuracy(cm: ConfusionMatrix) -> float:
    c = _require_counts(cm)
    rows = c.sum(axis=1)
    present = rows > 0
    return float(np.mean(np.diag(c)[present] / rows[present]))


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel class of a [B,N,H,W] map; ties go to the lowest index."""
    return np.argmax(probs, axis=1).astype(np.uint8)


# --------------------------------------------------------------------------
# records and CSV


METRIC_NAMES = ("psnr", "ssim", "miou", "pixel_accuracy", "mean_accuracy")
CSV_HEADER = ("experiment", "split", "unit", "metric", "value")


@dataclass
class MetricsRecord:
    unit_index: int
    sample_count: int
    psnr: float | None = None
    ssim: float | None = None
    miou: float | None = None
    pixel_accuracy: float | None = None
    mean_accuracy: float | None = None

    def values(self) -> dict[str, float]:
        d = asdict(self)
        return {k: d[k] for k in METRIC_NAMES if d[k] is not None}


def metrics_rows(experiment: str, split: str, records: list[MetricsRecord]) -> list[tuple[str, str, int, str, str]]:
    rows = []
    for rec in records:
        for name, value in rec.values().items():
            rows.append((experiment, split, rec.unit_index, name, f"{value:.6f}"))
    return rows


def format_csv(rows, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
