"""Keypoint and classification metrics: PCK curves, AUC, 3D error, confusion.

PCK at threshold t is the fraction of evaluable joints whose prediction
lands within t of the ground truth (pixels for 2D, mm for 3D); AUC is the
trapezoid area under the curve normalized by the threshold span.  A joint
mask selects which joints count, which covers fingertip-only annotation
styles without any dataset-specific code.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

SPACE_2D = "2d-px"
SPACE_3D = "3d-mm"


class UndefinedMetricError(ValueError):
    """Metric has no evaluable joints (empty mask)."""


@dataclass(frozen=True)
class PckCurve:
    thresholds: np.ndarray
    fractions: np.ndarray
    auc: float
    space: str = SPACE_2D
    scale_factor: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float)
        f = np.asarray(self.fractions, dtype=float)
        if t.ndim != 1 or t.shape != f.shape:
            raise ValueError("thresholds and fractions must be 1-D and aligned")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any(f < 0) or np.any(f > 1) or np.any(np.diff(f) < 0):
            raise ValueError("fractions must be non-decreasing within [0, 1]")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("AUC must be in [0, 1]")
        if self.space not in (SPACE_2D, SPACE_3D):
            raise ValueError(f"unknown metric space {self.space!r}")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "fractions", f)

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds.tolist(),
            "fractions": self.fractions.tolist(),
            "auc": self.auc,
            "space": self.space,
            "scale_factor": self.scale_factor,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fraction"])
            for t, f in zip(self.thresholds, self.fractions):
                writer.writerow([format(t, ".9g"), format(f, ".9g")])


def default_thresholds(space: str) -> np.ndarray:
    """0..30 px in 1 px steps for 2D, 0..50 mm in 1 mm steps for 3D."""
    if space == SPACE_2D:
        return np.arange(0.0, 31.0, 1.0)
    if space == SPACE_3D:
        return np.arange(0.0, 51.0, 1.0)
    raise ValueError(f"unknown metric space {space!r}")


def _masked_distances(pred, gt, mask) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    if mask is None:
        mask = np.ones(pred.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pred.shape[0],):
        raise ValueError("mask must have one entry per joint")
    if not np.any(mask):
        raise UndefinedMetricError("no evaluable joints in the mask")
    return np.linalg.norm(pred[mask] - gt[mask], axis=1)


def pck_curve(
    pred,
    gt,
    thresholds=None,
    space: str = SPACE_2D,
    mask=None,
    scale_factor: float = 1.0,
) -> PckCurve:
    """Fraction of masked joints within each threshold, plus normalized AUC."""
    if thresholds is None:
        thresholds = default_thresholds(space)
    thresholds = np.asarray(thresholds, dtype=float)
    dist = _masked_distances(pred, gt, mask)
    fractions = np.array([np.mean(dist <= t) for t in thresholds])
    span = thresholds[-1] - thresholds[0]
    auc = float(np.trapz(fractions, thresholds) / span)
    return PckCurve(thresholds, fractions, auc, space=space, scale_factor=scale_factor)


def scale_to_heatmap_resolution(pred, gt, from_dims, to_dims):
    """Rescale coordinates from image dimensions to a coarser grid, per axis.

    Enables reporting the same data at the original resolution and at the
    network's output-grid resolution.
    """
    from_dims = np.asarray(from_dims, dtype=float)
    to_dims = np.asarray(to_dims, dtype=float)
    if np.any(from_dims <= 0) or np.any(to_dims <= 0):
        raise ValueError("dimensions must be positive")
    factor = to_dims / from_dims
    return np.asarray(pred, dtype=float) * factor, np.asarray(gt, dtype=float) * factor


def mean_3d_error(pred, gt, mask=None, alignment: str = "none") -> float:
    """Mean Euclidean joint error in mm, optionally after wrist alignment."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if alignment == "root-relative":
        pred = pred - pred[0]
        gt = gt - gt[0]
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    return float(np.mean(_masked_distances(pred, gt, mask)))


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray               # (classes, classes); rows = truth
    per_class_accuracy: np.ndarray
    overall_accuracy: float

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "per_class_accuracy": self.per_class_accuracy.tolist(),
            "overall_accuracy": self.overall_accuracy,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["truth\\pred"] + list(range(self.num_classes)))
            for i, row in enumerate(self.counts):
                writer.writerow([i] + [int(c) for c in row])


def confusion(predictions, truths, num_classes: int) -> ConfusionMatrix:
    """Count grid (row = truth, column = prediction) with accuracy summaries.

    Classes with no samples report a per-class accuracy of 0.
    """
    predictions = np.asarray(predictions, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if predictions.shape != truths.shape or predictions.ndim != 1:
        raise ValueError("predictions and truths must be aligned 1-D arrays")
    if len(predictions) == 0:
        raise ValueError("empty label arrays")
    for name, arr in (("prediction", predictions), ("truth", truths)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} label out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, predictions), 1)
    row_sums = counts.sum(axis=1)
    per_class = np.where(row_sums > 0, np.diag(counts) / np.maximum(row_sums, 1), 0.0)
    overall = float(np.trace(counts)) / float(counts.sum())
    return ConfusionMatrix(counts, per_class, overall)
