"""Segmentation metrics over an integer confusion matrix (rows = truth, cols = prediction)."""

from __future__ import annotations

import itertools
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .kvfile import dump_kv

CLASS_NAMES = ("background", "blade", "veins")
MAX_EXHAUSTIVE_CLUSTERS = 10


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        if num_classes < 1:
            raise MetricsError("num_classes must be positive")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise MetricsError(f"counts must be a non-negative {num_classes}x{num_classes} matrix")
        self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.num_classes}, total={self.total})"


def _check_mask(mask: np.ndarray, k: int, what: str) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.issubdtype(mask.dtype, np.integer):
        raise MetricsError(f"{what} mask must hold integer labels, got {mask.dtype}")
    if mask.size and (mask.min() < 0 or mask.max() >= k):
        raise MetricsError(f"{what} mask has labels outside [0, {k})")
    return mask.astype(np.int64, copy=False)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair; returns ``cm`` (updated in place)."""
    k = cm.num_classes
    pred = _check_mask(pred, k, "prediction")
    gt = _check_mask(gt, k, "ground-truth")
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    cm.counts += np.bincount((gt * k + pred).reshape(-1), minlength=k * k).reshape(k, k)
    return cm


def confusion_matrix(preds: Iterable, gts: Iterable, num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        accumulate(cm, p, g)
    return cm


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricsError("pixel accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def iou_per_class(cm: ConfusionMatrix) -> list[float]:
    """IoU per class; ``nan`` marks classes absent from both truth and prediction."""
    if cm.total == 0:
        raise MetricsError("IoU of an empty confusion matrix")
    c = cm.counts
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    return [float(i) / float(u) if u else math.nan for i, u in zip(inter, union)]


def mean_iou(cm: ConfusionMatrix) -> float:
    vals = [v for v in iou_per_class(cm) if not math.isnan(v)]
    return sum(vals) / len(vals)


def precision_recall(cm: ConfusionMatrix) -> tuple[list[float], list[float]]:
    c = cm.counts
    inter = np.diag(c)
    col, row = c.sum(axis=0), c.sum(axis=1)
    prec = [float(i) / float(p) if p else math.nan for i, p in zip(inter, col)]
    rec = [float(i) / float(r) if r else math.nan for i, r in zip(inter, row)]
    return prec, rec


def overlap_matrix(pred_clusters, gt, C: int, num_classes: int) -> np.ndarray:
    """Pixel counts ``[C, num_classes]`` of cluster ``c`` landing on class ``k``."""
    pred = _check_mask(pred_clusters, C, "cluster")
    gt = _check_mask(gt, num_classes, "ground-truth")
    if pred.shape != gt.shape:
        raise MetricsError(f"cluster mask shape {pred.shape} differs from ground truth {gt.shape}")
    idx = (pred * num_classes + gt).reshape(-1)
    return np.bincount(idx, minlength=C * num_classes).reshape(C, num_classes)


def match_from_overlap(overlap: np.ndarray) -> np.ndarray:
    """Cluster→class lookup maximising matched pixels.

    Every class receives at least one cluster: each injective choice of one
    cluster per class is enumerated and the remaining clusters take their
    plurality class. Ties keep the lexicographically first choice; plurality
    ties go to the lowest class id.
    """
    overlap = np.asarray(overlap, dtype=np.int64)
    C, K = overlap.shape
    if C < K:
        raise MetricsError(f"{C} clusters cannot cover {K} classes")
    if C > MAX_EXHAUSTIVE_CLUSTERS:
        raise MetricsError(f"exhaustive matching supports at most {MAX_EXHAUSTIVE_CLUSTERS} clusters, got {C}")
    plurality = overlap.argmax(axis=1)
    best_gain = overlap.max(axis=1)
    best, best_score = None, -1
    for chosen in itertools.permutations(range(C), K):
        # chosen[k] is the cluster representing class k
        score = int(best_gain.sum())
        for k, c in enumerate(chosen):
            score += int(overlap[c, k] - best_gain[c])
        if score > best_score:
            best, best_score = chosen, score
    lut = plurality.copy()
    for k, c in enumerate(best):
        lut[c] = k
    return lut


def match_clusters_to_classes(pred_clusters, gt, C: int, num_classes: int) -> np.ndarray:
    """Map cluster ids to class ids for one mask pair (see :func:`match_from_overlap`)."""
    if C < num_classes:
        raise MetricsError(f"{C} clusters cannot cover {num_classes} classes")
    return match_from_overlap(overlap_matrix(pred_clusters, gt, C, num_classes))


def class_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == len(CLASS_NAMES):
        return CLASS_NAMES
    if num_classes == 2:
        return ("background", "leaf")
    return tuple(f"class{k}" for k in range(num_classes))


def metric_dict(cm: ConfusionMatrix, names: Optional[Sequence[str]] = None, prefix: str = "") -> dict:
    names = names or class_names(cm.num_classes)
    out = {f"{prefix}pa": pixel_accuracy(cm)}
    for name, v in zip(names, iou_per_class(cm)):
        out[f"{prefix}iou.{name}"] = v
    out[f"{prefix}mean_iou"] = mean_iou(cm)
    return out


def format_table(cm: ConfusionMatrix, names: Optional[Sequence[str]] = None) -> str:
    names = names or class_names(cm.num_classes)
    ious = iou_per_class(cm)
    width = max(len(n) for n in list(names) + ["class"])
    lines = [f"{'class':<{width}}  IoU", "-" * (width + 8)]
    for n, v in zip(names, ious):
        lines.append(f"{n:<{width}}  {'undef' if math.isnan(v) else f'{v:.4f}'}")
    lines.append("-" * (width + 8))
    lines.append(f"{'PA':<{width}}  {pixel_accuracy(cm):.4f}")
    lines.append(f"{'MeanIoU':<{width}}  {mean_iou(cm):.4f}")
    return "\n".join(lines)


def write_report(path, metrics: dict) -> None:
    Path(path).write_text(dump_kv(metrics), encoding="utf-8")
