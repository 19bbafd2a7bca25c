"""Training objectives: class-weighted cross-entropy and the fuzzy c-means loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .nn import log_softmax_channels
from .tensor import ShapeError, Tensor

__all__ = [
    "ClassWeights",
    "FcmConfig",
    "LabelError",
    "weighted_cross_entropy",
    "class_weights_from_counts",
    "class_weights_from_dataset",
    "fcm_centroids",
    "fcm_loss",
    "pixel_features",
]



class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if not w or any(not np.isfinite(v) or v <= 0 for v in w):
            raise ValueError(f"class weights must be finite and positive, got {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls((1.0,) * num_classes)

    def __len__(self) -> int:
        return len(self.weights)

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.weights, dtype=dtype)


@dataclass(frozen=True)
class FcmConfig:
    """Unsupervised objective settings.

    ``clusters`` is the number of soft clusters (network output channels),
    ``q`` the fuzzifier exponent, ``centroid_grad`` whether centroids are held
    constant during backprop (``"detached"``) or differentiated through
    (``"flow"``), and ``feature`` the per-pixel vector being clustered.
    """

    clusters: int = 3
    q: float = 2.0
    centroid_grad: str = "detached"
    feature: str = "rgb"

    def __post_init__(self):
        if self.clusters < 2:
            raise ValueError(f"FCM needs at least 2 clusters, got {self.clusters}")
        if not self.q >= 1:
            raise ValueError(f"fuzzifier q must be >= 1, got {self.q}")
        if self.centroid_grad not in ("detached", "flow"):
            raise ValueError(f"centroid_grad must be 'detached' or 'flow', got {self.centroid_grad!r}")
        if self.feature not in ("rgb", "intensity"):
            raise ValueError(f"feature must be 'rgb' or 'intensity', got {self.feature!r}")


def _check_labels(target: np.ndarray, num_classes: int) -> None:
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        bad = target[(target < 0) | (target >= num_classes)][0]
        raise LabelError(f"label {int(bad)} is outside [0, {num_classes})")


def weighted_cross_entropy(logits: Tensor, target, weights: ClassWeights | None = None) -> Tensor:
    """Mean over pixels of ``-w[t] * log softmax(logits)[t]``.

    ``logits`` is [n, c, h, w] and ``target`` an integer array [n, h, w].
    Without weights every class counts 1.
    """
    target = np.asarray(target)
    if logits.ndim != 4:
        raise ShapeError(f"logits must be [n, c, h, w], got {logits.shape}")
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    _check_labels(target, c)
    weights = weights or ClassWeights.uniform(c)
    if len(weights) != c:
        raise ShapeError(f"{len(weights)} class weights for {c} classes")
    logp = log_softmax_channels(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, target[:, None].astype(np.int64), 1, axis=1)
    coef = onehot * weights.as_array(logits.dtype)[None, :, None, None]
    coef *= np.asarray(-1.0 / (n * h * w), dtype=logits.dtype)
    return (logp * Tensor._wrap(coef)).sum()


def class_weights_from_counts(counts: Sequence[int]) -> ClassWeights:
    """``w_k = total / count_k`` rescaled so the weights average to 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        absent = [int(k) for k in np.flatnonzero(counts <= 0)]
        raise LabelError(f"classes {absent} never occur; cannot weight by inverse frequency")
    raw = counts.sum() / counts
    return ClassWeights(tuple(raw / raw.mean()))


def class_weights_from_dataset(masks: Iterable[np.ndarray], num_classes: int) -> ClassWeights:
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        m = np.asarray(m)
        _check_labels(m, num_classes)
        counts += np.bincount(m.reshape(-1).astype(np.int64), minlength=num_classes)
    return class_weights_from_counts(counts)


def pixel_features(images: np.ndarray, feature: str = "rgb") -> np.ndarray:
    """Per-pixel vectors the clustering objective works on, [n, f, h, w]."""
    images = np.asarray(images)
    if feature == "rgb":
        return images
    if feature == "intensity":
        return images.mean(axis=1, keepdims=True)
    raise ValueError(f"unknown feature {feature!r}")


def _check_memberships(u: np.ndarray) -> None:
    dev = np.abs(u.sum(axis=1) - 1.0)
    if dev.size and dev.max() > 1e-4:
        raise ValueError(f"memberships must sum to 1 per pixel (max deviation {dev.max():.3g})")


def fcm_centroids(memberships: np.ndarray, features: np.ndarray, q: float) -> np.ndarray:
    """Closed-form centroids ``Σ_j u^q y_j / Σ_j u^q`` per image, shape [n, C, f]."""
    uq = np.power(memberships, q)
    num = np.einsum("nkhw,nfhw->nkf", uq, features)
    den = uq.sum(axis=(2, 3))[:, :, None]
    # a cluster without membership mass gets centroid 0 (its terms vanish anyway)
    return num / np.where(den > 0, den, 1.0)


def fcm_loss(memberships: Tensor, features, cfg: FcmConfig = FcmConfig(), reduction: str = "mean") -> Tensor:
    """Fuzzy c-means objective with network memberships.

    ``J = Σ_j Σ_k u_jk^q ||y_j - v_k||²`` where centroids ``v_k`` are recomputed
    in closed form from the current memberships of each image. With
    ``reduction="mean"`` the per-image sums are divided by the pixel count and
    averaged over the batch; ``"sum"`` returns the raw double sum over all images.
    """
    if not cfg.q >= 1:
        raise ValueError(f"fuzzifier q must be >= 1, got {cfg.q}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    y = features.data if isinstance(features, Tensor) else np.asarray(features)
    u = memberships
    if u.ndim != 4 or y.ndim != 4 or u.shape[0] != y.shape[0] or u.shape[2:] != y.shape[2:]:
        raise ShapeError(f"memberships {u.shape} and features {y.shape} must be [n, C, h, w] and [n, f, h, w]")
    _check_memberships(u.data)
    y = y.astype(u.dtype, copy=False)
    n, _, h, w = u.shape
    q = cfg.q
    scale = 1.0 / (n * h * w) if reduction == "mean" else 1.0
    scale = np.asarray(scale, dtype=u.dtype)

    if cfg.centroid_grad == "detached":
        v = fcm_centroids(u.data, y, q)
        dist = _sq_dist(y, v)
        return ((u ** q) * Tensor._wrap(dist * scale)).sum()
    return _fcm_flow(u, y, q, scale)


def _sq_dist(y: np.ndarray, v: np.ndarray) -> np.ndarray:
    # ||y_j - v_k||² for every pixel and cluster -> [n, C, h, w]
    diff = y[:, None, :, :, :] - v[:, :, :, None, None]
    return np.einsum("nkfhw,nkfhw->nkhw", diff, diff)


def _fcm_flow(u: Tensor, y: np.ndarray, q: float, scale: np.ndarray) -> Tensor:
    # centroids stay on the tape, so their dependence on u is differentiated
    n, C, h, w = u.shape
    f = y.shape[1]
    uq = u ** q
    y5 = Tensor._wrap(y.reshape(n, 1, f, h, w))
    num = (uq.reshape(n, C, 1, h, w) * y5).sum(axes=(3, 4))
    mass = uq.sum(axes=(2, 3)).reshape(n, C, 1)
    mass = mass + Tensor._wrap((mass.data == 0).astype(mass.dtype))
    v = (num / mass).reshape(n, C, f, 1, 1)
    diff = y5 - v
    dist = (diff * diff).sum(axes=2)
    return (uq * dist).sum() * scale
