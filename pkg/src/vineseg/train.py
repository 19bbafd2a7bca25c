"""Supervised and unsupervised training loops, prediction and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as D
from .arch import Model, build_model
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_echo
from .kvfile import append_group
from .loss import ClassWeights, class_weights_from_dataset, fcm_loss, pixel_features, weighted_cross_entropy
from .metrics import (
    ConfusionMatrix,
    accumulate,
    class_names,
    match_from_overlap,
    metric_dict,
    overlap_matrix,
)
from .nn import softmax_channels
from .optim import AdamState, adam_step, model_grads
from .tensor import Tensor, no_grad

EVAL_BATCH = 8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: list = field(default_factory=list)  # one dict per group, in file order
    model: Optional[Model] = None


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(img: np.ndarray, cfg: RunConfig, sigmoid: Optional[bool] = None) -> np.ndarray:
    """Resize to the network input, force 3 channels, optionally sigmoid-correct."""
    img = D.to_channels(np.asarray(img, dtype=np.float32), 3)
    if img.shape[1:] != (cfg.height, cfg.width):
        img = D.resize_bilinear(img, cfg.height, cfg.width)
    use_sigmoid = cfg.sigmoid_correction if sigmoid is None else sigmoid
    if use_sigmoid:
        img = D.sigmoid_correction(img, cfg.sigmoid_gain, cfg.sigmoid_cutoff)
    return img.astype(np.float32, copy=False)


def prepare_mask(mask: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if mask.shape != (cfg.height, cfg.width):
        mask = D.resize_nearest(mask, cfg.height, cfg.width)
    return mask


def merge_labels(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Ground truth in the configured alphabet; with two classes veins count as leaf."""
    if num_classes == 2:
        return (mask > 0).astype(np.uint8)
    return mask


def _check_label_range(samples: Sequence[D.Sample], num_classes: int) -> None:
    for s in samples:
        top = int(s.mask.max()) if s.mask.size else 0
        if top >= num_classes:
            raise TrainingError(
                f"class-count mismatch: trimap {s.name} holds label {top} but the model predicts {num_classes} classes"
            )


# ---------------------------------------------------------------------------
# model/checkpoint plumbing


def model_from_config(cfg: RunConfig) -> Model:
    return build_model(cfg.unet_spec(), cfg.arch, cfg.seed)


def make_checkpoint(model: Model, cfg: RunConfig, metrics: dict, state: Optional[dict] = None) -> Checkpoint:
    tensors = state if state is not None else model.state_dict()
    return Checkpoint({k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}, cfg.echo(),
                      {k: float(v) for k, v in metrics.items()})


@dataclass
class Segmenter:
    """A trained model plus the preprocessing recorded with it."""

    model: Model
    cfg: RunConfig

    @classmethod
    def from_checkpoint(cls, ckpt) -> "Segmenter":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        cfg = config_from_echo(ckpt.config)
        model = model_from_config(cfg)
        model.load_state_dict(ckpt.tensors)
        return cls(model, cfg)

    @property
    def channels(self) -> int:
        return self.cfg.output_channels

    def _softmax(self, images, sigmoid):
        # yields (image, probabilities at network resolution)
        for start in range(0, len(images), EVAL_BATCH):
            chunk = images[start:start + EVAL_BATCH]
            batch = np.stack([preprocess(im, self.cfg, sigmoid) for im in chunk])
            with no_grad():
                probs = softmax_channels(self.model(Tensor(batch))).data
            yield from zip(chunk, probs)

    def probabilities(self, images: Sequence[np.ndarray], sigmoid: Optional[bool] = None) -> list[np.ndarray]:
        """Softmax maps ``[C, h, w]`` at each image's own resolution."""
        out = []
        for im, p in self._softmax(images, sigmoid):
            h, w = im.shape[1:]
            out.append(p if p.shape[1:] == (h, w) else D.resize_bilinear(p, h, w))
        return out

    def predict(self, images: Sequence[np.ndarray], sigmoid: Optional[bool] = None) -> list[np.ndarray]:
        """Label masks (argmax of the softmax) at each image's own resolution."""
        out = []
        for im, p in self._softmax(images, sigmoid):
            mask = p.argmax(axis=0).astype(np.uint8)
            h, w = im.shape[1:]
            out.append(mask if mask.shape == (h, w) else D.resize_nearest(mask, h, w))
        return out


def predict(ckpt, image: np.ndarray, sigmoid: Optional[bool] = None, with_probs: bool = False):
    """Label mask for one ``[c, h, w]`` image; optionally also the per-class maps."""
    seg = ckpt if isinstance(ckpt, Segmenter) else Segmenter.from_checkpoint(ckpt)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise D.ImageFormatError(f"expected a [c, h, w] image, got shape {image.shape}")
    if image.shape[0] not in (1, 3):
        raise D.ImageFormatError(f"model expects 1 or 3 input channels, image has {image.shape[0]}")
    mask = seg.predict([image], sigmoid)[0]
    if with_probs:
        return mask, seg.probabilities([image], sigmoid)[0]
    return mask


# ---------------------------------------------------------------------------
# evaluation


def evaluate_supervised(seg: Segmenter, samples: Sequence[D.Sample], sigmoid: Optional[bool] = None) -> ConfusionMatrix:
    k = seg.cfg.num_classes
    preds = seg.predict([s.image for s in samples], sigmoid)
    cm = ConfusionMatrix(k)
    for s, p in zip(samples, preds):
        gt = merge_labels(s.mask, k)
        if int(gt.max()) >= k:
            raise TrainingError(f"class-count mismatch: trimap {s.name} has labels beyond {k} classes")
        accumulate(cm, p, gt)
    return cm


def evaluate_unsupervised(seg: Segmenter, samples: Sequence[D.Sample], sigmoid: Optional[bool] = None):
    """Match clusters to classes on the pooled overlap, then score. Returns ``(cm, lut)``."""
    C, k = seg.channels, seg.cfg.num_classes
    if C < k:
        raise TrainingError(f"{C} clusters cannot be matched to {k} classes")
    preds = seg.predict([s.image for s in samples], sigmoid)
    gts = [merge_labels(s.mask, k) for s in samples]
    overlap = np.zeros((C, k), dtype=np.int64)
    for p, g in zip(preds, gts):
        overlap += overlap_matrix(p, g, C, k)
    lut = match_from_overlap(overlap)
    cm = ConfusionMatrix(k)
    for p, g in zip(preds, gts):
        accumulate(cm, lut[p], g)
    return cm, lut


def evaluate(seg: Segmenter, samples: Sequence[D.Sample], sigmoid: Optional[bool] = None) -> dict:
    """Metrics dict for either mode (pa, iou.<class>, mean_iou)."""
    if any(s.mask is None for s in samples):
        raise D.DatasetError("evaluation needs a trimap for every image")
    if seg.cfg.mode == "supervised":
        cm = evaluate_supervised(seg, samples, sigmoid)
    else:
        cm, _ = evaluate_unsupervised(seg, samples, sigmoid)
    return metric_dict(cm, class_names(seg.cfg.num_classes))


# ---------------------------------------------------------------------------
# training


def _select(samples: Sequence[D.Sample], names: Sequence[str]) -> list[D.Sample]:
    by_source: dict = {}
    for s in samples:
        by_source.setdefault(s.source, []).append(s)
    return [s for n in sorted(names) for s in by_source[n]]


def _load_splits(cfg: RunConfig, require_trimaps: bool):
    root = cfg.resolve(cfg.data_dir)
    samples = D.load_dataset(root, require_trimaps=require_trimaps)
    train_ids, valid_ids, test_ids = D.split([s.source for s in samples], cfg.split_spec())
    return _select(samples, train_ids), _select(samples, valid_ids), _select(samples, test_ids)


def _start_report(cfg: RunConfig) -> Optional[Path]:
    path = cfg.resolve(cfg.report)
    if path is not None:
        path.write_text("", encoding="utf-8")
    return path


def _log(report: list, path: Optional[Path], group: dict, log: Optional[Callable]) -> None:
    report.append(group)
    if path is not None:
        append_group(path, group)
    if log is not None:
        log(group)


def _finish(result: TrainResult, cfg: RunConfig) -> TrainResult:
    path = cfg.resolve(cfg.checkpoint)
    if path is not None:
        save_checkpoint(result.checkpoint, path)
    return result


def _step(model: Model, params: dict, loss, opt: AdamState, epoch: int, step: int) -> float:
    value = float(loss.item())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
    model.zero_grad()
    loss.backward()
    adam_step(params, model_grads(params), opt)
    return value


def train_supervised(cfg: RunConfig, log: Optional[Callable] = None) -> TrainResult:
    """Weighted cross-entropy with Adam; keeps the parameters of the best validation MeanIoU."""
    cfg.check_runnable("supervised")
    train_s, valid_s, test_s = _load_splits(cfg, require_trimaps=True)
    train_s = D.augment_samples(train_s, cfg.augment_copies, cfg.seed, cfg.augment_params())
    labels = [merge_labels(prepare_mask(s.mask, cfg), cfg.num_classes) for s in train_s]
    x_all = np.stack([preprocess(s.image, cfg) for s in train_s])
    y_all = np.stack(labels)
    _check_label_range([s._replace(mask=m) for s, m in zip(train_s, labels)], cfg.num_classes)

    weights = class_weights_from_dataset(labels, cfg.num_classes) if cfg.class_weights else ClassWeights.uniform(cfg.num_classes)
    model = model_from_config(cfg)
    seg = Segmenter(model, cfg)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    report_path = _start_report(cfg)
    report: list = []
    names = class_names(cfg.num_classes)

    best_score, best_epoch, best_state, best_val = -math.inf, 0, None, {}
    n = len(train_s)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = model(Tensor(x_all[idx]))
            loss = weighted_cross_entropy(logits, y_all[idx], weights)
            total += _step(model, params, loss, opt, epoch, step) * len(idx)
        val = metric_dict(evaluate_supervised(seg, valid_s), names, "val_")
        group = {"epoch": epoch, "train_loss": total / n, **val}
        _log(report, report_path, group, log)
        score = val["val_mean_iou"]
        if best_state is None or score > best_score:
            best_score, best_epoch, best_state, best_val = score, epoch, model.state_dict(), val

    model.load_state_dict(best_state)
    metrics = {"best_epoch": best_epoch, **best_val}
    if test_s:
        metrics.update(metric_dict(evaluate_supervised(seg, test_s), names, "test_"))
    _log(report, report_path, metrics, log)
    return _finish(TrainResult(make_checkpoint(model, cfg, metrics), report, model), cfg)


def train_unsupervised(cfg: RunConfig, log: Optional[Callable] = None) -> TrainResult:
    """Fuzzy c-means loss on softmaxed logits; labels are never read during training.

    When trimaps exist, the final model is scored after training on the test
    split (or on the training images when no test split is configured).
    """
    cfg.check_runnable("unsupervised")
    train_s, _valid_s, test_s = _load_splits(cfg, require_trimaps=False)
    train_s = [s._replace(mask=None) for s in train_s]
    train_s = D.augment_samples(train_s, cfg.augment_copies, cfg.seed, cfg.augment_params())
    x_all = np.stack([preprocess(s.image, cfg) for s in train_s])
    fcm = cfg.fcm()

    model = model_from_config(cfg)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    report_path = _start_report(cfg)
    report: list = []

    n = len(train_s)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = x_all[idx]
            u = softmax_channels(model(Tensor(x)))
            loss = fcm_loss(u, pixel_features(x, fcm.feature), fcm)
            total += _step(model, params, loss, opt, epoch, step) * len(idx)
        _log(report, report_path, {"epoch": epoch, "train_loss": total / n}, log)

    metrics: dict = {"final_epoch": cfg.epochs}
    seg = Segmenter(model, cfg)
    eval_ids = test_s if test_s else _load_splits(cfg, require_trimaps=False)[0]
    if eval_ids and all(s.mask is not None for s in eval_ids):
        cm, lut = evaluate_unsupervised(seg, eval_ids)
        prefix = "test_" if test_s else "train_"
        metrics.update(metric_dict(cm, class_names(cfg.num_classes), prefix))
        metrics.update({f"cluster{c}_class": int(k) for c, k in enumerate(lut)})
        _log(report, report_path, metrics, log)
    return _finish(TrainResult(make_checkpoint(model, cfg, metrics), report, model), cfg)


def train(cfg: RunConfig, log: Optional[Callable] = None) -> TrainResult:
    if cfg.mode == "supervised":
        return train_supervised(cfg, log)
    return train_unsupervised(cfg, log)
