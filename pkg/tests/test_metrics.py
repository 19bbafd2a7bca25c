import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import brute_confusion, brute_match
from vineseg.metrics import (
    ConfusionMatrix,
    MetricsError,
    accumulate,
    confusion_matrix,
    format_table,
    iou_per_class,
    match_clusters_to_classes,
    match_from_overlap,
    mean_iou,
    metric_dict,
    overlap_matrix,
    pixel_accuracy,
    precision_recall,
    write_report,
)
from vineseg.kvfile import read_kv


def test_identical_masks_only_grow_diagonal():
    m = np.array([[0, 1], [2, 1]])
    cm = confusion_matrix([m], [m], 3)
    assert np.array_equal(cm.counts, np.diag([1, 2, 1]))
    assert pixel_accuracy(cm) == 1.0
    assert all(v == 1.0 for v in iou_per_class(cm))


def test_single_pixel_off_diagonal():
    cm = accumulate(ConfusionMatrix(3), np.array([[2]]), np.array([[1]]))
    assert cm.counts[1, 2] == 1 and cm.total == 1


def test_twelve_of_sixteen():
    gt = np.zeros((4, 4), dtype=int)
    pred = gt.copy()
    pred[0, :] = 1
    assert pixel_accuracy(confusion_matrix([pred], [gt], 2)) == 0.75


def test_blade_iou_two_of_six():
    gt = np.zeros((4, 4), dtype=int)
    gt[0, :] = 1
    pred = np.zeros((4, 4), dtype=int)
    pred[0, :2] = 1
    pred[1, :2] = 1
    assert iou_per_class(confusion_matrix([pred], [gt], 2))[1] == pytest.approx(2 / 6)


def test_undefined_iou_excluded_from_mean():
    m = np.array([[0, 1]])
    cm = confusion_matrix([m], [m], 3)
    ious = iou_per_class(cm)
    assert math.isnan(ious[2])
    assert mean_iou(cm) == 1.0
    # a class in the truth but never predicted counts as 0
    cm2 = confusion_matrix([np.array([[0, 0]])], [np.array([[0, 2]])], 3)
    assert iou_per_class(cm2)[2] == 0.0 and mean_iou(cm2) == pytest.approx(0.25)


def test_errors():
    with pytest.raises(MetricsError):
        pixel_accuracy(ConfusionMatrix(3))
    with pytest.raises(MetricsError):
        accumulate(ConfusionMatrix(2), np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(MetricsError):
        accumulate(ConfusionMatrix(2), np.full((2, 2), 2), np.zeros((2, 2), int))
    with pytest.raises(MetricsError):
        match_clusters_to_classes(np.zeros((2, 2), int), np.zeros((2, 2), int), 2, 3)


def test_random_pairs_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = int(rng.integers(2, 5))
        pred, gt = rng.integers(0, k, (8, 8)), rng.integers(0, k, (8, 8))
        cm = confusion_matrix([pred], [gt], k)
        assert cm.counts.tolist() == brute_confusion(pred, gt, k)


def test_matching_examples():
    gt = np.array([[0, 1], [1, 0]])
    assert match_clusters_to_classes(gt, gt, 2, 2).tolist() == [0, 1]
    swapped = 1 - gt
    lut = match_clusters_to_classes(swapped, gt, 2, 2)
    assert lut.tolist() == [1, 0]
    assert pixel_accuracy(confusion_matrix([lut[swapped]], [gt], 2)) == 1.0


def test_matching_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, gt = rng.integers(0, 5, (8, 8)), rng.integers(0, 3, (8, 8))
        overlap = overlap_matrix(pred, gt, 5, 3)
        lut = match_from_overlap(overlap)
        assert set(lut.tolist()) == {0, 1, 2}
        assert sum(overlap[c, lut[c]] for c in range(5)) == brute_match(overlap)


def test_matching_too_many_clusters():
    with pytest.raises(MetricsError):
        match_from_overlap(np.ones((11, 3), dtype=int))


def test_report_and_table(tmp_path):
    cm = confusion_matrix([np.array([[0, 1, 2]])], [np.array([[0, 1, 1]])], 3)
    d = metric_dict(cm)
    assert list(d) == ["pa", "iou.background", "iou.blade", "iou.veins", "mean_iou"]
    write_report(tmp_path / "r.txt", d)
    parsed = {k: float(v) for k, v in read_kv(tmp_path / "r.txt").items()}
    assert parsed == d
    assert "MeanIoU" in format_table(cm)


masks = st.integers(0, 2 ** 32 - 1)


@settings(max_examples=50, deadline=None)
@given(masks, st.integers(2, 4))
def test_relabeling_invariance(seed, k):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, k, (5, 5)), rng.integers(0, k, (5, 5))
    perm = rng.permutation(k)
    a = confusion_matrix([pred], [gt], k)
    b = confusion_matrix([perm[pred]], [perm[gt]], k)
    assert pixel_accuracy(a) == pixel_accuracy(b)
    assert mean_iou(a) == pytest.approx(mean_iou(b), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(masks, st.integers(2, 4))
def test_iou_bounded_by_precision_and_recall(seed, k):
    rng = np.random.default_rng(seed)
    cm = confusion_matrix([rng.integers(0, k, (6, 6))], [rng.integers(0, k, (6, 6))], k)
    prec, rec = precision_recall(cm)
    for i, p, r in zip(iou_per_class(cm), prec, rec):
        if not math.isnan(i):
            assert i <= p + 1e-15 or math.isnan(p)
            assert i <= r + 1e-15 or math.isnan(r)


@settings(max_examples=30, deadline=None)
@given(masks)
def test_accumulation_order_independent(seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4))) for _ in range(5)]
    a = confusion_matrix([p for p, _ in pairs], [g for _, g in pairs], 3)
    order = rng.permutation(5)
    b = confusion_matrix([pairs[i][0] for i in order], [pairs[i][1] for i in order], 3)
    shards = confusion_matrix([p for p, _ in pairs[:2]], [g for _, g in pairs[:2]], 3) + \
        confusion_matrix([p for p, _ in pairs[2:]], [g for _, g in pairs[2:]], 3)
    assert a == b == shards


@settings(max_examples=30, deadline=None)
@given(masks, st.integers(3, 6))
def test_matching_never_worse_than_identity(seed, C):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, C, (6, 6)), rng.integers(0, 3, (6, 6))
    lut = match_clusters_to_classes(pred, gt, C, 3)
    matched = pixel_accuracy(confusion_matrix([lut[pred]], [gt], 3))
    ident = np.where(pred < 3, pred, -1)
    assert matched >= float(np.mean(ident == gt))
