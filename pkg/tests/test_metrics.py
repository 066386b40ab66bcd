import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffprobe.metrics import (IoUResult, accuracy, compute_miou, confusion_matrix,
                               f1_from_labels, f1_scores)


def brute_force_iou(pred, label, num_classes, ignore_index=None):
    """Pixel-by-pixel counting oracle."""
    pred, label = np.asarray(pred).ravel(), np.asarray(label).ravel()
    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        inter = union = 0
        for p, l in zip(pred, label):
            if ignore_index is not None and l == ignore_index:
                continue
            in_p, in_l = p == c, l == c
            inter += in_p and in_l
            union += in_p or in_l
        if union:
            per_class[c] = inter / union
    return per_class


def test_perfect_prediction():
    label = np.array([[0, 1], [2, 1]])
    res = compute_miou(label, label, 3)
    np.testing.assert_allclose(res.per_class, [1.0, 1.0, 1.0])
    assert res.miou == 1.0
    assert accuracy(label, label) == 1.0


def test_single_class_constant_prediction():
    label = np.zeros((4, 4), dtype=int)
    res = compute_miou(np.zeros((4, 4), dtype=int), label, 3)
    assert res.per_class[0] == 1.0
    assert np.isnan(res.per_class[1]) and np.isnan(res.per_class[2])
    assert res.miou == 1.0  # only class 0 is present in the union


def test_confusion_arithmetic_example():
    # per-class counts TP=2, FP=1, FN=1 -> IoU = 2/4
    pred = np.array([1, 1, 1, 0, 0, 0, 0, 0])
    label = np.array([1, 1, 0, 1, 0, 0, 0, 0])
    res = compute_miou(pred, label, 2)
    assert res.per_class[1] == pytest.approx(0.5)


def test_disjoint_masks_iou_zero():
    pred = np.array([1, 1, 0, 0])
    label = np.array([0, 0, 1, 1])
    res = compute_miou(pred, label, 2)
    assert res.per_class[1] == 0.0


def test_four_pixel_hand_example():
    # 3 matches, 1 cross-class error: pred class1 where label class2
    pred = np.array([[0, 0], [1, 1]])
    label = np.array([[0, 0], [1, 2]])
    res = compute_miou(pred, label, 3)
    assert res.per_class[0] == pytest.approx(1.0)
    assert res.per_class[1] == pytest.approx(0.5)   # inter 1, union 2
    assert res.per_class[2] == pytest.approx(0.0)   # inter 0, union 1
    assert res.miou == pytest.approx((1.0 + 0.5 + 0.0) / 3)


def test_all_ignored_flags_no_valid_pixels():
    pred = np.zeros((2, 2), dtype=int)
    label = np.full((2, 2), 255)
    res = compute_miou(pred, label, 3, ignore_index=255)
    assert res.no_valid_pixels
    assert np.isnan(res.miou)


def test_ignore_index_excluded_everywhere():
    pred = np.array([0, 1, 1])
    label = np.array([0, 255, 1])
    res = compute_miou(pred, label, 2, ignore_index=255)
    np.testing.assert_allclose(res.per_class, [1.0, 1.0])


def test_out_of_range_class_raises():
    with pytest.raises(ValueError, match="outside"):
        compute_miou(np.array([3]), np.array([0]), 3)
    with pytest.raises(ValueError, match="outside"):
        compute_miou(np.array([0]), np.array([7]), 3)


def test_miou_matches_brute_force_on_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred = rng.integers(0, 4, size=(8, 8))
        label = rng.integers(0, 4, size=(8, 8))
        res = compute_miou(pred, label, 4)
        want = brute_force_iou(pred, label, 4)
        np.testing.assert_array_equal(np.isnan(res.per_class), np.isnan(want))
        np.testing.assert_allclose(np.nan_to_num(res.per_class), np.nan_to_num(want), rtol=0)


@given(st.integers(2, 5), st.integers(0, 3))
@settings(max_examples=25, deadline=None)
def test_miou_brute_force_property_with_ignore(num_classes, seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, num_classes, size=(6, 6))
    label = rng.integers(0, num_classes, size=(6, 6))
    label[rng.random((6, 6)) < 0.2] = 255
    res = compute_miou(pred, label, num_classes, ignore_index=255)
    want = brute_force_iou(pred, label, num_classes, ignore_index=255)
    np.testing.assert_allclose(np.nan_to_num(res.per_class, nan=-1),
                               np.nan_to_num(want, nan=-1), rtol=0, atol=0)


def test_confusion_matrix_orientation():
    cm = confusion_matrix(np.array([1, 0]), np.array([0, 0]), 2)
    assert cm[0, 1] == 1 and cm[0, 0] == 1 and cm.sum() == 2


def test_f1_perfect_and_disjoint():
    ind = np.array([[1, 0], [0, 1], [1, 1]])
    assert f1_scores(ind, ind) == {"micro": 1.0, "macro": 1.0}
    res = f1_scores(ind, 1 - ind)
    assert res["micro"] == 0.0


def test_f1_hand_computed():
    pred = np.array([[1, 0], [1, 0], [0, 1]])
    target = np.array([[1, 0], [0, 1], [0, 1]])
    # class0: tp=1 fp=1 fn=0 -> f1=2/3; class1: tp=1 fp=0 fn=1 -> f1=2/3
    res = f1_scores(pred, target)
    assert res["macro"] == pytest.approx(2 / 3)
    assert res["micro"] == pytest.approx(2 / 3)


def test_f1_from_labels_matches_one_hot():
    pred = np.array([0, 1, 2, 1])
    label = np.array([0, 2, 2, 1])
    res = f1_from_labels(pred, label, 3)
    eye = np.eye(3, dtype=bool)
    want = f1_scores(eye[pred], eye[label])
    assert res == want


def test_accuracy_shape_guard():
    with pytest.raises(ValueError):
        accuracy(np.zeros(3), np.zeros(4))
