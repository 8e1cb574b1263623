import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgshift.metrics import (IgnoredLabelCounter, background_shift_rate, ignored_label_ratio, miou,
                             predict_labels, token_similarity)

GROUPS = {"initial": [0, 1, 2], "incremented": [3], "all": [0, 1, 2, 3]}


def test_perfect_predictions():
    gt = [np.random.default_rng(0).integers(0, 4, (8, 8))]
    rep = miou(gt, gt, GROUPS)
    assert all(v == 1.0 for v in rep.per_class_iou.values())
    assert rep.group_miou == {"initial": 1.0, "incremented": 1.0, "all": 1.0}


def test_background_predictor_zero_object_iou():
    gt = np.array([[0, 1], [2, 3]])
    rep = miou([np.zeros_like(gt)], [gt], GROUPS)
    assert rep.per_class_iou[1] == rep.per_class_iou[2] == rep.per_class_iou[3] == 0.0


def test_hand_confusion_one_third():
    # class 1: one TP, one FP, one FN
    gt = np.array([[1, 1], [0, 0]])
    pred = np.array([[1, 0], [1, 0]])
    assert abs(miou([pred], [gt], {"all": [0, 1]}).per_class_iou[1] - 1 / 3) < 1e-15


def test_absent_class_excluded_and_ignore_skipped():
    gt = np.array([[0, 1], [255, 255]])
    pred = np.array([[0, 1], [3, 3]])
    rep = miou([pred], [gt], GROUPS)
    assert 2 not in rep.per_class_iou and 3 not in rep.per_class_iou
    assert rep.group_miou["initial"] == 1.0
    assert math.isnan(rep.group_miou["incremented"])


def test_empty_test_set():
    with pytest.raises(ValueError):
        miou([], [], GROUPS)


def test_tie_break_lowest_index():
    probs = np.array([[0.4, 0.2, 0.4], [0.1, 0.45, 0.45]])
    np.testing.assert_array_equal(predict_labels(probs), [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_iou_permutation_symmetry(seed):
    rng = np.random.default_rng(seed)
    gt = [rng.integers(0, 5, (6, 6)) for _ in range(3)]
    pred = [rng.integers(0, 5, (6, 6)) for _ in range(3)]
    perm = rng.permutation(5)
    a = miou(pred, gt, {"all": range(5)}).per_class_iou
    b = miou([perm[p] for p in pred], [perm[g] for g in gt], {"all": range(5)}).per_class_iou
    for c, v in a.items():
        assert abs(b[int(perm[c])] - v) < 1e-15


def test_similarity_duplicated_background():
    t = np.random.default_rng(0).standard_normal((4, 5))
    t[3] = t[0]
    rep = token_similarity(t, [3], [1, 2])
    assert abs(rep.new_bg - 100) < 1e-12
    assert math.isnan(rep.new_new)


def test_similarity_orthogonal_tokens():
    rep = token_similarity(np.eye(5), [3, 4], [1, 2])
    assert rep.as_dict() == {"Ct_Ct": 0.0, "Ct_c0": 0.0, "Ct_old": 0.0}


def test_similarity_zero_token_rejected():
    t = np.eye(3)
    t[1] = 0
    with pytest.raises(ValueError):
        token_similarity(t, [2], [1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_similarity_scale_invariant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((6, 4))
    scaled = t * rng.uniform(0.1, 10, (6, 1))
    a = token_similarity(t, [4, 5], [1, 2, 3]).as_dict()
    b = token_similarity(scaled, [4, 5], [1, 2, 3]).as_dict()
    for k in a:
        assert abs(a[k] - b[k]) < 1e-10
        assert -100 - 1e-9 <= a[k] <= 100 + 1e-9


def test_ignored_ratio_extremes():
    full = np.array([1, 1, 2, 0])
    y_tilde = np.array([0, 0, 0, 0])
    assert ignored_label_ratio(y_tilde, np.array([255, 255, 255, 0]), full, [1, 2]) == 1.0
    assert ignored_label_ratio(y_tilde, y_tilde, full, [1, 2]) == 0.0
    assert math.isnan(ignored_label_ratio(np.array([1, 1, 2, 0]), y_tilde, full, [1, 2]))


def test_ignored_ratio_complements_background_share():
    rng = np.random.default_rng(5)
    full = rng.integers(0, 4, 500)
    y_tilde = np.where(rng.random(500) < 0.5, 0, full)
    y_bar = np.where((y_tilde == 0) & (rng.random(500) < 0.3), 255, y_tilde)
    mis = np.isin(full, [1, 2, 3]) & (y_tilde == 0)
    r = ignored_label_ratio(y_tilde, y_bar, full, [1, 2, 3])
    assert 0 <= r <= 1
    assert abs(r - (1 - (y_bar[mis] == 0).mean())) < 1e-15


def test_ignored_counter_pools_scenes():
    c = IgnoredLabelCounter()
    assert math.isnan(c.ratio)
    c.update(np.array([0, 0]), np.array([255, 0]), np.array([1, 1]), [1])
    c.update(np.array([0, 0]), np.array([255, 255]), np.array([1, 0]), [1])
    assert c.ratio == 2 / 3


def test_background_shift_rate():
    gt = [np.array([[1, 2], [0, 0]])]
    assert background_shift_rate(gt, gt, [1, 2]) == 0.0
    assert background_shift_rate([np.zeros((2, 2), int)], gt, [1, 2]) == 1.0
    pred = [np.array([0, 1, 0, 2])]
    assert background_shift_rate(pred, [np.array([1, 1, 2, 2])], [1, 2]) == 0.5
