import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pecad.metrics import (
    ClassWeights,
    ConfusionCounts,
    PatientConfusion,
    confusion_from_predictions,
    image_metrics,
    iou,
    mean_iou,
    patient_metrics,
    roc_auc,
    weighted_precision,
    weighted_recall,
)


def brute_weighted(labels, preds):
    """Per-class precision and recall from a plain loop, weighted by class frequency."""
    n = len(labels)
    out_p = out_r = 0.0
    for cls in (0, 1):
        tp = sum(1 for y, p in zip(labels, preds) if y == cls and p == cls)
        called = sum(1 for p in preds if p == cls)
        actual = sum(1 for y in labels if y == cls)
        w = actual / n
        out_p += w * (tp / called if called else 0.0)
        out_r += w * (tp / actual if actual else 0.0)
    return out_p, out_r


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def _both_classes(labels):
    return 0 < sum(labels) < len(labels)


def test_worked_example():
    counts, w = confusion_from_predictions([1, 1, 0, 0, 0], [1, 0, 1, 0, 0])
    assert weighted_precision(counts, w) == 0.6
    assert weighted_recall(counts, w) == 0.6
    assert counts == ConfusionCounts(tp1=1, fp1=1, fn1=1, tp0=2, fp0=1, fn0=1)


def test_weighted_metrics_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 60))
        y = rng.integers(0, 2, n).tolist()
        p = rng.integers(0, 2, n).tolist()
        counts, w = confusion_from_predictions(y, p)
        bp, br = brute_weighted(y, p)
        assert abs(weighted_precision(counts, w) - bp) < 1e-12
        assert abs(weighted_recall(counts, w) - br) < 1e-12


def test_zero_denominators_contribute_zero():
    counts, w = confusion_from_predictions([1, 1, 1], [0, 0, 0])
    assert weighted_precision(counts, w) == 0.0
    assert weighted_recall(counts, w) == 0.0
    counts, w = confusion_from_predictions([0, 0], [0, 0])
    assert weighted_precision(counts, w) == 1.0 and weighted_recall(counts, w) == 1.0
    assert w == ClassWeights(w1=0.0, w0=1.0)


def test_confusion_input_errors():
    with pytest.raises(ValueError):
        confusion_from_predictions([1, 0], [1])
    with pytest.raises(ValueError):
        confusion_from_predictions([], [])
    with pytest.raises(ValueError):
        confusion_from_predictions([2, 0], [1, 0])
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0, 0, 0)


def test_auc_examples():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1], [0, 1])


def test_auc_against_pairwise_with_ties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        if not _both_classes(y.tolist()):
            y[0], y[-1] = 0, 1
        s = rng.integers(0, 6, n) / 5.0  # heavy ties
        assert abs(roc_auc(s, y) - pairwise_auc(s.tolist(), y.tolist())) < 1e-9


def test_auc_monotone_invariance():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(4, 50))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.random(n)
        ref = roc_auc(s, y)
        assert roc_auc(np.exp(3 * s) - 7, y) == ref
        assert roc_auc(s**3, y) == ref


def test_patient_metrics_worked_counts():
    m = patient_metrics(PatientConfusion(tp=9, fn=2, tn=9, fp=1))
    assert m["sensitivity"] == pytest.approx(0.818, abs=1e-3)
    assert m["specificity"] == pytest.approx(0.9, abs=1e-3)
    assert m["ppv"] == pytest.approx(0.9)
    assert m["npv"] == pytest.approx(9 / 11)
    assert patient_metrics(PatientConfusion()) == {"sensitivity": 0.0, "specificity": 0.0, "ppv": 0.0, "npv": 0.0}


def test_patient_confusion_from_verdicts():
    pc = PatientConfusion.from_verdicts([True, True, False, False, True], [True, False, True, False, True])
    assert pc == PatientConfusion(tp=2, fp=1, tn=1, fn=1)
    with pytest.raises(ValueError):
        PatientConfusion.from_verdicts([True], [])


def test_iou_cases():
    a = np.zeros((4, 4), np.uint8)
    b = a.copy()
    assert iou(a, b) == 1.0
    a[0, :2] = 1
    assert iou(a, b) == 0.0
    b[0, 1:3] = 1
    assert iou(a, b) == pytest.approx(1 / 3)
    assert mean_iou([a, a], [b, a]) == pytest.approx((1 / 3 + 1) / 2)
    with pytest.raises(ValueError):
        iou(a, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        mean_iou([], [])
    with pytest.raises(ValueError):
        mean_iou([a], [a, a])


def test_image_metrics_bundle():
    out = image_metrics([1, 0, 1, 0], [0.9, 0.2, 0.4, 0.6])
    assert out["auc"] == 0.75
    assert out["precision"] == pytest.approx(0.5) and out["recall"] == pytest.approx(0.5)
    assert image_metrics([1, 1], [0.7, 0.8])["auc"] is None
    hard = image_metrics([1, 0], [0.1, 0.9], preds=[1, 0])
    assert hard["precision"] == 1.0 and hard["auc"] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_weighted_metrics_in_unit_interval(pairs):
    y, p = zip(*pairs)
    counts, w = confusion_from_predictions(y, p)
    assert 0 <= weighted_precision(counts, w) <= 1 + 1e-12
    assert 0 <= weighted_recall(counts, w) <= 1 + 1e-12
    # recall weighted by class frequency is plain accuracy
    assert weighted_recall(counts, w) == pytest.approx(np.mean(np.array(y) == np.array(p)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1)), min_size=2, max_size=25))
def test_auc_symmetry(pairs):
    s, y = map(list, zip(*pairs))
    if not _both_classes(y):
        return
    flipped = [1 - v for v in y]
    assert roc_auc(s, y) + roc_auc(s, flipped) == pytest.approx(1.0, abs=1e-12)
