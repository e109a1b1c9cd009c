import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microcpd.metrics import (
    accuracy,
    confusion_from_predictions,
    confusion_matrix,
    evaluate_probabilities,
    per_class_metrics,
    ranked_classes,
    topk_accuracy,
    topk_curve,
)


def tally(true, pred, c):
    """Per-sample brute force for one class."""
    tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
    fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
    fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
    return tp, fp, fn


def sort_and_check(row, label, k):
    order = sorted(range(20), key=lambda c: (-row[c], c))
    return label in order[:k]


# -- accuracy -------------------------------------------------------------


def test_diagonal_matrix_is_perfect():
    assert accuracy(np.diag(np.arange(1, 21))) == 1.0


def test_zero_diagonal_is_zero():
    m = np.ones((20, 20), dtype=int) - np.eye(20, dtype=int)
    assert accuracy(m) == 0.0


def test_empty_matrix_raises():
    with pytest.raises(ValueError):
        accuracy(np.zeros((20, 20), dtype=int))


def test_random_counts_trace_over_total(rng):
    for _ in range(50):
        m = rng.integers(0, 30, (20, 20))
        assert accuracy(m) == np.trace(m) / m.sum()


# -- per-class ------------------------------------------------------------


def test_hand_evaluated_class():
    m = np.zeros((20, 20), dtype=int)
    m[0, 0] = 3  # TP
    m[1, 0] = 1  # FP for class 0
    m[0, 2] = 2  # FN for class 0
    pc = per_class_metrics(m)
    assert pc.recall[0] == pytest.approx(0.6)
    assert pc.precision[0] == pytest.approx(0.75)
    assert pc.f1[0] == pytest.approx(2 * 3 / (6 + 1 + 2))


def test_absent_class_is_zero_and_flagged():
    m = np.zeros((20, 20), dtype=int)
    m[0, 0] = 5
    pc = per_class_metrics(m)
    assert pc.recall[7] == pc.precision[7] == pc.f1[7] == 0.0
    assert pc.undefined_recall[7] and pc.undefined_precision[7] and pc.undefined_f1[7]
    assert not pc.undefined_recall[0]


@given(seed=st.integers(0, 10_000), n=st.integers(1, 1000))
@settings(max_examples=60, deadline=None)
def test_per_class_matches_sample_tally(seed, n):
    rng = np.random.default_rng(seed)
    true, pred = rng.integers(0, 20, n), rng.integers(0, 20, n)
    pc = per_class_metrics(confusion_matrix(true, pred))
    for c in range(20):
        tp, fp, fn = tally(true, pred, c)
        assert pc.recall[c] == (tp / (tp + fn) if tp + fn else 0.0)
        assert pc.precision[c] == (tp / (tp + fp) if tp + fp else 0.0)
        assert pc.f1[c] == (2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)


@given(m=st.lists(st.integers(0, 50), min_size=400, max_size=400))
@settings(max_examples=200, deadline=None)
def test_f1_is_harmonic_mean(m):
    m = np.array(m).reshape(20, 20)
    pc = per_class_metrics(m)
    for c in range(20):
        p, r = pc.precision[c], pc.recall[c]
        if p + r > 0:
            assert pc.f1[c] == pytest.approx(2 * p * r / (p + r), rel=1e-12)


# -- confusion ------------------------------------------------------------


def test_all_correct_is_diagonal(rng):
    labels = rng.integers(0, 20, 200)
    probs = np.eye(20)[labels]
    m = confusion_from_predictions(probs, labels)
    assert np.array_equal(m, np.diag(np.bincount(labels, minlength=20)))


def test_totals_and_row_sums(rng):
    labels = rng.integers(0, 20, 500)
    probs = rng.random((500, 20))
    m = confusion_from_predictions(probs, labels)
    assert m.sum() == 500
    assert np.array_equal(m.sum(axis=1), np.bincount(labels, minlength=20))
    assert np.array_equal(m.sum(axis=0), np.bincount(probs.argmax(axis=1), minlength=20))


def test_out_of_range_label_raises():
    with pytest.raises(ValueError):
        confusion_from_predictions(np.full((1, 20), 0.05), [20])
    with pytest.raises(ValueError):
        confusion_from_predictions(np.full((2, 20), 0.05), [0])


# -- top-k ----------------------------------------------------------------


def test_hand_built_rows_against_sort_oracle():
    probs = np.array([
        [0.5, 0.3, 0.2] + [0.0] * 17,
        [0.1] * 5 + [0.5] + [0.0] * 14,
        np.linspace(0.0, 1.0, 20),
    ])
    labels = np.array([1, 3, 17])
    for k in range(1, 21):
        expected = np.mean([sort_and_check(r, l, k) for r, l in zip(probs, labels)])
        assert topk_accuracy(probs, labels, k) == expected
    assert topk_accuracy(probs, labels, 1) == 0.0
    assert topk_accuracy(probs, labels, 2) == pytest.approx(1 / 3)
    assert topk_accuracy(probs, labels, 3) == pytest.approx(2 / 3)


def test_ties_break_by_lower_index():
    probs = np.full((1, 20), 0.05)
    assert list(ranked_classes(probs)[0]) == list(range(20))
    assert topk_accuracy(probs, [0], 1) == 1.0
    assert topk_accuracy(probs, [1], 1) == 0.0


@pytest.mark.parametrize("k", [0, 21, -1])
def test_k_out_of_range(k):
    with pytest.raises(ValueError):
        topk_accuracy(np.full((1, 20), 0.05), [0], k)


@given(seed=st.integers(0, 10_000), n=st.integers(1, 300))
@settings(max_examples=60, deadline=None)
def test_topk_curve_properties(seed, n):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(20), n)
    if seed % 3 == 0:
        probs = np.round(probs, 1)
    labels = rng.integers(0, 20, n)
    curve = topk_curve(probs, labels)
    assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0
    assert curve[0] == accuracy(confusion_from_predictions(probs, labels))
    for k in (1, 5, 20):
        assert curve[k - 1] == topk_accuracy(probs, labels, k)


def test_report_schema(rng):
    labels = rng.integers(0, 20, 100)
    report = evaluate_probabilities(rng.dirichlet(np.ones(20), 100), labels)
    d = report.to_dict()
    assert set(d) == {"accuracy", "n_samples", "per_class", "topk"}
    assert len(d["per_class"]) == 20 and len(d["topk"]) == 20
    assert all(set(v) == {"recall", "precision", "f1", "undefined"} for v in d["per_class"].values())
    assert d["accuracy"] == d["topk"][0]
