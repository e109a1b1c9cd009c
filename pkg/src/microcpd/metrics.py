"""Classification metrics over the 20 residue classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .structure import AMINO_ACIDS

N_CLASSES = 20


def _check_labels(labels, n_classes=N_CLASSES):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def _check_probabilities(probabilities, labels):
    probs = np.asarray(probabilities, dtype=float)
    if probs.ndim != 2 or probs.shape[1] != N_CLASSES:
        raise ValueError(f"probabilities must have shape (n, {N_CLASSES}), got {probs.shape}")
    if probs.shape[0] != len(labels):
        raise ValueError(f"{probs.shape[0]} probability rows for {len(labels)} labels")
    return probs


def confusion_matrix(true, predicted, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    true, predicted = _check_labels(true, n_classes), _check_labels(predicted, n_classes)
    if true.shape != predicted.shape:
        raise ValueError("true and predicted labels differ in length")
    flat = np.bincount(true * n_classes + predicted, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes)


def confusion_from_predictions(probabilities, labels) -> np.ndarray:
    labels = _check_labels(labels)
    probs = _check_probabilities(probabilities, labels)
    return confusion_matrix(labels, probs.argmax(axis=1))


def accuracy(confusion) -> float:
    m = np.asarray(confusion)
    total = m.sum()
    if m.ndim != 2 or m.shape[0] != m.shape[1] or total <= 0:
        raise ValueError("accuracy needs a nonempty square confusion matrix")
    return float(np.trace(m) / total)


@dataclass
class ClassMetrics:
    recall: np.ndarray
    precision: np.ndarray
    f1: np.ndarray
    undefined_recall: np.ndarray = field(default=None)
    undefined_precision: np.ndarray = field(default=None)
    undefined_f1: np.ndarray = field(default=None)


def per_class_metrics(confusion) -> ClassMetrics:
    """Recall, precision and F1 per class. Zero denominators give 0 and set the matching flag."""
    m = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(m).astype(float)
    fn = m.sum(axis=1) - tp
    fp = m.sum(axis=0) - tp

    def ratio(num, den):
        undefined = den == 0
        out = np.divide(num, den, out=np.zeros_like(num), where=~undefined)
        return out, undefined

    recall, u_r = ratio(tp, tp + fn)
    precision, u_p = ratio(tp, tp + fp)
    f1, u_f = ratio(2 * tp, 2 * tp + fp + fn)
    return ClassMetrics(recall, precision, f1, u_r, u_p, u_f)


def ranked_classes(probabilities) -> np.ndarray:
    """Class indices by decreasing probability; ties keep the lower class index first."""
    probs = np.asarray(probabilities, dtype=float)
    return np.argsort(-probs, axis=1, kind="stable")


def topk_accuracy(probabilities, labels, k: int) -> float:
    if not 1 <= k <= N_CLASSES:
        raise ValueError(f"k must lie in [1, {N_CLASSES}], got {k}")
    labels = _check_labels(labels)
    probs = _check_probabilities(probabilities, labels)
    if not len(labels):
        raise ValueError("topk_accuracy on an empty set")
    top = ranked_classes(probs)[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean())


def topk_curve(probabilities, labels) -> np.ndarray:
    labels = _check_labels(labels)
    probs = _check_probabilities(probabilities, labels)
    ranks = np.argmax(ranked_classes(probs) == labels[:, None], axis=1)
    hits = np.bincount(ranks, minlength=N_CLASSES).cumsum()
    return hits / len(labels)


@dataclass
class MetricsReport:
    accuracy: float
    per_class: ClassMetrics
    topk: np.ndarray
    confusion: np.ndarray

    def check_invariants(self):
        assert abs(self.topk[0] - self.accuracy) < 1e-12, "top-1 differs from accuracy"
        assert np.all(np.diff(self.topk) >= 0), "top-k curve decreases"
        assert self.topk[-1] == 1.0, "top-20 is not 1"

    def to_dict(self) -> dict:
        pc = self.per_class
        return {
            "accuracy": self.accuracy,
            "n_samples": int(self.confusion.sum()),
            "per_class": {
                name: {
                    "recall": float(pc.recall[i]),
                    "precision": float(pc.precision[i]),
                    "f1": float(pc.f1[i]),
                    "undefined": bool(pc.undefined_recall[i] or pc.undefined_precision[i] or pc.undefined_f1[i]),
                }
                for i, name in enumerate(AMINO_ACIDS)
            },
            "topk": [float(v) for v in self.topk],
        }


def evaluate_probabilities(probabilities, labels) -> MetricsReport:
    """Full report; the top-k invariants are asserted on every call."""
    labels = _check_labels(labels)
    conf = confusion_from_predictions(probabilities, labels)
    report = MetricsReport(accuracy(conf), per_class_metrics(conf), topk_curve(probabilities, labels), conf)
    report.check_invariants()
    return report
