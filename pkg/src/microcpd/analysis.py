"""Per-structure accuracy versus amino-acid composition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .structure import AMINO_ACIDS, ONE_LETTER

log = logging.getLogger(__name__)

GROUPS = ("negative", "positive", "neutral")
_CF_MAX_ITER = 500
_CF_EPS = 1e-15
_CF_TINY = 1e-300


@dataclass
class StructureResult:
    structure_id: str
    true: np.ndarray
    predicted: np.ndarray
    accuracy: float
    content: np.ndarray  # 20 fractions from the true labels


def per_structure_accuracy(groups: Mapping[str, tuple]) -> list:
    """``groups`` maps structure id -> (true labels, predicted labels). Empty structures are dropped."""
    out = []
    for sid in sorted(groups):
        true, pred = (np.asarray(a, dtype=np.int64) for a in groups[sid])
        if true.shape != pred.shape:
            raise ValueError(f"{sid}: {len(true)} true labels but {len(pred)} predictions")
        if not len(true):
            log.warning("structure %s has no sites; excluded", sid)
            continue
        content = np.bincount(true, minlength=20) / len(true)
        out.append(StructureResult(sid, true, pred, float(np.mean(true == pred)), content))
    return out


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r needs two 1-D sequences of equal length")
    if len(x) < 3:
        raise ValueError("pearson_r needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson_r is undefined for a zero-variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        for num in (m * (b - m) * x / ((qam + m2) * (a + m2)), -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))):
            d = 1.0 + num * d
            d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
            c = 1.0 + num / c
            c = c if abs(c) > _CF_TINY else _CF_TINY
            delta = d * c
            h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    return _incomplete_beta(a, b, x, 1.0 - x)


def _incomplete_beta(a: float, b: float, x: float, y: float) -> float:
    # y = 1 - x, passed separately so callers can supply it without cancellation
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(y)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_continued_fraction(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_continued_fraction(b, a, y) / b


def student_t_two_tailed(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return _incomplete_beta(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


@dataclass(frozen=True)
class Significance:
    p: float
    boundary: bool


def significance_test(r: float, n: int) -> Significance:
    """Two-tailed test of zero correlation via t = r sqrt((n-2)/(1-r^2)) on n-2 df."""
    if n < 3:
        raise ValueError("significance needs n >= 3")
    if not -1.0 <= r <= 1.0:
        raise ValueError(f"r must lie in [-1, 1], got {r}")
    if abs(r) == 1.0:
        return Significance(0.0, True)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return Significance(student_t_two_tailed(t, n - 2), False)


def significance_p(r: float, n: int) -> float:
    return significance_test(r, n).p


def classify_amino_acids(r, p, alpha: float = 0.01) -> list:
    """'positive' / 'negative' / 'neutral' per class, in canonical class order."""
    r, p = np.asarray(r, dtype=float), np.asarray(p, dtype=float)
    if r.shape != (20,) or p.shape != (20,):
        raise ValueError("r and p must each hold 20 values in class order")
    out = []
    for ri, pi in zip(r, p):
        if pi < alpha and ri < 0:
            out.append("negative")
        elif pi < alpha and ri > 0:
            out.append("positive")
        else:
            out.append("neutral")
    return out


def partition_letters(classes: list) -> dict:
    return {g: {ONE_LETTER[i] for i, c in enumerate(classes) if c == g} for g in GROUPS}


@dataclass
class GroupCorrelation:
    group: str
    r: float
    p: float
    skipped: bool
    content: np.ndarray
    accuracy: np.ndarray


def group_contents(structures: list, classes: list) -> dict:
    mask = {g: np.array([c == g for c in classes]) for g in GROUPS}
    content = np.array([s.content for s in structures]).reshape(len(structures), 20)
    return {g: content[:, mask[g]].sum(axis=1) for g in GROUPS}


def grouped_content_correlation(structures: list, classes: list) -> dict:
    """Per group: Pearson r of summed group content against structure accuracy.

    A group whose content has zero variance (for instance an empty group) is
    skipped and flagged rather than raising.
    """
    acc = np.array([s.accuracy for s in structures])
    out = {}
    for g, content in group_contents(structures, classes).items():
        try:
            r = pearson_r(content, acc)
            sig = significance_test(r, len(acc))
            out[g] = GroupCorrelation(g, r, sig.p, False, content, acc)
        except ValueError as exc:
            log.warning("group %s skipped: %s", g, exc)
            out[g] = GroupCorrelation(g, math.nan, math.nan, True, content, acc)
    return out


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    best: tuple  # (structure id, accuracy)
    worst: tuple


def accuracy_histogram(structures: list, bin_width: float = 0.01) -> Histogram:
    if not structures:
        raise ValueError("accuracy_histogram needs at least one structure")
    n_bins = int(round(1.0 / bin_width))
    acc = np.array([s.accuracy for s in structures])
    idx = np.clip(np.floor(np.round(acc / bin_width, 9)).astype(int), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    order = sorted(range(len(structures)), key=lambda i: (acc[i], structures[i].structure_id))
    lo, hi = structures[order[0]], structures[order[-1]]
    return Histogram(np.arange(n_bins + 1) * bin_width, counts, (hi.structure_id, hi.accuracy), (lo.structure_id, lo.accuracy))


@dataclass
class CorrelationReport:
    r: np.ndarray
    p: np.ndarray
    undefined: np.ndarray
    classes: list
    groups: dict
    n_structures: int
    alpha: float = 0.01
    histogram: Optional[Histogram] = field(default=None)

    def to_dict(self) -> dict:
        def num(v):
            return None if math.isnan(v) else float(v)

        return {
            "n_structures": self.n_structures,
            "alpha": self.alpha,
            "amino_acids": {
                name: {"r": num(self.r[i]), "p": num(self.p[i]), "class": self.classes[i], "undefined": bool(self.undefined[i])}
                for i, name in enumerate(AMINO_ACIDS)
            },
            "partition": {g: sorted(v) for g, v in partition_letters(self.classes).items()},
            "groups": {g: {"r": num(c.r), "p": num(c.p), "skipped": c.skipped} for g, c in self.groups.items()},
            "best": list(self.histogram.best) if self.histogram else None,
            "worst": list(self.histogram.worst) if self.histogram else None,
        }


def correlation_report(structures: list, alpha: float = 0.01, bin_width: float = 0.01) -> CorrelationReport:
    """Content-versus-accuracy correlation per amino acid, the resulting partition and group correlations.

    Amino acids with zero content variance get undefined r and p and fall in the neutral group.
    """
    if len(structures) < 3:
        raise ValueError("correlation analysis needs at least 3 structures")
    acc = np.array([s.accuracy for s in structures])
    content = np.array([s.content for s in structures])
    r = np.full(20, math.nan)
    p = np.full(20, math.nan)
    undefined = np.zeros(20, dtype=bool)
    for i in range(20):
        try:
            r[i] = pearson_r(content[:, i], acc)
            p[i] = significance_p(r[i], len(acc))
        except ValueError:
            undefined[i] = True
    classes = classify_amino_acids(np.nan_to_num(r), np.where(undefined, 1.0, p), alpha)
    groups = grouped_content_correlation(structures, classes)
    return CorrelationReport(r, p, undefined, classes, groups, len(structures), alpha,
                             accuracy_histogram(structures, bin_width))


def structures_from_rows(rows: Iterable[tuple]) -> list:
    """Rows of (structure id, true class, predicted class) grouped per structure."""
    grouped = {}
    for sid, true, pred in rows:
        t, q = grouped.setdefault(sid, ([], []))
        t.append(int(true))
        q.append(int(pred))
    return per_structure_accuracy(grouped)
