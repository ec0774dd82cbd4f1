"""Flat and hierarchical evaluation measures."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np

from .taxonomy import Taxonomy


def _pair(true, pred):
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"{true.size} true labels but {pred.size} predictions")
    if true.size == 0:
        raise ValueError("no examples")
    return true, pred


def confusion_counts(true, pred, classes) -> dict[int, tuple[int, int, int]]:
    """Per-class ``(TP, FP, FN)``."""
    true, pred = _pair(true, pred)
    classes = np.asarray([int(c) for c in classes], dtype=np.int64)
    order = np.argsort(classes, kind="stable")
    ranked = classes[order]

    def counts(labels):
        pos = np.searchsorted(ranked, labels)
        pos = np.minimum(pos, max(len(ranked) - 1, 0))
        hit = ranked[pos] == labels if len(ranked) else np.zeros(labels.size, bool)
        return np.bincount(pos[hit], minlength=len(ranked))

    n_true, n_pred = counts(true), counts(pred)
    n_tp = counts(true[true == pred])
    return {int(ranked[i]): (int(n_tp[i]), int(n_pred[i] - n_tp[i]), int(n_true[i] - n_tp[i]))
            for i in np.argsort(order, kind="stable")}


def _f1(tp, fp, fn) -> float:
    # 2PR/(P+R) written over counts: one rounding instead of several
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def micro_f1(true, pred, classes=None) -> float:
    """F1 from true/false positives pooled over ``classes`` (default: labels seen)."""
    true, pred = _pair(true, pred)
    if classes is None:
        classes = np.union1d(true, pred)
    counts = confusion_counts(true, pred, classes).values()
    tp, fp, fn = (sum(c[i] for c in counts) for i in range(3))
    return _f1(tp, fp, fn)


def per_class_prf(true, pred, classes) -> dict[int, tuple[float, float, float]]:
    out = {}
    for c, (tp, fp, fn) in confusion_counts(true, pred, classes).items():
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        out[c] = (p, r, _f1(tp, fp, fn))
    return out


def macro_f1(true, pred, classes) -> float:
    """Unweighted mean of per-class F1 over ``classes``.

    Every class counts, including those absent from both ``true`` and ``pred``
    (they contribute zero).
    """
    classes = list(classes)
    if not classes:
        raise ValueError("no classes")
    # Exact rational mean, correctly rounded once. Numerators are grouped by
    # denominator so the number of Fraction additions stays small.
    by_den: dict[int, int] = defaultdict(int)
    for tp, fp, fn in confusion_counts(true, pred, classes).values():
        if tp:
            by_den[2 * tp + fp + fn] += 2 * tp
    total = sum((Fraction(num, den) for den, num in by_den.items()), Fraction(0))
    return float(total / len(classes))


def _check_labels(tax: Taxonomy, labels):
    missing = sorted(set(np.unique(labels).tolist()) - set(tax.level_of))
    if missing:
        raise ValueError(f"labels {missing} not in taxonomy")


def hier_prf(true, pred, tax: Taxonomy) -> tuple[float, float, float]:
    """Hierarchical precision, recall and F1 over root-excluded ancestor sets."""
    true, pred = _pair(true, pred)
    _check_labels(tax, np.concatenate([true, pred]))
    anc = {}
    overlap = n_pred = n_true = 0
    for t, p in zip(true.tolist(), pred.tolist()):
        a_t = anc.get(t) or anc.setdefault(t, tax.ancestors(t))
        a_p = anc.get(p) or anc.setdefault(p, tax.ancestors(p))
        overlap += len(a_t & a_p)
        n_pred += len(a_p)
        n_true += len(a_t)
    hp = overlap / n_pred if n_pred else 0.0
    hr = overlap / n_true if n_true else 0.0
    hf = 2 * overlap / (n_pred + n_true) if overlap else 0.0
    return hp, hr, hf


def hier_f1(true, pred, tax: Taxonomy) -> float:
    return hier_prf(true, pred, tax)[2]


def tree_error(true, pred, tax: Taxonomy) -> float:
    """Mean tree-path distance between predicted and true labels."""
    true, pred = _pair(true, pred)
    _check_labels(tax, np.concatenate([true, pred]))
    return float(np.mean([tax.distance(p, t) for t, p in zip(true.tolist(), pred.tolist())]))


class LevelError(NamedTuple):
    level: int
    error: float
    cum_misclassified: int
    unconditional: float


def levelwise_error(true, pred_paths: Sequence[Sequence[int]], tax: Taxonomy
                    ) -> list[LevelError]:
    """First-error attribution of top-down mistakes to levels.

    An example is first misclassified at level ``k`` when its decision at
    ``k`` leaves the true label's path while every shallower decision was on
    it. ``error`` is that count divided by the examples still on track when
    entering ``k``; ``unconditional`` divides by all examples instead.
    """
    true = np.asarray(true, dtype=np.int64).ravel()
    if len(pred_paths) != true.size:
        raise ValueError(f"{true.size} true labels but {len(pred_paths)} paths")
    if true.size == 0:
        raise ValueError("no examples")
    _check_labels(tax, true)
    depth = tax.depth
    first = np.zeros(depth + 1, dtype=np.int64)
    entering = np.zeros(depth + 1, dtype=np.int64)
    for t, path in zip(true.tolist(), pred_paths):
        path = tuple(int(v) for v in path)
        if not path or path[0] != tax.root:
            raise ValueError(f"path {path} does not start at the root {tax.root}")
        truth = tax.path(t)
        for k in range(1, depth + 1):
            if k >= len(truth) or k >= len(path):
                break
            entering[k] += 1
            if path[k] != truth[k]:
                first[k] += 1
                break
    n = true.size
    out = []
    cum = 0
    for k in range(1, depth + 1):
        cum += int(first[k])
        err = first[k] / entering[k] if entering[k] else 0.0
        out.append(LevelError(k, float(err), cum, float(first[k] / n)))
    return out


@dataclass
class EvaluationReport:
    micro_f1: float
    macro_f1: float
    hp: float
    hr: float
    hf1: float
    te: float
    per_class: dict = field(default_factory=dict)
    levelwise: list = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("micro_f1", "macro_f1", "hf1", "hp", "hr", "te")}


def evaluate(true, pred, tax: Taxonomy, pred_paths=None, path_taxonomy=None
             ) -> EvaluationReport:
    """All measures at once; ``tax`` is the hierarchy used for hF1 and TE.

    ``pred_paths`` (top-down decision traces) enable the level-wise table,
    computed in ``path_taxonomy`` (default ``tax``), the hierarchy the paths
    were produced in.
    """
    leaves = sorted(tax.leaves)
    hp, hr, hf = hier_prf(true, pred, tax)
    levelwise = []
    if pred_paths is not None:
        levelwise = levelwise_error(true, pred_paths, path_taxonomy or tax)
    return EvaluationReport(
        micro_f1=micro_f1(true, pred, leaves),
        macro_f1=macro_f1(true, pred, leaves),
        hp=hp, hr=hr, hf1=hf,
        te=tree_error(true, pred, tax),
        per_class=per_class_prf(true, pred, leaves),
        levelwise=levelwise,
    )
