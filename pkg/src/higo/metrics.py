"""Binary fire metrics: macro F1 over {fire, no-fire} and average precision."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

__all__ = ["EvalRecord", "macro_f1", "f1_fire", "f1_scores", "auprc", "threshold_predictions",
           "to_binary", "write_metrics_csv", "read_metrics_csv"]


@dataclass(frozen=True)
class EvalRecord:
    score: float
    label: int
    cell: int = -1
    time: int = -1

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def to_binary(classes) -> np.ndarray:
    """Collapse severity classes to fire (any class >= 1) / no fire."""
    return (np.asarray(classes) >= 1).astype(np.int8)


def _f1(tp: int, fp: int, fn: int) -> Fraction:
    if tp == 0 and fp == 0 and fn == 0:
        return Fraction(1)     # class absent from both predictions and labels
    return Fraction(2 * tp, 2 * tp + fp + fn)


def _f1_pair(pred, labels) -> tuple[Fraction, Fraction]:
    pred = np.asarray(pred).astype(bool).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if pred.shape != labels.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {labels.shape}")
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = pred.size - tp - fp - fn
    return _f1(tp, fp, fn), _f1(tn, fn, fp)


def f1_scores(pred, labels) -> tuple[float, float]:
    """(F1 of the fire class, F1 of the no-fire class)."""
    fire, nofire = _f1_pair(pred, labels)
    return float(fire), float(nofire)


def macro_f1(pred, labels) -> float:
    # rational arithmetic on counts, so the result is the correctly rounded mean
    fire, nofire = _f1_pair(pred, labels)
    return float((fire + nofire) / 2)


def f1_fire(pred, labels) -> float:
    return float(_f1_pair(pred, labels)[0])


def auprc(scores, labels=None, exact: bool = False):
    """Average precision, sum_n (R_n - R_{n-1}) P_n over the descending-score ranking.

    Accepts either a list of ``EvalRecord`` or parallel score/label arrays.
    Ties keep their original order. Returns None when there are no positives.
    ``exact=True`` returns a ``Fraction`` (slow on long rankings).
    """
    if labels is None:
        recs = list(scores)
        s = np.array([r.score for r in recs], dtype=np.float64)
        y = np.array([r.label for r in recs], dtype=np.int64)
    else:
        s = np.asarray(scores, dtype=np.float64).ravel()
        y = np.asarray(labels).astype(np.int64).ravel()
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    # each positive adds 1/n_pos recall at precision tp/rank
    if exact:
        pos = np.flatnonzero(hits == 1)
        return sum((Fraction(int(tp[i]), int(i) + 1) for i in pos), Fraction(0)) / n_pos
    return float(np.sum(tp[hits == 1] / ranks[hits == 1]) / n_pos)


def threshold_predictions(scores, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(scores) >= threshold).astype(np.int8)


def write_metrics_csv(path, rows) -> None:
    """rows: iterable of (horizon, metric, value); None values are written empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon", "metric", "value"])
        for h, m, v in rows:
            w.writerow([h, m, "" if v is None else repr(float(v))])


def read_metrics_csv(path) -> list[tuple[str, str, float | None]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(h, m, float(v) if v else None) for h, m, v in r]
