"""Binary classification metrics and contrasting-prompt inference."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import DimensionError, UndefinedMetricError
from .tensor import as_tensor, l2_normalize


@dataclass(frozen=True)
class EvalRecord:
    score: float
    label: bool


def unzip_records(records) -> tuple[np.ndarray, np.ndarray]:
    """``(y_true, y_score)`` arrays from a sequence of :class:`EvalRecord`."""
    y_true = np.array([bool(r.label) for r in records], dtype=bool)
    y_score = np.array([float(r.score) for r in records], dtype=np.float64)
    return y_true, y_score


def _binary_inputs(y_true, y_score):
    y_true = np.asarray(y_true).astype(bool).ravel()
    y_score = as_tensor(y_score).ravel()
    if y_true.shape != y_score.shape:
        raise DimensionError("y_true and y_score lengths differ")
    if not np.all(np.isfinite(y_score)):
        raise ValueError("scores must be finite")
    n_pos = int(y_true.sum())
    if n_pos == 0 or n_pos == y_true.size:
        raise UndefinedMetricError("both classes must be present")
    return y_true, y_score, n_pos, y_true.size - n_pos


def auroc(y_true, y_score) -> float:
    """P(score_pos > score_neg) with ties counted as one half (Mann-Whitney)."""
    y_true, y_score, n_pos, n_neg = _binary_inputs(y_true, y_score)
    ranks = rankdata(y_score)
    u = ranks[y_true].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pred_inputs(preds, labels):
    preds = np.asarray(preds).astype(bool).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if preds.shape != labels.shape:
        raise DimensionError("preds and labels lengths differ")
    if preds.size == 0:
        raise DimensionError("empty input")
    return preds, labels


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def weighted_f1(preds, labels) -> float:
    """Support-weighted mean of the per-class F1 over classes {0, 1}.

    A class with an undefined F1 (no support and no predictions) scores 0.
    """
    preds, labels = _pred_inputs(preds, labels)
    n = labels.size
    total = 0.0
    for cls in (False, True):
        p, t = preds == cls, labels == cls
        tp = int(np.sum(p & t))
        total += (int(t.sum()) / n) * _f1(tp, int(np.sum(p & ~t)), int(np.sum(~p & t)))
    return total


def macro_weighted_f1(per_task) -> float:
    """Unweighted mean of per-task weighted F1 values."""
    vals = [float(v) for v in per_task]
    if not vals:
        raise DimensionError("need at least one task")
    return float(np.mean(vals))


def accuracy(preds, labels) -> float:
    preds, labels = _pred_inputs(preds, labels)
    return float(np.mean(preds == labels))


def threshold_candidates(y_score) -> np.ndarray:
    """``-inf``, midpoints of adjacent distinct sorted scores, ``+inf``."""
    s = np.unique(as_tensor(y_score))
    mids = (s[:-1] + s[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def youden_threshold(y_true, y_score, return_j: bool = False):
    """Threshold maximizing ``TPR - FPR`` for the rule ``score > tau``.

    Ties in J go to the smallest threshold.
    """
    y_true, y_score, n_pos, n_neg = _binary_inputs(y_true, y_score)
    cands = threshold_candidates(y_score)
    # positives/negatives strictly above each candidate, via sorted scores
    pos_sorted = np.sort(y_score[y_true])
    neg_sorted = np.sort(y_score[~y_true])
    tp = n_pos - np.searchsorted(pos_sorted, cands, side="right")
    fp = n_neg - np.searchsorted(neg_sorted, cands, side="right")
    j = tp / n_pos - fp / n_neg
    best = int(np.argmax(j))
    tau = float(cands[best])
    return (tau, float(j[best])) if return_j else tau


def contrastive_predict(v_emb, t_pos, t_neg, tau: float):
    """``(cos(v, t_pos) - cos(v, t_neg), score > tau)``.

    Accepts a single embedding or a ``(n, d)`` stack of visual embeddings.
    """
    v = l2_normalize(v_emb, axis=-1)
    score = v @ l2_normalize(t_pos, axis=-1) - v @ l2_normalize(t_neg, axis=-1)
    if np.ndim(score) == 0:
        return float(score), bool(score > tau)
    return score, score > tau


def report_rows(task_results: list) -> str:
    """CSV text with columns ``task, auroc, weighted_f1, accuracy, tau``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "auroc", "weighted_f1", "accuracy", "tau"])
    for row in task_results:
        w.writerow([row["task"]] + [repr(float(row[k])) for k in ("auroc", "weighted_f1", "accuracy", "tau")])
    return buf.getvalue()
