"""Distillation objectives over teacher/student block taps.

* attention style: squared Gram-matrix distance of attention scores,
* dual attention: student self-attention output and student-query
  cross-attention into the teacher, both matched to the teacher output,
* final representation: MSE between end token sequences.

Per-block terms are summed over blocks.  Each loss has a companion
``*_grad`` returning gradients with respect to the student quantities, in
the ``tap_grads`` format understood by :func:`attention.encoder_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import BlockTaps, attention_backward, attention_scores
from .exceptions import DimensionError, RangeError, StructuralError
from .tensor import as_tensor, mse, mse_grad

ASP_NORMS = ("mean_sq", "fro")


@dataclass(frozen=True)
class FastWeights:
    alpha: float = 2.0
    beta: float = 5.0
    gamma: float = 22.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0 or max(w) <= 0:
            raise RangeError("weights must be >= 0 with at least one positive")


def gram(scores) -> np.ndarray:
    """``A A^T`` (batched over leading axes)."""
    A = as_tensor(scores)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"gram expects square scores, got {A.shape}")
    return A @ np.swapaxes(A, -1, -2)


def _pair(taps_t, taps_s):
    if len(taps_t) != len(taps_s):
        raise StructuralError(f"{len(taps_t)} teacher taps vs {len(taps_s)} student taps")
    for t, s in zip(taps_t, taps_s):
        if t.scores.shape != s.scores.shape or t.q.shape != s.q.shape or t.block_kind != s.block_kind:
            raise StructuralError(f"tap mismatch at block {t.block_index}")
    return zip(taps_t, taps_s)


def _asp_block(G_t, A_s, norm):
    D = G_t - gram(A_s)
    if norm == "mean_sq":
        return float(np.mean(D * D)), -2.0 * D / D.size
    # plain Frobenius, one norm per group, summed over groups
    n = np.sqrt(np.sum(D * D, axis=(-2, -1), keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return float(np.sum(n)), np.where(n > 0, -D / safe, 0.0)


def loss_asp(taps_t, taps_s, norm: str = "mean_sq") -> float:
    if norm not in ASP_NORMS:
        raise ValueError(f"norm must be one of {ASP_NORMS}")
    return sum(_asp_block(gram(t.scores), s.scores, norm)[0] for t, s in _pair(taps_t, taps_s))


def loss_asp_grad(taps_t, taps_s, norm: str = "mean_sq") -> dict:
    out = {}
    for t, s in _pair(taps_t, taps_s):
        _, dG = _asp_block(gram(t.scores), s.scores, norm)
        out[s.block_index] = {"scores": (dG + np.swapaxes(dG, -1, -2)) @ s.scores}
    return out


def _cross(t: BlockTaps, s: BlockTaps):
    A_c = attention_scores(s.q, t.k, t.causal)
    return A_c, A_c @ t.v


def loss_daf(taps_t, taps_s) -> float:
    total = 0.0
    for t, s in _pair(taps_t, taps_s):
        _, ca = _cross(t, s)
        total += mse(t.out, s.out) + mse(t.out, ca)
    return total


def loss_daf_grad(taps_t, taps_s) -> dict:
    out = {}
    for t, s in _pair(taps_t, taps_s):
        A_c, ca = _cross(t, s)
        dq, _, _ = attention_backward(s.q, t.k, t.v, A_c, mse_grad(t.out, ca))
        out[s.block_index] = {"out": mse_grad(t.out, s.out), "q": dq}
    return out


def loss_block_features(taps_t, taps_s) -> float:
    """Sum over blocks of attention-output MSE (plain feature-level KD)."""
    return sum(mse(t.out, s.out) for t, s in _pair(taps_t, taps_s))


def loss_block_features_grad(taps_t, taps_s) -> dict:
    return {s.block_index: {"out": mse_grad(t.out, s.out)} for t, s in _pair(taps_t, taps_s)}


def loss_fr(feat_t, feat_s) -> float:
    return mse(feat_t, feat_s)


def loss_fr_grad(feat_t, feat_s) -> np.ndarray:
    return mse_grad(feat_t, feat_s)


def loss_total(taps_t, taps_s, feat_t, feat_s, w: FastWeights = FastWeights(),
               asp_norm: str = "mean_sq"):
    """``(total, (asp, daf, fr))`` for the weighted combination."""
    a = loss_asp(taps_t, taps_s, asp_norm)
    b = loss_daf(taps_t, taps_s)
    c = loss_fr(feat_t, feat_s)
    return w.alpha * a + w.beta * b + w.gamma * c, (a, b, c)


def merge_tap_grads(*weighted) -> dict:
    """Combine ``(weight, tap_grads)`` pairs into one ``tap_grads`` dict."""
    out: dict = {}
    for weight, grads in weighted:
        if weight == 0:
            continue
        for idx, entry in grads.items():
            slot = out.setdefault(idx, {})
            for key, g in entry.items():
                slot[key] = slot[key] + weight * g if key in slot else weight * g
    return out
