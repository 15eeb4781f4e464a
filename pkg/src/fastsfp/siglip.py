"""Pairwise sigmoid contrastive alignment of visual and text embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sfp as sfp_mod
from .exceptions import DimensionError
from .tensor import as_tensor, l2_normalize

NORMALIZATIONS = ("batch", "pairs")


@dataclass
class ContrastiveBatch:
    y_vis: np.ndarray
    y_txt: np.ndarray

    def __post_init__(self):
        self.y_vis = as_tensor(self.y_vis)
        self.y_txt = as_tensor(self.y_txt)
        if self.y_vis.ndim != 2 or self.y_vis.shape != self.y_txt.shape or self.y_vis.shape[0] < 1:
            raise DimensionError(f"mismatched embeddings {self.y_vis.shape} / {self.y_txt.shape}")

    @property
    def B(self) -> int:
        return self.y_vis.shape[0]


def pairwise_logits(batch: ContrastiveBatch) -> np.ndarray:
    """``S[i, j] = <txt_i, vis_j>`` of unit-normalized rows."""
    return l2_normalize(batch.y_txt, axis=1) @ l2_normalize(batch.y_vis, axis=1).T


def _targets(B: int) -> np.ndarray:
    return 2.0 * np.eye(B) - 1.0


def _check_square(S) -> np.ndarray:
    S = as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"logit matrix must be square, got {S.shape}")
    return S


def siglip_loss(S, normalization: str = "batch") -> float:
    """``-(1/B) sum_ij log sigmoid(T_ij S_ij)`` with T = +1 on the diagonal, -1 off it.

    ``normalization="pairs"`` divides by ``B**2`` instead.
    """
    S = _check_square(S)
    B = S.shape[0]
    z = _targets(B) * S
    scale = B if normalization == "batch" else B * B
    # -log sigmoid(z) = log(1 + exp(-z))
    return float(np.sum(np.logaddexp(0.0, -z)) / scale)


def siglip_loss_grad(S, normalization: str = "batch") -> np.ndarray:
    S = _check_square(S)
    B = S.shape[0]
    Tm = _targets(B)
    scale = B if normalization == "batch" else B * B
    # d/dz softplus(-z) = -sigmoid(-z)
    sig_neg = 0.5 * (1.0 - np.tanh(0.5 * Tm * S))
    return -Tm * sig_neg / scale


def normalize_backward(y: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Row-wise backward of ``y / ||y||``."""
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    u = y / norms
    return (d_unit - u * np.sum(u * d_unit, axis=1, keepdims=True)) / norms


def logits_backward(batch: ContrastiveBatch, dS: np.ndarray):
    """Gradients on ``(y_vis, y_txt)`` given ``dS``."""
    vis_u = l2_normalize(batch.y_vis, axis=1)
    txt_u = l2_normalize(batch.y_txt, axis=1)
    d_txt = normalize_backward(batch.y_txt, dS @ vis_u)
    d_vis = normalize_backward(batch.y_vis, dS.T @ txt_u)
    return d_vis, d_txt


def align_step(vis_features, txt_features, layer: sfp_mod.SfpLayer, txt_proj,
               normalization: str = "batch"):
    """Loss and gradients for one contrastive batch.

    ``txt_proj`` has shape ``(out_dim, txt_dim)``.  Returns ``(loss, grads)``
    with keys ``cores_L``, ``cores_R``, ``txt_proj`` (and ``bias`` when the
    layer has one).
    """
    txt_features = as_tensor(txt_features)
    txt_proj = as_tensor(txt_proj)
    if txt_proj.shape != (layer.config.out_dim, txt_features.shape[1]):
        raise DimensionError(f"txt_proj shape {txt_proj.shape} incompatible")
    y_vis = sfp_mod.sfp_forward_batched(layer, vis_features)
    y_txt = txt_features @ txt_proj.T
    batch = ContrastiveBatch(y_vis, y_txt)
    S = pairwise_logits(batch)
    loss = siglip_loss(S, normalization)
    d_vis, d_txt = logits_backward(batch, siglip_loss_grad(S, normalization))
    dL, dR, _, dbias = sfp_mod.sfp_backward_batched(layer, vis_features, d_vis)
    grads = {"cores_L": dL, "cores_R": dR, "txt_proj": d_txt.T @ txt_features}
    if dbias is not None:
        grads["bias"] = dbias
    return loss, grads
