"""Structured factorized projection: a sum of block-tensor-train blocks.

A dense ``out_dim x in_dim`` projection with ``in_dim = M * out_dim`` is split
into ``M`` square blocks.  Block ``i`` is never materialized; instead it is
the contraction of a left core ``L[i]`` of shape ``(d1, d2, d1, r)`` with a
right core ``R[i]`` of shape ``(r, d1, d2)``, where ``out_dim = d1 * d2``::

    Y_i[p, j] = sum_{q, k, a} L[i, p, j, q, a] * R[i, a, q, k] * X_i[q, k]

evaluated in two stages (``R`` first, then ``L``).  Cores are stored stacked
as arrays of shape ``(M, d1, d2, d1, r)`` and ``(M, r, d1, d2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import container
from .exceptions import DimensionError, NumericError, RangeError
from .tensor import as_tensor

MAGIC = b"SFP1"


def factorize_out_dim(out_dim: int) -> tuple[int, int]:
    """Most balanced factor pair ``(d1, d2)`` with ``d1 <= d2``."""
    if out_dim < 1:
        raise RangeError("out_dim must be >= 1")
    d1 = math.isqrt(out_dim)
    while out_dim % d1:
        d1 -= 1
    return d1, out_dim // d1


@dataclass(frozen=True)
class SfpConfig:
    in_dim: int
    out_dim: int
    d1: int
    d2: int
    M: int
    r: int

    def __post_init__(self):
        for name in ("in_dim", "out_dim", "d1", "d2", "M", "r"):
            if int(getattr(self, name)) < 1:
                raise RangeError(f"{name} must be a positive integer")
        if self.d1 * self.d2 != self.out_dim:
            raise DimensionError(f"d1*d2 = {self.d1 * self.d2} != out_dim = {self.out_dim}")
        if self.M * self.out_dim != self.in_dim:
            raise DimensionError(f"M*out_dim = {self.M * self.out_dim} != in_dim = {self.in_dim}")

    @classmethod
    def from_dims(cls, in_dim: int, out_dim: int, r: int, d1: Optional[int] = None,
                  d2: Optional[int] = None) -> "SfpConfig":
        """Build a config, deriving ``M`` and (if omitted) ``(d1, d2)``."""
        if out_dim < 1 or in_dim < 1:
            raise RangeError("dimensions must be positive")
        if in_dim % out_dim:
            raise DimensionError(f"in_dim {in_dim} is not a multiple of out_dim {out_dim}")
        if d1 is None and d2 is None:
            d1, d2 = factorize_out_dim(out_dim)
        elif d1 is None:
            d1 = out_dim // d2
        elif d2 is None:
            d2 = out_dim // d1
        return cls(in_dim, out_dim, d1, d2, in_dim // out_dim, r)

    @property
    def left_shape(self) -> tuple[int, ...]:
        return (self.M, self.d1, self.d2, self.d1, self.r)

    @property
    def right_shape(self) -> tuple[int, ...]:
        return (self.M, self.r, self.d1, self.d2)


@dataclass
class SfpLayer:
    config: SfpConfig
    cores_L: np.ndarray
    cores_R: np.ndarray
    bias: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.cores_L = as_tensor(self.cores_L)
        self.cores_R = as_tensor(self.cores_R)
        if self.cores_L.shape != self.config.left_shape:
            raise DimensionError(f"left cores {self.cores_L.shape} != {self.config.left_shape}")
        if self.cores_R.shape != self.config.right_shape:
            raise DimensionError(f"right cores {self.cores_R.shape} != {self.config.right_shape}")
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
            if self.bias.shape != (self.config.out_dim,):
                raise DimensionError("bias must have length out_dim")

    @property
    def n_stored(self) -> int:
        """Number of stored core entries (bias excluded)."""
        return int(self.cores_L.size + self.cores_R.size)

    def copy(self) -> "SfpLayer":
        return SfpLayer(self.config, self.cores_L.copy(), self.cores_R.copy(),
                        None if self.bias is None else self.bias.copy())


def init_layer(config: SfpConfig, rng: np.random.Generator, bias: bool = False) -> SfpLayer:
    """Scratch init: i.i.d. uniform in +-1/sqrt(r*d1*d2)."""
    bound = 1.0 / math.sqrt(config.r * config.d1 * config.d2)
    L = rng.uniform(-bound, bound, size=config.left_shape)
    R = rng.uniform(-bound, bound, size=config.right_shape)
    return SfpLayer(config, L, R, np.zeros(config.out_dim) if bias else None)


def zeros_layer(config: SfpConfig) -> SfpLayer:
    return SfpLayer(config, np.zeros(config.left_shape), np.zeros(config.right_shape))


def _chunks(layer: SfpLayer, X: np.ndarray) -> np.ndarray:
    cfg = layer.config
    X = as_tensor(X)
    if X.ndim != 2 or X.shape[1] != cfg.in_dim:
        raise DimensionError(f"expected input of shape (B, {cfg.in_dim}), got {X.shape}")
    return X.reshape(X.shape[0], cfg.M, cfg.d1, cfg.d2)


def _stage_one(layer: SfpLayer, Xr: np.ndarray) -> np.ndarray:
    # Z[b, i, a, q] = sum_k R[i, a, q, k] X[b, i, q, k]
    return np.einsum("iaqk,biqk->biaq", layer.cores_R, Xr)


def _forward_row(layer: SfpLayer, xr: np.ndarray) -> np.ndarray:
    cfg = layer.config
    Z = np.einsum("iaqk,iqk->iaq", layer.cores_R, xr)
    y = np.zeros((cfg.d1, cfg.d2))
    # fixed ascending block order for the accumulation
    for i in range(cfg.M):
        y += np.einsum("pjqa,aq->pj", layer.cores_L[i], Z[i])
    return y.reshape(cfg.out_dim)


def sfp_forward_batched(layer: SfpLayer, X) -> np.ndarray:
    """Apply the layer to every row of ``X`` (shape ``(B, in_dim)``).

    Rows go through the single-vector kernel one at a time so that batched
    and unbatched results are bit-identical.
    """
    Xr = _chunks(layer, X)
    Y = np.empty((Xr.shape[0], layer.config.out_dim))
    for b in range(Xr.shape[0]):
        Y[b] = _forward_row(layer, Xr[b])
    if layer.bias is not None:
        Y = Y + layer.bias
    return Y


def sfp_forward(layer: SfpLayer, x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 1:
        raise DimensionError("sfp_forward expects a 1-D input; use sfp_forward_batched")
    return sfp_forward_batched(layer, x[None, :])[0]


def sfp_backward_batched(layer: SfpLayer, X, dY):
    """Gradients of ``sum(dY * sfp_forward_batched(layer, X))``.

    Returns ``(dL, dR, dX, dbias)``; ``dbias`` is ``None`` for bias-free layers.
    """
    cfg = layer.config
    Xr = _chunks(layer, X)
    dY = as_tensor(dY)
    if dY.shape != (Xr.shape[0], cfg.out_dim):
        raise DimensionError(f"dY shape {dY.shape} != {(Xr.shape[0], cfg.out_dim)}")
    dYr = dY.reshape(-1, cfg.d1, cfg.d2)
    Z = _stage_one(layer, Xr)
    dL = np.einsum("bpj,biaq->ipjqa", dYr, Z)
    dZ = np.einsum("ipjqa,bpj->biaq", layer.cores_L, dYr)
    dR = np.einsum("biaq,biqk->iaqk", dZ, Xr)
    dX = np.einsum("biaq,iaqk->biqk", dZ, layer.cores_R).reshape(-1, cfg.in_dim)
    dbias = dY.sum(axis=0) if layer.bias is not None else None
    return dL, dR, dX, dbias


def sfp_backward(layer: SfpLayer, x, dY):
    """Unbatched gradients ``(dL, dR, dx)`` of ``<dY, sfp_forward(layer, x)>``."""
    x = as_tensor(x)
    dY = as_tensor(dY)
    if x.ndim != 1 or dY.ndim != 1:
        raise DimensionError("sfp_backward expects 1-D x and dY")
    dL, dR, dX, _ = sfp_backward_batched(layer, x[None, :], dY[None, :])
    return dL, dR, dX[0]


def contract_to_dense(layer: SfpLayer) -> np.ndarray:
    """Materialize the implied dense ``out_dim x in_dim`` matrix."""
    cfg = layer.config
    blocks = np.einsum("ipjqa,iaqk->ipjqk", layer.cores_L, layer.cores_R)
    blocks = blocks.reshape(cfg.M, cfg.out_dim, cfg.out_dim)
    return np.concatenate(list(blocks), axis=1) if cfg.M > 1 else blocks[0].copy()


def param_count(config: SfpConfig) -> tuple[int, int]:
    """``(exact, nominal)``: core-shape count and ``round(2 r in_dim sqrt(out_dim))``."""
    c = config
    exact = c.M * c.r * c.d1 * c.d2 * (c.d1 + 1)
    nominal = round(2 * c.r * c.in_dim * math.sqrt(c.out_dim))
    return exact, nominal


def dense_param_count(in_dim: int, out_dim: int) -> int:
    return in_dim * out_dim


def efficiency_bound(out_dim: int) -> float:
    """Largest rank for which the nominal count does not exceed the dense one."""
    if out_dim < 1:
        raise RangeError("out_dim must be >= 1")
    return math.sqrt(out_dim) / 2.0


def within_bound(r: int, out_dim: int) -> bool:
    return r <= efficiency_bound(out_dim)


def flops_estimate(config: SfpConfig) -> tuple[int, int, float]:
    """``(two_stage, nominal, relative_to_dense)`` multiply counts."""
    c = config
    two_stage = c.M * c.r * c.d1 * c.d2 * (c.d1 + 1)
    nominal = round(2 * c.r * c.in_dim * math.sqrt(c.out_dim))
    return two_stage, nominal, nominal / (c.in_dim * c.out_dim)


def svd_init(W, config: SfpConfig) -> SfpLayer:
    """Initialize cores from a dense weight by per-block truncated SVD.

    Each ``out_dim x out_dim`` block is approximated by ``U_r S_r V_r^T``.  The
    right core holds ``sqrt(S_r) V_r^T`` reshaped to ``(r, d1, d2)``; the left
    core holds ``U_r sqrt(S_r)`` repeated along its third (``q``) axis, which
    makes the block contraction equal ``U_r S_r V_r^T`` exactly.
    """
    cfg = config
    W = as_tensor(W)
    if W.shape != (cfg.out_dim, cfg.in_dim):
        raise DimensionError(f"W shape {W.shape} != {(cfg.out_dim, cfg.in_dim)}")
    if cfg.r > cfg.out_dim:
        raise RangeError("rank cannot exceed out_dim")
    L = np.empty(cfg.left_shape)
    R = np.empty(cfg.right_shape)
    r = cfg.r
    for i in range(cfg.M):
        block = W[:, i * cfg.out_dim:(i + 1) * cfg.out_dim]
        try:
            U, s, Vt = np.linalg.svd(block)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD of block {i} did not converge") from exc
        root = np.sqrt(s[:r])
        U_hat = U[:, :r] * root
        Vt_hat = root[:, None] * Vt[:r]
        R[i] = Vt_hat.reshape(r, cfg.d1, cfg.d2)
        L[i] = np.broadcast_to(U_hat.reshape(cfg.d1, cfg.d2, 1, r), (cfg.d1, cfg.d2, cfg.d1, r))
    return SfpLayer(cfg, L, R)


def block_reconstruction_errors(layer: SfpLayer, W) -> np.ndarray:
    """Spectral-norm error of every block of ``contract_to_dense`` against ``W``."""
    cfg = layer.config
    diff = contract_to_dense(layer) - as_tensor(W)
    return np.array([
        np.linalg.norm(diff[:, i * cfg.out_dim:(i + 1) * cfg.out_dim], 2) for i in range(cfg.M)
    ])


def to_bytes(layer: SfpLayer) -> bytes:
    c = layer.config
    has_bias = layer.bias is not None
    arrays = [layer.cores_L, layer.cores_R] + ([layer.bias] if has_bias else [])
    return container.pack(MAGIC, [c.in_dim, c.out_dim, c.d1, c.d2, c.M, c.r, int(has_bias)], arrays)


def from_bytes(blob: bytes) -> SfpLayer:
    header, payload = container.unpack(blob, MAGIC)
    in_dim, out_dim, d1, d2, M, r, has_bias = header
    cfg = SfpConfig(in_dim, out_dim, d1, d2, M, r)
    L, off = container.take(payload, 0, cfg.left_shape)
    R, off = container.take(payload, off, cfg.right_shape)
    bias = None
    if has_bias:
        bias, off = container.take(payload, off, (out_dim,))
    if off != payload.size:
        raise DimensionError("trailing data in SFP container")
    return SfpLayer(cfg, L, R, bias)


def save(layer: SfpLayer, path) -> None:
    container.write_file(path, to_bytes(layer))


def load(path) -> SfpLayer:
    return from_bytes(container.read_file(path))
