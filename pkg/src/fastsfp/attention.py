"""Single-head attention and a miniature spatiotemporal transformer encoder.

The encoder cuts a ``D x H x W`` volume into ``p^3`` patches, giving a token
grid of ``T = D/p`` depth positions by ``S = (H/p)(W/p)`` in-plane positions.
Spatial blocks attend among the ``S`` tokens of each depth position; temporal
blocks attend causally across the ``T`` depth positions of each in-plane
token.  Blocks are pre-norm residual (attention, then a two-layer GELU MLP); a final layer norm
produces the output tokens.

All per-block quantities that the distillation losses consume are recorded
in :class:`BlockTaps`.  Arrays in a tap carry a leading group axis ``G``
(``T`` for spatial blocks, ``S`` for temporal ones): ``q`` is ``(G, N, d)``
and ``scores`` is ``(G, N, N)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import container
from .exceptions import DimensionError, RangeError
from .tensor import as_tensor, softmax

MAGIC = b"ENC1"
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

SPATIAL = "spatial"
TEMPORAL = "temporal"


# ---------------------------------------------------------------------------
# attention primitives
# ---------------------------------------------------------------------------

def _check_qkv(q, k, v=None):
    q = as_tensor(q)
    k = as_tensor(k)
    if q.ndim < 2 or q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"incompatible q {q.shape} and k {k.shape}")
    if q.shape[-2] < 1:
        raise DimensionError("attention needs at least one token")
    if v is not None:
        v = as_tensor(v)
        if v.shape[:-1] != k.shape[:-1]:
            raise DimensionError(f"incompatible k {k.shape} and v {v.shape}")
    return q, k, v


def causal_mask(n_q: int, n_k: int) -> np.ndarray:
    """Boolean mask, True where query ``i`` may not see key ``j > i``."""
    return np.triu(np.ones((n_q, n_k), dtype=bool), k=1)


def attention_scores(q, k, causal: bool = False) -> np.ndarray:
    """Row softmax of ``q k^T / sqrt(d_k)``; leading axes are batch axes."""
    q, k, _ = _check_qkv(q, k)
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if causal:
        logits = np.where(causal_mask(q.shape[-2], k.shape[-2]), -np.inf, logits)
    return softmax(logits, axis=-1)


def self_attention(q, k, v, causal: bool = False) -> np.ndarray:
    q, k, v = _check_qkv(q, k, v)
    return attention_scores(q, k, causal) @ v


def cross_attention(q_s, k_t, v_t, causal: bool = False) -> np.ndarray:
    """Student queries against teacher keys and values."""
    return self_attention(q_s, k_t, v_t, causal)


def softmax_backward(A: np.ndarray, dA: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits of a row softmax with output ``A``."""
    return A * (dA - np.sum(dA * A, axis=-1, keepdims=True))


def attention_backward(q, k, v, A, d_out, dA_extra=None):
    """Backward of ``out = softmax(q k^T / sqrt(d)) v``.

    ``dA_extra`` is an additional gradient arriving directly on the scores.
    Returns ``(dq, dk, dv)``.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    dA = d_out @ np.swapaxes(v, -1, -2)
    if dA_extra is not None:
        dA = dA + dA_extra
    dv = np.swapaxes(A, -1, -2) @ d_out
    dlogits = softmax_backward(A, dA) * scale
    dq = dlogits @ k
    dk = np.swapaxes(dlogits, -1, -2) @ q
    return dq, dk, dv


# ---------------------------------------------------------------------------
# layer norm / gelu
# ---------------------------------------------------------------------------

def layer_norm(x: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def layer_norm_backward(xhat: np.ndarray, inv: np.ndarray, dxhat: np.ndarray) -> np.ndarray:
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    u = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class BlockTaps:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scores: np.ndarray
    out: np.ndarray
    block_kind: str
    block_index: int

    @property
    def causal(self) -> bool:
        return self.block_kind == TEMPORAL


@dataclass
class TinyEncoder:
    """Weights of the miniature encoder, keyed by name in ``params``."""

    volume_shape: tuple[int, int, int]
    patch: int
    d_model: int
    n_spatial: int
    n_temporal: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        if self.n_spatial + self.n_temporal < 1:
            raise RangeError("encoder needs at least one block")
        if self.patch < 1 or any(s % self.patch for s in self.volume_shape):
            raise DimensionError(f"volume {self.volume_shape} not divisible by patch {self.patch}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(s // self.patch for s in self.volume_shape)

    @property
    def n_tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def block_kinds(self) -> list[str]:
        return [SPATIAL] * self.n_spatial + [TEMPORAL] * self.n_temporal

    def param_shapes(self) -> dict:
        d, p3 = self.d_model, self.patch ** 3
        shapes = {"embed.w": (p3, d), "embed.b": (d,), "pos": (self.n_tokens, d)}
        for i in range(len(self.block_kinds)):
            shapes.update({
                f"b{i}.wq": (d, d), f"b{i}.wk": (d, d), f"b{i}.wv": (d, d), f"b{i}.wo": (d, d),
                f"b{i}.w1": (d, 2 * d), f"b{i}.b1": (2 * d,),
                f"b{i}.w2": (2 * d, d), f"b{i}.b2": (d,),
            })
        return shapes

    def copy(self) -> "TinyEncoder":
        return TinyEncoder(self.volume_shape, self.patch, self.d_model, self.n_spatial,
                           self.n_temporal, {k: v.copy() for k, v in self.params.items()})


def init_encoder(volume_shape=(8, 8, 8), patch: int = 2, d_model: int = 16,
                 n_spatial: int = 2, n_temporal: int = 2,
                 rng: Optional[np.random.Generator] = None, zero: bool = False) -> TinyEncoder:
    """Create an encoder with fan-in scaled normal weights (or all zeros)."""
    enc = TinyEncoder(volume_shape, patch, d_model, n_spatial, n_temporal)
    if rng is None:
        rng = np.random.default_rng(0)
    for name, shape in enc.param_shapes().items():
        if zero or name.endswith((".b", ".b1", ".b2")):
            enc.params[name] = np.zeros(shape)
        elif name == "pos":
            enc.params[name] = 0.1 * rng.standard_normal(shape)
        else:
            enc.params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return enc


def patchify(volume: np.ndarray, patch: int) -> np.ndarray:
    """``(D, H, W)`` -> ``(T*S, p^3)`` with tokens ordered depth-major."""
    D, H, W = volume.shape
    p = patch
    v = volume.reshape(D // p, p, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
    return v.reshape((D // p) * (H // p) * (W // p), p ** 3)


def _to_groups(x: np.ndarray, kind: str, T: int, S: int) -> np.ndarray:
    x = x.reshape(T, S, -1)
    return x if kind == SPATIAL else np.ascontiguousarray(x.transpose(1, 0, 2))


def _from_groups(x: np.ndarray, kind: str, T: int, S: int) -> np.ndarray:
    if kind == TEMPORAL:
        x = x.transpose(1, 0, 2)
    return np.ascontiguousarray(x).reshape(T * S, -1)


def _block_forward(params: dict, i: int, x: np.ndarray, causal: bool):
    """One pre-norm block on grouped tokens ``x`` of shape ``(G, N, d)``."""
    P = lambda n: params[f"b{i}.{n}"]  # noqa: E731
    xn, inv1 = layer_norm(x)
    q, k, v = xn @ P("wq"), xn @ P("wk"), xn @ P("wv")
    A = attention_scores(q, k, causal)
    o = A @ v
    h = x + o @ P("wo")
    hn, inv2 = layer_norm(h)
    z = hn @ P("w1") + P("b1")
    g = gelu(z)
    y = h + g @ P("w2") + P("b2")
    cache = dict(xn=xn, inv1=inv1, q=q, k=k, v=v, A=A, o=o, hn=hn, inv2=inv2, z=z, g=g)
    return y, cache


def _check_volume(model: TinyEncoder, volume) -> np.ndarray:
    volume = as_tensor(volume)
    if volume.ndim != 3 or any(s % model.patch for s in volume.shape):
        raise DimensionError(f"volume shape {volume.shape} not divisible by patch {model.patch}")
    if volume.shape != model.volume_shape:
        raise DimensionError(f"encoder built for {model.volume_shape}, got {volume.shape}")
    return volume


def encoder_forward(model: TinyEncoder, volume, return_cache: bool = False):
    """Run the encoder; returns ``(features, taps)`` (plus a cache if asked).

    ``features`` is the ``(T*S, d)`` token sequence after the last block,
    layer normalized (no affine parameters).
    """
    volume = _check_volume(model, volume)
    T, Hs, Ws = model.grid
    S = Hs * Ws
    prm = model.params
    patches = patchify(volume, model.patch)
    x = patches @ prm["embed.w"] + prm["embed.b"] + prm["pos"]
    taps, caches = [], []
    for i, kind in enumerate(model.block_kinds):
        xg = _to_groups(x, kind, T, S)
        y, cache = _block_forward(prm, i, xg, kind == TEMPORAL)
        taps.append(BlockTaps(cache["q"], cache["k"], cache["v"], cache["A"], cache["o"], kind, i))
        caches.append(cache)
        x = _from_groups(y, kind, T, S)
    feats, inv = layer_norm(x)
    if return_cache:
        return feats, taps, {"patches": patches, "blocks": caches, "final": (feats, inv)}
    return feats, taps


def encoder_backward(model: TinyEncoder, cache: dict, d_features,
                     tap_grads: Optional[dict] = None) -> dict:
    """Parameter gradients for upstream gradients on features and taps.

    ``tap_grads`` maps a block index to a dict with optional keys ``scores``,
    ``out`` and ``q`` holding gradients on those tapped quantities.
    """
    T, Hs, Ws = model.grid
    S = Hs * Ws
    prm = model.params
    tap_grads = tap_grads or {}
    grads = {}
    feats, inv = cache["final"]
    dx = layer_norm_backward(feats, inv, as_tensor(d_features).reshape(T * S, model.d_model))
    kinds = model.block_kinds
    for i in reversed(range(len(kinds))):
        kind = kinds[i]
        c = cache["blocks"][i]
        extra = tap_grads.get(i, {})
        P = lambda n: prm[f"b{i}.{n}"]  # noqa: E731
        dy = _to_groups(dx, kind, T, S)
        # feed-forward sub-layer
        grads[f"b{i}.w2"] = np.einsum("gnf,gnd->fd", c["g"], dy)
        grads[f"b{i}.b2"] = dy.sum(axis=(0, 1))
        dz = (dy @ P("w2").T) * gelu_grad(c["z"])
        grads[f"b{i}.w1"] = np.einsum("gnd,gnf->df", c["hn"], dz)
        grads[f"b{i}.b1"] = dz.sum(axis=(0, 1))
        dh = dy + layer_norm_backward(c["hn"], c["inv2"], dz @ P("w1").T)
        # attention sub-layer
        grads[f"b{i}.wo"] = np.einsum("gnd,gne->de", c["o"], dh)
        do = dh @ P("wo").T
        if extra.get("out") is not None:
            do = do + extra["out"]
        dq, dk, dv = attention_backward(c["q"], c["k"], c["v"], c["A"], do, extra.get("scores"))
        if extra.get("q") is not None:
            dq = dq + extra["q"]
        xn = c["xn"]
        grads[f"b{i}.wq"] = np.einsum("gnd,gne->de", xn, dq)
        grads[f"b{i}.wk"] = np.einsum("gnd,gne->de", xn, dk)
        grads[f"b{i}.wv"] = np.einsum("gnd,gne->de", xn, dv)
        dxn = dq @ P("wq").T + dk @ P("wk").T + dv @ P("wv").T
        dxg = dh + layer_norm_backward(xn, c["inv1"], dxn)
        dx = _from_groups(dxg, kind, T, S)
    grads["pos"] = dx.copy()
    grads["embed.b"] = dx.sum(axis=0)
    grads["embed.w"] = cache["patches"].T @ dx
    return grads


def to_bytes(model: TinyEncoder) -> bytes:
    D, H, W = model.volume_shape
    header = [D, H, W, model.patch, model.d_model, model.n_spatial, model.n_temporal]
    names = list(model.param_shapes())
    return container.pack(MAGIC, header, [model.params[n] for n in names])


def from_bytes(blob: bytes) -> TinyEncoder:
    header, payload = container.unpack(blob, MAGIC)
    D, H, W, patch, d, ns, nt = header
    model = TinyEncoder((D, H, W), patch, d, ns, nt)
    off = 0
    for name, shape in model.param_shapes().items():
        model.params[name], off = container.take(payload, off, shape)
    if off != payload.size:
        raise DimensionError("trailing data in encoder container")
    return model


def save(model: TinyEncoder, path) -> None:
    container.write_file(path, to_bytes(model))


def load(path) -> TinyEncoder:
    return from_bytes(container.read_file(path))
