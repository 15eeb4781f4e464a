"""Finite-difference verification of every hand-written backward pass.

Each ``check_*`` function draws a small random instance from ``seed`` and
returns the worst relative error (see :func:`tensor.max_rel_error`) between
the analytic gradient and central differences.
"""

from __future__ import annotations

import numpy as np

from . import attention as att
from . import losses
from . import sfp as sfp_mod
from .siglip import align_step
from .tensor import finite_diff_grad, max_rel_error, mse, mse_grad

TOLERANCE = 1e-4
EPS = 1e-5


def _stochastic(rng, shape):
    return att.softmax(rng.standard_normal(shape), axis=-1)


def check_sfp(seed: int) -> float:
    rng = np.random.default_rng([seed, 11])
    cfg = sfp_mod.SfpConfig.from_dims(8, 4, int(rng.integers(1, 4)))
    layer = sfp_mod.init_layer(cfg, rng)
    x = rng.standard_normal(8)
    target = rng.standard_normal(4)

    def loss(L, R, xx):
        return mse(sfp_mod.sfp_forward(sfp_mod.SfpLayer(cfg, L, R), xx), target)

    dY = mse_grad(target, sfp_mod.sfp_forward(layer, x))
    dL, dR, dx = sfp_mod.sfp_backward(layer, x, dY)
    return max(
        max_rel_error(dL, finite_diff_grad(lambda L: loss(L, layer.cores_R, x), layer.cores_L, EPS)),
        max_rel_error(dR, finite_diff_grad(lambda R: loss(layer.cores_L, R, x), layer.cores_R, EPS)),
        max_rel_error(dx, finite_diff_grad(lambda xx: loss(layer.cores_L, layer.cores_R, xx), x, EPS)),
    )


def check_attention(seed: int) -> float:
    """Primitive ``softmax(q k^T / sqrt d) v`` with gradients on scores and output."""
    rng = np.random.default_rng([seed, 12])
    n, d = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    causal = bool(seed % 2)
    q, k, v = (rng.standard_normal((2, n, d)) for _ in range(3))
    w_out = rng.standard_normal((2, n, d))
    w_sc = rng.standard_normal((2, n, n))

    def f(qq, kk, vv):
        A = att.attention_scores(qq, kk, causal)
        return float(np.sum(w_out * (A @ vv)) + np.sum(w_sc * A))

    A = att.attention_scores(q, k, causal)
    dq, dk, dv = att.attention_backward(q, k, v, A, w_out, w_sc)
    return max(
        max_rel_error(dq, finite_diff_grad(lambda x: f(x, k, v), q, EPS)),
        max_rel_error(dk, finite_diff_grad(lambda x: f(q, x, v), k, EPS)),
        max_rel_error(dv, finite_diff_grad(lambda x: f(q, k, x), v, EPS)),
    )


def _tiny_pair(seed: int):
    rng = np.random.default_rng([seed, 13])
    kw = dict(volume_shape=(4, 4, 4), patch=2, d_model=4, n_spatial=1, n_temporal=1)
    teacher = att.init_encoder(rng=rng, **kw)
    student = att.init_encoder(rng=rng, **kw)
    return rng, teacher, student, rng.uniform(-1, 1, (4, 4, 4)), rng.uniform(-1, 1, (4, 4, 4))


_GROUPS = {
    "attention": (".wq", ".wk", ".wv", ".wo"),
    "feed_forward": (".w1", ".b1", ".w2", ".b2"),
    "embedding": ("embed.w", "embed.b", "pos"),
}


def check_encoder(seed: int, w: losses.FastWeights = losses.FastWeights()) -> dict:
    """Whole-encoder gradients of the weighted objective, grouped by layer kind."""
    _, teacher, student, clean, degraded = _tiny_pair(seed)
    feat_t, taps_t = att.encoder_forward(teacher, clean)

    def objective(model):
        f, t = att.encoder_forward(model, degraded)
        return losses.loss_total(taps_t, t, feat_t, f, w)[0]

    feat_s, taps_s, cache = att.encoder_forward(student, degraded, return_cache=True)
    tap_grads = losses.merge_tap_grads(
        (w.alpha, losses.loss_asp_grad(taps_t, taps_s)),
        (w.beta, losses.loss_daf_grad(taps_t, taps_s)),
    )
    grads = att.encoder_backward(student, cache, w.gamma * losses.loss_fr_grad(feat_t, feat_s), tap_grads)
    out = {g: 0.0 for g in _GROUPS}
    for name, value in student.params.items():
        def f(x, name=name):
            m = student.copy()
            m.params[name] = x
            return objective(m)
        err = max_rel_error(grads[name], finite_diff_grad(f, value, EPS))
        group = next(g for g, keys in _GROUPS.items() if name.endswith(keys))
        out[group] = max(out[group], err)
    return out


def _tap_instance(seed: int):
    rng = np.random.default_rng([seed, 14])
    n, d, g = int(rng.integers(1, 7)), int(rng.integers(2, 9)), 2
    kind = att.TEMPORAL if seed % 2 else att.SPATIAL

    def taps(i):
        q, k, v = (rng.standard_normal((g, n, d)) for _ in range(3))
        A = att.attention_scores(q, k, kind == att.TEMPORAL)
        return att.BlockTaps(q, k, v, A, A @ v, kind, i)

    return [taps(0), taps(1)], [taps(0), taps(1)]


def _replace(tap: att.BlockTaps, **kw) -> att.BlockTaps:
    fields = dict(q=tap.q, k=tap.k, v=tap.v, scores=tap.scores, out=tap.out,
                  block_kind=tap.block_kind, block_index=tap.block_index)
    fields.update(kw)
    return att.BlockTaps(**fields)


def check_asp(seed: int) -> float:
    taps_t, taps_s = _tap_instance(seed)
    worst = 0.0
    for norm in losses.ASP_NORMS:
        g = losses.loss_asp_grad(taps_t, taps_s, norm)
        for b, tap in enumerate(taps_s):
            def f(A, b=b):
                moved = list(taps_s)
                moved[b] = _replace(tap, scores=A)
                return losses.loss_asp(taps_t, moved, norm)
            worst = max(worst, max_rel_error(g[b]["scores"], finite_diff_grad(f, tap.scores, EPS)))
    return worst


def check_daf(seed: int) -> float:
    taps_t, taps_s = _tap_instance(seed)
    g = losses.loss_daf_grad(taps_t, taps_s)
    worst = 0.0
    for b, tap in enumerate(taps_s):
        for key in ("out", "q"):
            def f(x, b=b, key=key):
                moved = list(taps_s)
                moved[b] = _replace(tap, **{key: x})
                return losses.loss_daf(taps_t, moved)
            worst = max(worst, max_rel_error(g[b][key], finite_diff_grad(f, getattr(tap, key), EPS)))
    return worst


def check_fr(seed: int) -> float:
    rng = np.random.default_rng([seed, 15])
    shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
    ft, fs = rng.standard_normal(shape), rng.standard_normal(shape)
    return max_rel_error(losses.loss_fr_grad(ft, fs),
                         finite_diff_grad(lambda x: losses.loss_fr(ft, x), fs, EPS))


def check_siglip(seed: int) -> float:
    rng = np.random.default_rng([seed, 16])
    B, txt_dim = int(rng.integers(1, 5)), 6
    cfg = sfp_mod.SfpConfig.from_dims(8, 4, 2)
    layer = sfp_mod.init_layer(cfg, rng, bias=bool(seed % 2))
    if layer.bias is not None:
        layer.bias = rng.standard_normal(4) * 0.1
    vis = rng.standard_normal((B, 8))
    txt = rng.standard_normal((B, txt_dim))
    P = rng.standard_normal((4, txt_dim))
    norm = "batch" if seed % 3 else "pairs"
    _, grads = align_step(vis, txt, layer, P, norm)

    def loss(L=layer.cores_L, R=layer.cores_R, PP=P, bias=layer.bias):
        return align_step(vis, txt, sfp_mod.SfpLayer(cfg, L, R, bias), PP, norm)[0]

    errs = [
        max_rel_error(grads["cores_L"], finite_diff_grad(lambda x: loss(L=x), layer.cores_L, EPS)),
        max_rel_error(grads["cores_R"], finite_diff_grad(lambda x: loss(R=x), layer.cores_R, EPS)),
        max_rel_error(grads["txt_proj"], finite_diff_grad(lambda x: loss(PP=x), P, EPS)),
    ]
    if layer.bias is not None:
        errs.append(max_rel_error(grads["bias"], finite_diff_grad(lambda x: loss(bias=x), layer.bias, EPS)))
    return max(errs)


def run_suite(n_seeds: int = 20) -> dict:
    """Worst error per component over ``n_seeds`` seeds."""
    report = {"sfp": 0.0, "attention_primitive": 0.0, "attention": 0.0, "feed_forward": 0.0,
              "embedding": 0.0, "asp": 0.0, "daf": 0.0, "fr": 0.0, "siglip_chain": 0.0}
    for seed in range(n_seeds):
        report["sfp"] = max(report["sfp"], check_sfp(seed))
        report["attention_primitive"] = max(report["attention_primitive"], check_attention(seed))
        for group, err in check_encoder(seed).items():
            report[group] = max(report[group], err)
        report["asp"] = max(report["asp"], check_asp(seed))
        report["daf"] = max(report["daf"], check_daf(seed))
        report["fr"] = max(report["fr"], check_fr(seed))
        report["siglip_chain"] = max(report["siglip_chain"], check_siglip(seed))
    return report
