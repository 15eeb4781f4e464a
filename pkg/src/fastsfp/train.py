"""Optimizer, schedules and the two training stages.

Stage 1 distils a frozen teacher encoder (clean volumes) into a student
encoder (degraded volumes) under one of five strategies.  Stage 2 freezes
the student and trains a factorized visual projection plus a dense text
projection with the sigmoid contrastive loss.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import attention as att
from . import losses
from . import sfp as sfp_mod
from .data import VolumePair, make_dataset, prompts, text_embed_stub
from .exceptions import ConfigError, DimensionError, RangeError
from .siglip import align_step, siglip_loss, pairwise_logits, ContrastiveBatch
from .tensor import l2_normalize

log = logging.getLogger(__name__)

ABLATION_LR = 1e-5
TABLE_STAGE1_LR = 5e-5
TABLE_STAGE2_BASE_LR = 1e-5


class Strategy(str, enum.Enum):
    NAIVE_KD = "naive_kd"
    FEATURE_KD = "feature_kd"
    FAST_NO_ASP = "fast_no_asp"
    FAST_NO_DAF = "fast_no_daf"
    FAST_FULL = "fast_full"


# ---------------------------------------------------------------------------
# schedules and optimizer
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, eta_base: float, eta_min: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (eta_base - eta_min) * (1.0 + math.cos(math.pi * step / total_steps))


def mup_scale_lr(eta_base: float, d_in: int, M: int, r: int) -> float:
    """Scale a dense-layer learning rate by the fan-in ratio ``d_in / (M r)``."""
    if M * r < 1:
        raise RangeError("M * r must be >= 1")
    return eta_base * d_in / (M * r)


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params: dict, weight_decay: float = 0.01) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0,
                   weight_decay=weight_decay)


def adamw_step(params: dict, grads: dict, state: OptimState, lr) -> tuple[dict, OptimState]:
    """One bias-corrected Adam step with decoupled weight decay.

    ``lr`` is a float or a dict of per-parameter learning rates.  Returns new
    ``(params, state)``; inputs are not modified.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        step_lr = lr[k] if isinstance(lr, dict) else lr
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        decayed = p * (1.0 - step_lr * state.weight_decay)
        new_p[k] = decayed - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, OptimState(new_m, new_v, t, b1, b2, state.eps, state.weight_decay)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    strategy: Strategy = Strategy.FAST_FULL
    seed: int = 0
    # encoder
    volume_shape: tuple = (8, 8, 8)
    patch: int = 2
    d_model: int = 16
    n_spatial: int = 2
    n_temporal: int = 2
    # data
    n_volumes: int = 50
    n_eval: int = 50
    n_labels: int = 3
    # stage 1
    epochs: int = 50
    batch_size: int = 4
    lr: float = 3e-3
    eta_min: float = 1e-6
    weight_decay: float = 0.01
    alpha: float = 2.0
    beta: float = 5.0
    gamma: float = 22.0
    asp_norm: str = "mean_sq"
    # stage 2
    contrastive_epochs: int = 10
    base_lr: float = 1e-5
    out_dim: int = 256
    rank: int = 6
    txt_dim: int = 768
    sfp_bias: bool = False
    siglip_norm: str = "batch"
    center_features: bool = True
    stage1_epochs: int = 50

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        if len(self.volume_shape) != 3:
            raise ConfigError("volume_shape needs three entries")
        if self.epochs < 0 or self.contrastive_epochs < 0 or self.stage1_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.asp_norm not in losses.ASP_NORMS:
            raise ConfigError(f"asp_norm must be one of {losses.ASP_NORMS}")
        if self.siglip_norm not in ("batch", "pairs"):
            raise ConfigError("siglip_norm must be 'batch' or 'pairs'")

    @property
    def weights(self) -> losses.FastWeights:
        return losses.FastWeights(self.alpha, self.beta, self.gamma)

    def replace(self, **changes) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)

    def to_items(self) -> list:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Strategy):
                v = v.value
            elif isinstance(v, tuple):
                v = "x".join(str(s) for s in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Build from string values (config file / CLI), typed by the defaults."""
        base = base or cls()
        known = {f.name for f in fields(cls)}
        changes = {}
        for key, raw in items.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(base, key)
            try:
                if isinstance(default, Strategy):
                    val = Strategy(raw)
                elif isinstance(default, bool):
                    if raw.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(raw)
                    val = raw.lower() in ("true", "1")
                elif isinstance(default, tuple):
                    val = tuple(int(s) for s in raw.replace(",", "x").split("x"))
                elif isinstance(default, int):
                    val = int(raw)
                elif isinstance(default, float):
                    val = float(raw)
                else:
                    val = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            changes[key] = val
        return base.replace(**changes)


def build_encoders(cfg: RunConfig):
    """Frozen teacher and freshly seeded student for ``cfg``."""
    kw = dict(volume_shape=cfg.volume_shape, patch=cfg.patch, d_model=cfg.d_model,
              n_spatial=cfg.n_spatial, n_temporal=cfg.n_temporal)
    teacher = att.init_encoder(rng=np.random.default_rng([cfg.seed, 1]), **kw)
    student = att.init_encoder(rng=np.random.default_rng([cfg.seed, 2]), **kw)
    return teacher, student


def default_data(cfg: RunConfig):
    train = make_dataset(cfg.n_volumes, cfg.seed * 2 + 100, cfg.volume_shape, cfg.n_labels)
    held = make_dataset(cfg.n_eval, cfg.seed * 2 + 101, cfg.volume_shape, cfg.n_labels)
    return train, held


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

@dataclass
class DistillResult:
    history: list
    student: att.TinyEncoder
    teacher: att.TinyEncoder


def _objective(strategy: Strategy, w: losses.FastWeights):
    """Per-term weights ``(asp, daf, block_features, fr)``."""
    return {
        Strategy.NAIVE_KD: (0.0, 0.0, 0.0, w.gamma),
        Strategy.FEATURE_KD: (0.0, 0.0, w.beta, w.gamma),
        Strategy.FAST_NO_ASP: (0.0, w.beta, 0.0, w.gamma),
        Strategy.FAST_NO_DAF: (w.alpha, 0.0, 0.0, w.gamma),
        Strategy.FAST_FULL: (w.alpha, w.beta, 0.0, w.gamma),
    }[strategy]


def distill_item(student, teacher_out, volume, cfg: RunConfig, need_grad: bool = True):
    """Objective, ``(asp, daf, fr)`` and parameter grads for one volume."""
    feat_t, taps_t = teacher_out
    wa, wd, wf, wr = _objective(cfg.strategy, cfg.weights)
    feat_s, taps_s, cache = att.encoder_forward(student, volume, return_cache=True)
    asp = losses.loss_asp(taps_t, taps_s, cfg.asp_norm)
    daf = losses.loss_daf(taps_t, taps_s)
    fr = losses.loss_fr(feat_t, feat_s)
    objective = wa * asp + wd * daf + wr * fr
    if wf:
        objective += wf * losses.loss_block_features(taps_t, taps_s)
    if not need_grad:
        return objective, (asp, daf, fr), None
    tap_grads = losses.merge_tap_grads(
        (wa, losses.loss_asp_grad(taps_t, taps_s, cfg.asp_norm) if wa else {}),
        (wd, losses.loss_daf_grad(taps_t, taps_s) if wd else {}),
        (wf, losses.loss_block_features_grad(taps_t, taps_s) if wf else {}),
    )
    grads = att.encoder_backward(student, cache, wr * losses.loss_fr_grad(feat_t, feat_s), tap_grads)
    return objective, (asp, daf, fr), grads


def end_representation_mse(teacher, student, pairs) -> float:
    vals = [losses.loss_fr(att.encoder_forward(teacher, p.clean)[0],
                           att.encoder_forward(student, p.degraded)[0]) for p in pairs]
    return float(np.mean(vals))


def _evaluate_stage1(student, teacher_outs, pairs, eval_pairs, teacher, cfg):
    objs, comps = [], []
    for tout, p in zip(teacher_outs, pairs):
        obj, c, _ = distill_item(student, tout, p.degraded, cfg, need_grad=False)
        objs.append(obj)
        comps.append(c)
    comps = np.mean(np.array(comps), axis=0) if comps else np.zeros(3)
    return (float(np.mean(objs)) if objs else 0.0, comps,
            end_representation_mse(teacher, student, eval_pairs))


def run_distillation(cfg: RunConfig, train_pairs: Optional[list] = None,
                     eval_pairs: Optional[list] = None, teacher=None, student=None) -> DistillResult:
    """Stage-1 training; one history row per epoch (row 0 is the initial state).

    ``end_mse`` is measured on ``eval_pairs`` (held-out) every epoch whatever
    the strategy; the loss columns are averages over the training pairs.
    """
    if train_pairs is None or eval_pairs is None:
        dtrain, deval = default_data(cfg)
        train_pairs = dtrain if train_pairs is None else train_pairs
        eval_pairs = deval if eval_pairs is None else eval_pairs
    t0, s0 = build_encoders(cfg)
    teacher = teacher or t0
    student = (student or s0).copy()
    teacher_outs = [att.encoder_forward(teacher, p.clean) for p in train_pairs]
    n = len(train_pairs)
    steps_per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total_steps = max(1, steps_per_epoch * cfg.epochs)
    state = OptimState.zeros_like(student.params, cfg.weight_decay)
    history = []

    def record(epoch, lr):
        obj, comps, end = _evaluate_stage1(student, teacher_outs, train_pairs, eval_pairs, teacher, cfg)
        history.append({"epoch": epoch, "strategy": cfg.strategy.value, "lr": lr, "loss": obj,
                        "asp": float(comps[0]), "daf": float(comps[1]), "fr": float(comps[2]),
                        "end_mse": end})

    record(0, cosine_lr(0, total_steps, cfg.lr, cfg.eta_min))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(_epoch_order(cfg.seed, epoch, n), cfg.batch_size):
            acc = {k: np.zeros_like(v) for k, v in student.params.items()}
            for i in idx:
                _, _, g = distill_item(student, teacher_outs[i], train_pairs[i].degraded, cfg)
                for k in acc:
                    acc[k] += g[k]
            grads = {k: v / len(idx) for k, v in acc.items()}
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.eta_min)
            student.params, state = adamw_step(student.params, grads, state, lr)
            step += 1
        record(epoch, cosine_lr(step, total_steps, cfg.lr, cfg.eta_min))
        log.debug("epoch %d %s end_mse=%.6g", epoch, cfg.strategy.value, history[-1]["end_mse"])
    return DistillResult(history, student, teacher)


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

@dataclass
class ContrastiveResult:
    history: list
    layer: sfp_mod.SfpLayer
    txt_proj: np.ndarray
    matched_sim: float
    mismatched_sim: float
    embeddings: dict = field(default_factory=dict)
    vis_mean: Optional[np.ndarray] = None
    txt_mean: Optional[np.ndarray] = None


def visual_features(student: att.TinyEncoder, pairs: list) -> np.ndarray:
    return np.stack([att.encoder_forward(student, p.degraded)[0].ravel() for p in pairs])


def text_features(pairs: list, dim: int) -> np.ndarray:
    return np.stack([text_embed_stub(p.report, dim) for p in pairs])


def _contrastive_eval(layer, txt_proj, vis, txt, batch_size, norm):
    vals = []
    for start in range(0, len(vis), batch_size):
        sl = slice(start, start + batch_size)
        y_vis = sfp_mod.sfp_forward_batched(layer, vis[sl])
        S = pairwise_logits(ContrastiveBatch(y_vis, txt[sl] @ txt_proj.T))
        vals.append(siglip_loss(S, norm))
    return float(np.mean(vals))


def init_projections(cfg: RunConfig, in_dim: int):
    rng = np.random.default_rng([cfg.seed, 3, cfg.rank])
    config = sfp_mod.SfpConfig.from_dims(in_dim, cfg.out_dim, cfg.rank)
    layer = sfp_mod.init_layer(config, rng, bias=cfg.sfp_bias)
    txt_proj = rng.standard_normal((cfg.out_dim, cfg.txt_dim)) / math.sqrt(cfg.txt_dim)
    return layer, txt_proj


def run_contrastive(cfg: RunConfig, student: att.TinyEncoder, train_pairs: list,
                    eval_pairs: Optional[list] = None) -> ContrastiveResult:
    """Stage-2 training of the projection heads with the encoder frozen."""
    eval_pairs = train_pairs if eval_pairs is None else eval_pairs
    vis = visual_features(student, train_pairs)
    txt = text_features(train_pairs, cfg.txt_dim)
    # frozen features share a large common mode; remove the training mean
    vis_mean = vis.mean(axis=0) if cfg.center_features else np.zeros(vis.shape[1])
    txt_mean = txt.mean(axis=0) if cfg.center_features else np.zeros(txt.shape[1])
    vis = vis - vis_mean
    txt = txt - txt_mean
    layer, txt_proj = init_projections(cfg, vis.shape[1])
    c = layer.config
    sfp_lr = mup_scale_lr(cfg.base_lr, c.in_dim, c.M, c.r)
    params = {"cores_L": layer.cores_L, "cores_R": layer.cores_R, "txt_proj": txt_proj}
    if layer.bias is not None:
        params["bias"] = layer.bias
    state = OptimState.zeros_like(params, cfg.weight_decay)
    n = len(train_pairs)
    total_steps = max(1, math.ceil(n / cfg.batch_size) * cfg.contrastive_epochs)

    def lrs(step):
        lr_sfp = cosine_lr(step, total_steps, sfp_lr, cfg.eta_min)
        lr_txt = cosine_lr(step, total_steps, cfg.base_lr, cfg.eta_min)
        return {k: (lr_txt if k == "txt_proj" else lr_sfp) for k in params}, lr_sfp

    def current_layer():
        return sfp_mod.SfpLayer(c, params["cores_L"], params["cores_R"], params.get("bias"))

    history = [{"epoch": 0, "lr_sfp": lrs(0)[1], "lr_txt": lrs(0)[0]["txt_proj"],
                "siglip": _contrastive_eval(current_layer(), params["txt_proj"], vis, txt,
                                            cfg.batch_size, cfg.siglip_norm)}]
    step = 0
    for epoch in range(1, cfg.contrastive_epochs + 1):
        for idx in _batches(_epoch_order(cfg.seed, 1000 + epoch, n), cfg.batch_size):
            _, grads = align_step(vis[idx], txt[idx], current_layer(), params["txt_proj"],
                                  cfg.siglip_norm)
            params, state = adamw_step(params, grads, state, lrs(step)[0])
            step += 1
        lr_map, lr_sfp = lrs(step)
        history.append({"epoch": epoch, "lr_sfp": lr_sfp, "lr_txt": lr_map["txt_proj"],
                        "siglip": _contrastive_eval(current_layer(), params["txt_proj"], vis, txt,
                                                    cfg.batch_size, cfg.siglip_norm)})
    final = current_layer()
    emb = embed_eval(student, final, params["txt_proj"], eval_pairs, cfg, vis_mean, txt_mean)
    sims = l2_normalize(emb["txt_emb"], axis=1) @ l2_normalize(emb["v_emb"], axis=1).T
    n_e = sims.shape[0]
    matched = float(np.mean(np.diag(sims)))
    off = sims[~np.eye(n_e, dtype=bool)]
    mismatched = float(np.mean(off)) if off.size else float("nan")
    return ContrastiveResult(history, final, params["txt_proj"], matched, mismatched, emb,
                             vis_mean, txt_mean)


def embed_eval(student, layer, txt_proj, pairs, cfg: RunConfig, vis_mean=0.0, txt_mean=0.0) -> dict:
    """Projected visual/report embeddings plus per-label prompt embeddings."""
    vis = sfp_mod.sfp_forward_batched(layer, visual_features(student, pairs) - vis_mean)
    txt = (text_features(pairs, cfg.txt_dim) - txt_mean) @ txt_proj.T
    pos, neg = prompts(cfg.n_labels)

    def project(sentences):
        if not sentences:
            return np.zeros((0, cfg.out_dim))
        return (np.stack([text_embed_stub(s, cfg.txt_dim) for s in sentences]) - txt_mean) @ txt_proj.T

    t_pos, t_neg = project(pos), project(neg)
    labels = np.stack([p.labels for p in pairs]) if pairs else np.zeros((0, cfg.n_labels))
    half = len(pairs) // 2
    split = np.array(["val"] * half + ["test"] * (len(pairs) - half))
    return {"v_emb": vis, "txt_emb": txt, "t_pos": t_pos, "t_neg": t_neg,
            "labels": labels.astype(np.int8), "split": split}
