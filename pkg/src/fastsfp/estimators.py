"""scikit-learn compatible wrappers.

``SfpProjection`` and ``FastDistiller`` are transformers and
``ContrastivePromptClassifier`` is a binary classifier, so all three drop
into ``sklearn.pipeline.Pipeline`` and honour ``get_params``/``set_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import attention as att
from . import sfp as sfp_mod
from .data import VolumePair
from .metrics import contrastive_predict, youden_threshold
from .train import RunConfig, Strategy, run_distillation


class SfpProjection(TransformerMixin, BaseEstimator):
    """Factorized linear projection ``R^in_dim -> R^out_dim``.

    ``fit`` only reads the input width; cores come from a truncated SVD of
    ``dense_weight`` when given, otherwise from a seeded uniform draw.

    Parameters
    ----------
    out_dim : int
        Output width; must divide the number of input features.
    rank : int
        Tensor-train rank of every block.
    dense_weight : array of shape (out_dim, n_features), optional
        Dense matrix to approximate.
    bias : bool
        Add a trainable output bias (initialized to zero).
    random_state : int
        Seed for scratch initialization.
    """

    def __init__(self, out_dim=16, rank=2, d1=None, d2=None, dense_weight=None, bias=False,
                 random_state=0):
        self.out_dim = out_dim
        self.rank = rank
        self.d1 = d1
        self.d2 = d2
        self.dense_weight = dense_weight
        self.bias = bias
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        config = sfp_mod.SfpConfig.from_dims(X.shape[1], self.out_dim, self.rank, self.d1, self.d2)
        if self.dense_weight is not None:
            layer = sfp_mod.svd_init(self.dense_weight, config)
            if self.bias:
                layer.bias = np.zeros(config.out_dim)
        else:
            layer = sfp_mod.init_layer(config, np.random.default_rng(self.random_state), self.bias)
        self.layer_ = layer
        return self

    def transform(self, X):
        check_is_fitted(self, "layer_")
        X = check_array(X, dtype=np.float64)
        return sfp_mod.sfp_forward_batched(self.layer_, X)


class ContrastivePromptClassifier(ClassifierMixin, BaseEstimator):
    """Predict a finding from visual embeddings and a pair of prompt embeddings.

    The decision score is ``cos(v, t_pos) - cos(v, t_neg)``; ``fit`` sets the
    threshold at the Youden-optimal point on the training labels.
    """

    def __init__(self, t_pos=None, t_neg=None):
        self.t_pos = t_pos
        self.t_neg = t_neg

    def decision_function(self, X):
        X = check_array(X, dtype=np.float64)
        score, _ = contrastive_predict(X, np.asarray(self.t_pos, float), np.asarray(self.t_neg, float), 0.0)
        return np.atleast_1d(score)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.threshold_, self.youden_j_ = youden_threshold(y, self.decision_function(X), return_j=True)
        return self

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        return (self.decision_function(X) > self.threshold_).astype(int)


class FastDistiller(TransformerMixin, BaseEstimator):
    """Stage-1 distillation as a transformer.

    ``fit(X, y)`` takes degraded volumes ``X`` and their clean counterparts
    ``y`` (both ``(n, D, H, W)``) and trains a student encoder against a
    seeded frozen teacher.  ``transform`` returns flattened student features.
    """

    def __init__(self, strategy="fast_full", epochs=10, lr=3e-3, batch_size=4, d_model=16,
                 patch=2, n_spatial=2, n_temporal=2, alpha=2.0, beta=5.0, gamma=22.0,
                 random_state=0):
        self.strategy = strategy
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.d_model = d_model
        self.patch = patch
        self.n_spatial = n_spatial
        self.n_temporal = n_temporal
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.random_state = random_state

    def _volumes(self, X):
        X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False)
        if X.ndim != 4:
            raise ValueError("expected volumes of shape (n, D, H, W)")
        return X

    def fit(self, X, y):
        X = self._volumes(X)
        y = self._volumes(y)
        if X.shape != y.shape:
            raise ValueError("degraded and clean volumes must have matching shapes")
        cfg = RunConfig(strategy=Strategy(self.strategy), seed=self.random_state,
                        volume_shape=X.shape[1:], patch=self.patch, d_model=self.d_model,
                        n_spatial=self.n_spatial, n_temporal=self.n_temporal,
                        epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                        alpha=self.alpha, beta=self.beta, gamma=self.gamma)
        pairs = [VolumePair(c, d, np.zeros(0, dtype=np.int8)) for c, d in zip(y, X)]
        result = run_distillation(cfg, pairs, pairs)
        self.student_ = result.student
        self.teacher_ = result.teacher
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "student_")
        X = self._volumes(X)
        return np.stack([att.encoder_forward(self.student_, v)[0].ravel() for v in X])
