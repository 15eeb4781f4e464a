"""Factorized projection heads and attention-style distillation on a desk-scale toy."""

from .exceptions import (ConfigError, DegenerateVectorError, DimensionError, FastSfpError,
                         NumericError, RangeError, StructuralError, UndefinedMetricError)
from .sfp import (SfpConfig, SfpLayer, contract_to_dense, init_layer, param_count, sfp_backward,
                  sfp_forward, sfp_forward_batched, svd_init)
from .attention import BlockTaps, TinyEncoder, encoder_forward, init_encoder
from .losses import FastWeights, loss_asp, loss_daf, loss_fr, loss_total
from .siglip import siglip_loss
from .metrics import auroc, contrastive_predict, weighted_f1, youden_threshold
from .train import RunConfig, Strategy, run_contrastive, run_distillation
from .estimators import ContrastivePromptClassifier, FastDistiller, SfpProjection

__version__ = "0.1.0"
