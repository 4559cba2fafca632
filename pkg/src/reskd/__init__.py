"""Residual-guided knowledge distillation for small bias-free MLPs."""
from .artifact import StageArtifact, StageRecord
from .data_io import Dataset, gen_blobs, gen_spirals, load_artifact, save_artifact
from .errors import (ConfigError, DivergenceError, DomainError, ParseError,
                     ReskdError, ShapeError, TraceError, TrainingError)
from .inference import AdaptiveMode, adaptive_infer, batch_adaptive_infer, threshold_sweep
from .kd_loss import CeTargetMode, KdLossParams, LossKind, ce_loss, kd_loss, match_loss
from .net import Mlp, backward, forward, init_mlp, sgd_step, softmax_t
from .pipeline import (DistillConfig, combined_logits, energy_dataset, energy_sample,
                       residual_teacher, run_reskd, train_student, train_teacher)

__version__ = "0.1.0"
