"""Feature distillation as pre-training with non-parametric dimension alignment."""

from .align import (AlignmentArtifact, apply_alignment, fit_channel_select, fit_svd_projector,
                    make_interpolation, make_parametric_head)
from .container import read_container, write_container
from .data import DatasetSpec, generate, subsample
from .distill import RunManifest, TrainConfig, kdep_loss, logits_kd_loss, precompute_targets, train
from .evaluate import Theorem1Config, compactness, linear_probe, verify_theorem1
from .linalg import channel_stats, std_ratio, svd_topk
from .nn import backward, forward, grad_check, init_network
from .transform import apply_transform, fit_transform, pts, scale_normalize, std_match

__version__ = "0.1.0"
