"""Label-level embeddings with multi-head attention and a multi-label contrastive loss.

Everything runs on numpy: a small reverse-mode autodiff core, a strided CNN
encoder, class-query attention producing one embedding per label, per-label
classifiers, a contrastive objective over label-level embeddings, two-step
training, metrics, retrieval and a synthetic glyph dataset.
"""

from .tensor import DomainError, ShapeError, Tensor, no_grad
from .model import EncoderConfig, ModelConfig, MulConModel, BackboneModel, init_model
from .losses import bce_loss, build_anchor_sets, combined_loss, mulcon_con_loss, supcon_image_loss
from .evaluate import average_precision, metrics, retrieve
from .training import TrainConfig, run_variant

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "no_grad",
    "EncoderConfig",
    "ModelConfig",
    "MulConModel",
    "BackboneModel",
    "init_model",
    "bce_loss",
    "build_anchor_sets",
    "combined_loss",
    "mulcon_con_loss",
    "supcon_image_loss",
    "average_precision",
    "metrics",
    "retrieve",
    "TrainConfig",
    "run_variant",
]
