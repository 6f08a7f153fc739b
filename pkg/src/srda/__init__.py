"""Source-relaxed domain adaptation for image segmentation.

Adapt a segmentation network trained on a labelled source modality to an
unlabelled target modality without access to source data, by minimising
prediction entropy plus a KL penalty pulling the predicted class ratio
towards a prior estimated by an auxiliary regressor.
"""
from .losses import adaptation_loss, adasource_loss, cross_entropy, entropy_loss, kl_ratio, predicted_ratio
from .metrics import dice, hausdorff
from .models import build_seg_model, load_checkpoint, save_checkpoint
from .ratio_prior import estimate_prior, train_regressor
from .trainer import AdaptConfig, adapt, evaluate, run, train_adasource, train_oracle, train_source

__all__ = [
    "AdaptConfig",
    "adapt",
    "adaptation_loss",
    "adasource_loss",
    "build_seg_model",
    "cross_entropy",
    "dice",
    "entropy_loss",
    "estimate_prior",
    "evaluate",
    "hausdorff",
    "kl_ratio",
    "load_checkpoint",
    "predicted_ratio",
    "run",
    "save_checkpoint",
    "train_adasource",
    "train_oracle",
    "train_regressor",
    "train_source",
]
