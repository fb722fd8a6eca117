from medimp.contrastive.loss import (
    clamp_logit_scale,
    contrastive_loss,
    cosine_similarity_matrix,
    info_nce_directional,
    initial_logit_scale,
)
from medimp.contrastive.model import LOGIT_SCALE, MedimpModel, retrieval_accuracy
from medimp.contrastive.optim import AdamW, adamw_step, lr_at
from medimp.contrastive.trainer import PromptSampler, Trainer, fit, write_metrics

__all__ = [
    "AdamW",
    "LOGIT_SCALE",
    "MedimpModel",
    "PromptSampler",
    "Trainer",
    "adamw_step",
    "clamp_logit_scale",
    "contrastive_loss",
    "cosine_similarity_matrix",
    "fit",
    "info_nce_directional",
    "initial_logit_scale",
    "lr_at",
    "retrieval_accuracy",
    "write_metrics",
]
