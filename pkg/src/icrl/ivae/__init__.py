from .estimator import IdentifiableVAE
from .metrics import mcc_score, spearman_matrix
from .model import (
    ElboBreakdown,
    IvaeConfig,
    IvaeModel,
    LatentPosterior,
    TrainingResult,
    encode_conditioning,
    infer_latents,
    train_ivae,
)

__all__ = [
    "ElboBreakdown", "IdentifiableVAE", "IvaeConfig", "IvaeModel", "LatentPosterior",
    "TrainingResult", "encode_conditioning", "infer_latents", "mcc_score",
    "spearman_matrix", "train_ivae",
]
