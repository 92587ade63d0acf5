"""geomil: hybrid hyperbolic-Euclidean multiple-instance learning.

Bags of instance embeddings are encoded by a cascaded diagonal
state-space + sparse mixture-of-experts backbone, max-pooled, fused into
a dual-geometry representation, and classified.  The package ships a
functional core, a scikit-learn style estimator, and a CLI (``geomil``).
"""

from .estimator import BagClassifier
from .model import (
    BagFeatures,
    GhsParams,
    ModelConfig,
    ModelParams,
    forward_bag,
    init_model,
    max_pool_slide,
    saliency,
)
from .checkpoint import checkpoint_load, checkpoint_save
from .data import kfold_split, load_bag, save_bag, synth_bags
from .metrics import EvalReport, auroc, evaluate_bags, f1_macro
from .train import TrainConfig, cosine_lr, fit_model, train_loop

__version__ = "0.1.0"

__all__ = [
    "BagClassifier",
    "BagFeatures",
    "EvalReport",
    "GhsParams",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "auroc",
    "checkpoint_load",
    "checkpoint_save",
    "cosine_lr",
    "evaluate_bags",
    "f1_macro",
    "fit_model",
    "forward_bag",
    "init_model",
    "kfold_split",
    "load_bag",
    "max_pool_slide",
    "saliency",
    "save_bag",
    "synth_bags",
    "train_loop",
    "__version__",
]
