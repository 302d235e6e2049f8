"""Desk-scale fine-tuning sandbox: small MLPs under masked, LoRA or full updates."""
from .estimator import RandomMaskingClassifier
from .model import LayerSpec, MlpModel, attach_peft
from .probes import CurvePoint, distance_at_loss, hessian_spectral_norm, hvp, longer_training_probe
from .tasks import SyntheticTask, gaussian_mixture_pair, linear_regression_task
from .train import FinetuneResult, TrainConfig, finetune, pretrain

__all__ = [
    "CurvePoint", "FinetuneResult", "RandomMaskingClassifier", "LayerSpec", "MlpModel", "SyntheticTask", "TrainConfig",
    "attach_peft", "distance_at_loss", "finetune", "gaussian_mixture_pair",
    "hessian_spectral_norm", "hvp", "linear_regression_task", "longer_training_probe", "pretrain",
]
