"""Neural networks trained under gradient-based monotonicity penalties."""

from .autodiff import Tensor, grad, no_grad
from .datagen import Dataset, SynthSpec, generate_blobs, generate_synthetic, load_manifest
from .metrics import MetricsReport, rho_hat, total_activation_accuracy
from .models import MlpModel, SlicedClassifier, load_model, save_model
from .penalties import PenaltySpec, compute_penalty
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "MetricsReport",
    "MlpModel",
    "PenaltySpec",
    "SlicedClassifier",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "compute_penalty",
    "generate_blobs",
    "generate_synthetic",
    "grad",
    "load_manifest",
    "load_model",
    "no_grad",
    "rho_hat",
    "save_model",
    "total_activation_accuracy",
    "train",
]
