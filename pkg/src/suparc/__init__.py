"""Multimodal metric learning with SupArc and triplet-modality losses on a small fusion network."""

from .autodiff import Tensor, backward, no_grad
from .data import Dataset, DatasetHeader, SyntheticConfig, Utterance, generate_synthetic, load_dataset, save_dataset
from .estimator import PowerIterationPCA, SupArcRegressor
from .evaluation import MetricsBundle, compute_metrics, geometry_score, pca_project
from .losses import LossConfig, arccos_loss, suparc_loss, supervised_ntxent, triplet_modalities_loss
from .model import EncoderConfig, FusionModel, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, ablate, fit

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "Dataset", "DatasetHeader", "SyntheticConfig", "Utterance", "generate_synthetic", "load_dataset", "save_dataset",
    "PowerIterationPCA", "SupArcRegressor",
    "MetricsBundle", "compute_metrics", "geometry_score", "pca_project",
    "LossConfig", "arccos_loss", "suparc_loss", "supervised_ntxent", "triplet_modalities_loss",
    "EncoderConfig", "FusionModel", "init_params", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "ablate", "fit",
]
