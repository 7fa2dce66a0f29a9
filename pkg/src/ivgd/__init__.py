"""Invertible graph-diffusion source localization.

Train a Lipschitz-certified residual diffusion model on simulated
Independent-Cascade data, invert it by fixed-point iteration, refine the
estimate with an error-compensation network and validity-aware layers, and
compare against label propagation (LPSI).
"""
from .cascade import CascadeDataset, generate_dataset, load_dataset, save_dataset, simulate_ic
from .diffusion import (
    ForwardTrainConfig,
    ResidualDiffusionModel,
    build_model,
    certify_lipschitz,
    p_forward,
    train_forward,
)
from .graph import ConstraintSpec, Graph, generate_graph, load_edge_list, load_karate
from .inversion import invert_p
from .localizer import IVGDModel, LocalizerTrainConfig, ivgd_infer, ivgd_train
from .lpsi import LpsiConfig, lpsi_scores, lpsi_sources
from .metrics import auc, classification_metrics, evaluate, roc_points

__version__ = "0.1.0"

__all__ = [
    "CascadeDataset",
    "ConstraintSpec",
    "ForwardTrainConfig",
    "Graph",
    "IVGDModel",
    "LocalizerTrainConfig",
    "LpsiConfig",
    "ResidualDiffusionModel",
    "auc",
    "build_model",
    "certify_lipschitz",
    "classification_metrics",
    "evaluate",
    "generate_dataset",
    "generate_graph",
    "invert_p",
    "ivgd_infer",
    "ivgd_train",
    "load_dataset",
    "load_edge_list",
    "load_karate",
    "lpsi_scores",
    "lpsi_sources",
    "p_forward",
    "roc_points",
    "save_dataset",
    "simulate_ic",
    "train_forward",
]
