"""Pain classification from 68-point facial landmark clips.

Two model families: a spatio-temporal graph network over the landmark graph
(optionally followed by a stacked LSTM) and a per-frame ConvNeXt feature
extractor feeding an LSTM. Everything runs on a small numpy autodiff core.
"""
from .data import Dataset, generate_synthetic, load_landmark_csv, smote_oversample
from .estimator import LandmarkNormalizer, PainClassifier, SMOTE
from .graph import FacialGraph, build_facial_adjacency
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import (EvalReport, OptimizerConfig, evaluate_metrics, run_kfold_experiment,
                       train_model)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EvalReport", "FacialGraph", "LandmarkNormalizer", "ModelConfig", "OptimizerConfig",
    "PainClassifier", "SMOTE", "build_facial_adjacency", "build_model", "evaluate_metrics",
    "generate_synthetic", "load_checkpoint", "load_landmark_csv", "run_kfold_experiment",
    "save_checkpoint", "smote_oversample", "train_model",
]
