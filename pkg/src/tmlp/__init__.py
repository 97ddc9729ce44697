"""Tree-hybrid gated MLP for tabular prediction."""

from .bundle import load_model, save_model
from .data import (
    Dataset,
    FeatureSchema,
    Preprocessor,
    fit_transform,
    load_csv,
    parse_schema,
    split,
    transform,
)
from .ensemble import EnsembleBundle, predict_ensemble, train_ensemble
from .gbdt import GbdtConfig, GbdtModel, fit_gbdt
from .model import TmlpModel, TrainConfig, export_pruned, fit_tmlp, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EnsembleBundle",
    "FeatureSchema",
    "GbdtConfig",
    "GbdtModel",
    "Preprocessor",
    "TmlpModel",
    "TrainConfig",
    "export_pruned",
    "fit_gbdt",
    "fit_tmlp",
    "fit_transform",
    "load_csv",
    "load_model",
    "parse_schema",
    "predict_ensemble",
    "save_model",
    "split",
    "train",
    "train_ensemble",
    "transform",
    "__version__",
]
