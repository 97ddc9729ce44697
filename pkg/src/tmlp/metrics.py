"""Evaluation metrics: accuracy, binary AUC, and RMSE."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeMismatch, SingleClassLabels


def accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"accuracy {y_true.shape} vs {y_pred.shape}")
    return float(np.mean(y_true == y_pred))


def auc_binary(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic.

    Equivalent to the Mann-Whitney U normalization; ties receive average
    ranks, which credits tied positive/negative pairs with 1/2.
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.shape != scores.shape or y_true.ndim != 1:
        raise ShapeMismatch(f"auc {y_true.shape} vs {scores.shape}")
    pos = y_true == 1
    n_pos = int(pos.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassLabels("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ShapeMismatch(f"rmse {y_true.shape} vs {y_pred.shape}")
    diff = y_pred - y_true
    return float(np.sqrt(np.mean(diff * diff)))
