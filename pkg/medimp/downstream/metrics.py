"""Classification metrics for the downstream report."""
from typing import Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn import metrics as skm

from medimp.exceptions import MetricError


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.size == 0:
        raise MetricError(f"{name} must be a nonempty 1D sequence")
    if not np.isin(arr, (0, 1)).all():
        raise MetricError(f"{name} must hold only 0 and 1")
    return arr.astype(int)


def f1_score(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """2 TP / (2 TP + FP + FN), 0 when there is nothing to score."""
    if len(y_true) != len(y_pred):
        raise MetricError(f"{len(y_true)} labels vs {len(y_pred)} predictions")
    y_true, y_pred = _binary(y_true, "y_true"), _binary(y_pred, "y_pred")
    _, fp, fn, tp = skm.confusion_matrix(y_true, y_pred, labels=[0, 1]).ravel()
    denominator = 2 * tp + fp + fn
    return float(2 * tp / denominator) if denominator else 0.0


def roc_auc(y_true: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney estimate of P(score of a positive > score of a negative), ties counting half."""
    if len(y_true) != len(scores):
        raise MetricError(f"{len(y_true)} labels vs {len(scores)} scores")
    y = _binary(y_true, "y_true")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC AUC needs both classes present")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
