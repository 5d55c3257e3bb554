"""Classification metrics over confusion matrices.

Rows are ground truth, columns are predictions. Two conventions are
pinned because libraries disagree: classes with zero support are excluded
from the weighted F1 average, and a per-class 0/0 F1 counts as 0. Kappa
returns 0 when the chance agreement p_e is 1.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: Optional[int] = None) -> np.ndarray:
    """K x K counts, cm[i, j] = #samples of class i predicted as j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"label arrays must be equal-length 1D, got {y_true.shape} and {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("no samples to score")
    if (y_true < 0).any() or (y_pred < 0).any():
        raise ValueError("labels must be non-negative")
    k = int(max(y_true.max(), y_pred.max())) + 1
    if n_classes is not None:
        if n_classes < k:
            raise ValueError(f"n_classes={n_classes} smaller than observed label {k - 1}")
        k = n_classes
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise ValueError(f"confusion matrix must be square and non-empty, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix counts must be >= 0")
    if cm.sum() == 0:
        raise ValueError("confusion matrix is all zeros")
    return cm.astype(np.float64)


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per class via 2tp / (2tp + fp + fn); 0/0 counts as 0."""
    cm = _check(cm)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2.0 * tp + fp + fn
    return np.divide(2.0 * tp, denom, out=np.zeros_like(denom), where=denom > 0)


def weighted_f1(cm: np.ndarray) -> float:
    """Support-weighted mean of per-class F1, zero-support classes excluded."""
    checked = _check(cm)
    support = checked.sum(axis=1)
    f1 = per_class_f1(cm)
    present = support > 0
    return float((f1[present] * support[present]).sum() / support[present].sum())


def cohen_kappa(cm: np.ndarray) -> float:
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e); 0 when p_e = 1."""
    cm = _check(cm)
    total = cm.sum()
    p_o = np.diag(cm).sum() / total
    p_e = (cm.sum(axis=1) * cm.sum(axis=0)).sum() / (total * total)
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))
