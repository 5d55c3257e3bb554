"""Training objectives: margin-contrastive pairing loss and L2 penalty."""

from __future__ import annotations

from typing import Dict, Iterable

import numpy as np

from . import ops
from .engine import Parameter, ShapeError, Tensor


def contrastive_loss(zx: Tensor, zs: Tensor, y: np.ndarray, alpha: float = 1.0) -> Tensor:
    """Mean over pairs of y*d^2 + (1-y)*max(alpha - d, 0)^2, d = ||zx - zs||_2.

    Corresponding pairs (y=1) are pulled together quadratically;
    non-corresponding pairs are pushed to at least the margin alpha.
    """
    if alpha <= 0:
        raise ValueError(f"margin must be positive, got {alpha}")
    if zx.data.shape != zs.data.shape or zx.data.ndim != 2:
        raise ShapeError(f"embedding shapes differ or not 2D: {zx.data.shape} vs {zs.data.shape}")
    y = np.asarray(y)
    if y.shape != (zx.data.shape[0],):
        raise ShapeError(f"labels shape {y.shape} != batch ({zx.data.shape[0]},)")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("pair labels must be 0 or 1")
    y = y.astype(zx.data.dtype)
    diff = ops.sub(zx, zs)
    dist_sq = ops.tensor_sum(ops.square(diff), axis=1)
    dist = ops.sqrt(dist_sq)
    pos = ops.mul(Tensor(y), dist_sq)
    hinge = ops.relu(ops.add_scalar(ops.neg(dist), alpha))
    neg = ops.mul(Tensor(1.0 - y), ops.square(hinge))
    return ops.tensor_mean(ops.add(pos, neg))


def pair_bce_loss(zx: Tensor, zs: Tensor, y: np.ndarray, alpha: float = 1.0) -> Tensor:
    """Binary cross-entropy ablation: logit = alpha - ||zx - zs||_2."""
    diff = ops.sub(zx, zs)
    dist = ops.sqrt(ops.tensor_sum(ops.square(diff), axis=1))
    logit = ops.add_scalar(ops.neg(dist), alpha)
    return ops.sigmoid_bce_with_logits(logit, np.asarray(y, dtype=zx.data.dtype))


def l2_penalty(params: Dict[str, Parameter], rate: float) -> Tensor:
    """rate * sum of squared weight entries; biases are exempt."""
    terms = [ops.tensor_sum(ops.square(p)) for name, p in params.items() if name.endswith("/w")]
    if not terms:
        raise ValueError("no weight tensors to regularize")
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, rate)
