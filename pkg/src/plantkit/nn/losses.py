"""Training losses: cross entropy over bins and waypoint L1."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, log_softmax


class IndexError_(IndexError):
    """Raised when a classification target falls outside the bin range."""


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-probability of the target bins.

    Args:
        logits: (n, Z) unnormalized scores.
        targets: n integer bin indices in [0, Z).
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, z = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} vs logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= z:
        raise IndexError_(f"target out of range [0, {z})")
    log_p = log_softmax(logits, axis=-1)
    picked = log_p[np.arange(n), targets]
    return -picked.mean()


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean over waypoints of the per-waypoint L1 norm.

    Both arguments are (W, 2); the result is sum(|dx| + |dy|) / W.
    """
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    w = pred.shape[0]
    return (pred - target).abs().sum() / float(w)
