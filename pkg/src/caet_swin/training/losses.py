from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..tensor import Tensor


def smoothed_targets(labels, alpha: float, num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    if not np.isin(labels, np.arange(num_classes)).all():
        raise ValueError(f"labels must lie in 0..{num_classes - 1}, got {np.unique(labels)}")
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    onehot = np.eye(num_classes)[labels.astype(int)]
    return (1 - alpha) * onehot + alpha / num_classes


def label_smoothing_ce(logits: Tensor, labels, alpha: float = 0.1) -> Tensor:
    """Batch mean of -sum_c t_c log softmax(logits)_c with t = (1-a) onehot + a/K."""
    n, k = logits.shape
    t = smoothed_targets(labels, alpha, k).astype(logits.dtype)
    if t.shape[0] != n:
        raise ValueError(f"{t.shape[0]} labels for {n} rows of logits")
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.tsum(T.mul(logp, Tensor(t))), -1.0 / n)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return label_smoothing_ce(logits, labels, 0.0)


def mse(pred: Tensor, target) -> Tensor:
    diff = T.sub(pred, target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype)))
    return T.mean(T.mul(diff, diff))
