"""Mini-batch classifier training shared by the supervised phases."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..errors import TrainingDiverged
from ..nn import Module
from ..tensor import Tensor, no_grad
from .losses import label_smoothing_ce


class EarlyStopper:
    """Lower-is-better tracking; stops once ``patience`` epochs pass without strict improvement."""

    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.best_state: dict | None = None
        self.since_improvement = 0
        self.epoch = 0

    def update(self, metric: float, state: dict | None = None) -> str:
        """Feed one epoch's metric; returns ``"continue"`` or ``"stop"``."""
        if not math.isfinite(metric):
            raise ValueError(f"early-stopping metric must be finite, got {metric}")
        self.epoch += 1
        if self.best is None or metric < self.best:
            self.best, self.best_epoch, self.best_state = metric, self.epoch, state
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return "stop" if self.since_improvement >= self.patience else "continue"


def early_stop_update(stopper: EarlyStopper, epoch_metric: float, state: dict | None = None) -> str:
    return stopper.update(epoch_metric, state)


LogitsFn = Callable[[np.ndarray, np.random.Generator | None], Tensor]


def evaluate_loss(logits_fn: LogitsFn, idx: np.ndarray, labels: np.ndarray, alpha: float,
                  batch_size: int) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(idx), batch_size):
            b = idx[i:i + batch_size]
            total += float(label_smoothing_ce(logits_fn(b, None), labels[b], alpha).data) * len(b)
    return total / len(idx)


def fit_classifier(model: Module, params, logits_fn: LogitsFn, labels: np.ndarray, train_idx: np.ndarray,
                   opt, epochs: int, batch_size: int, alpha: float, rng: np.random.Generator, phase: str,
                   log: Callable[[dict], None] | None = None, val_idx: np.ndarray | None = None,
                   stopper: EarlyStopper | None = None) -> list[dict]:
    """Shuffle, step, log one record per epoch.

    ``logits_fn(batch_indices, rng)`` maps dataset rows to logits; ``rng`` is
    None outside training.  With a ``stopper`` the validation loss drives early
    stopping and the best parameters are restored at the end.
    """
    history = []
    model.train()
    for epoch in range(1, epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total, correct = 0.0, 0
        for i in range(0, len(order), batch_size):
            b = order[i:i + batch_size]
            opt.zero_grad()
            logits = logits_fn(b, rng)
            loss = label_smoothing_ce(logits, labels[b], alpha)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", phase)
            loss.backward()
            opt.step()
            total += value * len(b)
            correct += int((np.argmax(logits.data, axis=1) == labels[b]).sum())
        rec = {"epoch": epoch, "phase": phase, "loss": total / len(order), "lr": opt.lr,
               "metric": correct / len(order)}
        stop = False
        if val_idx is not None and len(val_idx):
            model.eval()
            rec["val_loss"] = evaluate_loss(logits_fn, val_idx, labels, alpha, batch_size)
            model.train()
            if stopper is not None:
                stop = stopper.update(rec["val_loss"], {id(p): p.data.copy() for p in params}) == "stop"
        history.append(rec)
        if log:
            log(rec)
        if stop:
            break
    if stopper is not None and stopper.best_state is not None:
        for p in params:
            p.data = stopper.best_state[id(p)]
    model.eval()
    return history
