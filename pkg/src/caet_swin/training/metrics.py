"""Fold planning, confusion-matrix metrics and the bootstrap interval."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INVASIVE = 1


@dataclass
class FoldPlan:
    folds: list[np.ndarray]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_test(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        test = self.folds[i]
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, test


def make_folds(labels, k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified k-fold split.

    Each class is shuffled on its own, the classes are laid end to end, and
    position ``p`` in that list goes to fold ``p % k``.  Every fold then holds
    floor or ceil of ``count / k`` of each class.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(labels):
        ids = np.flatnonzero(labels == c)
        if len(ids) < k:
            raise ValueError(f"class {c} has {len(ids)} samples, fewer than k={k}")
        order.append(rng.permutation(ids))
    order = np.concatenate(order)
    return FoldPlan([np.sort(order[i::k]) for i in range(k)], seed)


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    tp: int
    tn: int
    fp: int
    fn: int
    ci95: tuple[float, float] | None = None
    fold_accuracies: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity, "specificity": self.specificity,
                "confusion": {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn},
                "ci95": list(self.ci95) if self.ci95 is not None else None,
                "fold_accuracies": list(self.fold_accuracies)}


def compute_metrics(preds, labels, positive_class: int = INVASIVE) -> MetricsReport:
    """Percentages; sensitivity is the recall of ``positive_class``."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("no predictions")
    pos, hit = labels == positive_class, preds == labels
    tp, fn = int((pos & hit).sum()), int((pos & ~hit).sum())
    tn, fp = int((~pos & hit).sum()), int((~pos & ~hit).sum())
    if tp + fn == 0 or tn + fp == 0:
        raise ValueError("sensitivity/specificity undefined: a class is absent from the labels")
    return MetricsReport(100.0 * (tp + tn) / preds.size, 100.0 * tp / (tp + fn), 100.0 * tn / (tn + fp),
                         tp, tn, fp, fn)


def bootstrap_ci(per_fold_acc, n_resamples: int = 10000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap of the mean fold accuracy.

    Quantiles use the inverted-CDF rule, so both ends are means that some
    resample actually produced.
    """
    acc = np.asarray(per_fold_acc, dtype=np.float64)
    if acc.ndim != 1 or len(acc) < 2:
        raise ValueError("bootstrap needs at least 2 fold accuracies")
    rng = np.random.default_rng(seed)
    means = acc[rng.integers(0, len(acc), size=(n_resamples, len(acc)))].mean(axis=1)
    tail = (1 - level) / 2
    lo, hi = np.quantile(means, [tail, 1 - tail], method="inverted_cdf")
    return float(lo), float(hi)


def pooled_report(fold_preds: list[np.ndarray], fold_labels: list[np.ndarray], n_resamples: int,
                  seed: int) -> MetricsReport:
    """Metrics over all folds' predictions plus per-fold accuracies and their CI.

    The interval is widened to contain the pooled point estimate when fold
    sizes differ enough for the two to disagree.
    """
    rep = compute_metrics(np.concatenate(fold_preds), np.concatenate(fold_labels))
    rep.fold_accuracies = [100.0 * float(np.mean(p == y)) for p, y in zip(fold_preds, fold_labels)]
    lo, hi = bootstrap_ci(rep.fold_accuracies, n_resamples, seed)
    rep.ci95 = (min(lo, rep.accuracy), max(hi, rep.accuracy))
    return rep
