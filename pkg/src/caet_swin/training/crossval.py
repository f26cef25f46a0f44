"""Stratified k-fold evaluation of every model variant in one pass."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from typing import Callable

import numpy as np

from ..config import RunConfig
from ..data import ModelInputs
from ..fusion import decide
from .metrics import make_folds, pooled_report
from .schedule import run_schedule

CAET_AGGREGATIONS = {"CAET(GAP)": "GAP", "CAET(Flatten)": "Flatten", "CAET(GMP)": "GMP"}


def run_fold(data: ModelInputs, cfg: RunConfig, train_idx: np.ndarray, test_idx: np.ndarray,
             fold: int) -> dict:
    """Train on ``train_idx`` and return hard predictions per variant on ``test_idx``."""
    logs: list[dict] = []
    aggs = tuple(CAET_AGGREGATIONS[v] for v in cfg.variants if v in CAET_AGGREGATIONS)
    result = run_schedule(data, cfg, (cfg.seed, fold), lambda r: logs.append(dict(r, fold=fold)),
                          train_idx, aggs)
    probs = result.variant_probs(data, test_idx)
    return {"fold": fold, "preds": {v: decide(probs[v]) for v in cfg.variants}, "logs": logs}


def _fold_job(args):
    return run_fold(*args)


def crossval(data: ModelInputs, cfg: RunConfig, log: Callable[[dict], None] | None = None,
             jobs: int = 1) -> dict:
    """Returns the metrics document (see :func:`metrics_json`).

    Folds are independent (each seeded by ``(seed, fold)``), so running them
    in worker processes changes nothing but wall time.
    """
    plan = make_folds(data.labels, cfg.folds, cfg.seed)
    jobs_args = [(data, cfg, *plan.train_test(i), i) for i in range(plan.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_job, jobs_args))
    else:
        results = []
        for a in jobs_args:
            results.append(_fold_job(a))
            if log:
                for rec in results[-1]["logs"]:
                    log(rec)
    if jobs > 1 and log:
        for res in results:
            for rec in res["logs"]:
                log(rec)

    fold_labels = [data.labels[f] for f in plan.folds]
    variants = {}
    for v in cfg.variants:
        rep = pooled_report([r["preds"][v] for r in results], fold_labels, cfg.bootstrap_resamples, cfg.seed)
        variants[v] = rep.to_json()
    folds = [{"fold": i, "n": int(len(f)), "ids": [data.ids[j] for j in f],
              "accuracy": {v: variants[v]["fold_accuracies"][i] for v in cfg.variants}}
             for i, f in enumerate(plan.folds)]
    return {"n": len(data), "k": plan.k, "seed": cfg.seed, "plan": cfg.plan, "positive_class": "invasive",
            "variants": variants, "folds": folds, "config": cfg.model_dump(mode="json")}


def metrics_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def folds_csv(report: dict) -> str:
    """k fold rows then one aggregate row; one accuracy column per variant."""
    variants = sorted(report["variants"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "n"] + variants)
    for f in report["folds"]:
        w.writerow([f["fold"], f["n"]] + [f"{f['accuracy'][v]:.4f}" for v in variants])
    w.writerow(["aggregate", report["n"]] + [f"{report['variants'][v]['accuracy']:.4f}" for v in variants])
    return buf.getvalue()
