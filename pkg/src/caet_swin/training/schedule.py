"""The four training phases, run in order and independently per path.

1. CAE pre-training on every slice, then selective fine-tuning.
2. CAET path on frozen CAE embeddings, with a two-way head.
3. SWin path on nodule patches, with a two-way head and early stopping.
4. Fusion head on the frozen outputs of both paths.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from ..cae import CAE, CAETrainConfig, cae_finetune, cae_pretrain, encode_array
from ..caet import CAETPath, pad_batch
from ..config import RunConfig
from ..data import ModelInputs
from ..errors import PhaseError, TrainingDiverged
from ..fusion import AblationHead, CAETSWinModel, FusionHead
from ..plans import ModelPlan
from ..swin import SwinPath
from ..tensor import NonFiniteError, Tensor, no_grad
from .loop import EarlyStopper, fit_classifier
from .optim import Adam, AdamW

PHASES = ("cae-pretrain", "cae-finetune", "caet", "swin", "fusion")
Log = Callable[[dict], None]


def phase_rng(seed, phase: str, *extra: int) -> np.random.Generator:
    """Independent stream per (seed, phase[, extra]); ``seed`` may be an int or a tuple of ints."""
    return np.random.default_rng([*np.atleast_1d(seed).tolist(), PHASES.index(phase), *extra])


@contextmanager
def phase_guard(name: str):
    """Tag failures with the phase; divergence keeps its own type.

    A forward pass that turns finite inputs into inf/NaN mid-training is
    divergence too, just caught one step before the loss sees it.
    """
    try:
        yield
    except TrainingDiverged as exc:
        exc.phase = exc.phase or name
        raise
    except NonFiniteError as exc:
        raise TrainingDiverged(str(exc), name) from exc
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, f"{type(exc).__name__}: {exc}") from exc


def _tagged(log: Log | None, **tags) -> Log | None:
    if log is None:
        return None
    return lambda rec: log(dict(rec, **tags))


def _cae_cfg(cfg: RunConfig) -> CAETrainConfig:
    c = cfg.cae
    return CAETrainConfig(c.batch_size, c.lr_pretrain, c.epochs_pretrain, c.lr_finetune, c.epochs_finetune,
                          c.val_fraction, c.max_steps)


# ---------------------------------------------------------------------------
# Phase 1: auto-encoder
# ---------------------------------------------------------------------------


def train_cae_pretrain(slices: np.ndarray, cfg: RunConfig, seed, log: Log | None = None) -> CAE:
    with phase_guard("cae-pretrain"):
        rng = phase_rng(seed, "cae-pretrain")
        model = CAE(cfg.model_plan().cae, rng)
        cae_pretrain(model, slices, _cae_cfg(cfg), rng, log)
        return model


def train_cae_finetune(model: CAE, slices: np.ndarray, cfg: RunConfig, seed, log: Log | None = None) -> CAE:
    with phase_guard("cae-finetune"):
        return cae_finetune(model, slices, _cae_cfg(cfg), phase_rng(seed, "cae-finetune"), log)


# ---------------------------------------------------------------------------
# Phase 2: temporal path
# ---------------------------------------------------------------------------


def caet_inputs(encoder, caet_slices: list[np.ndarray], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Frozen CAE embeddings, padded: (B, max_len, d) and (B, max_len) validity."""
    return pad_batch([encode_array(encoder, v) for v in caet_slices], max_len)


def train_caet(feats: np.ndarray, valid: np.ndarray, labels: np.ndarray, train_idx: np.ndarray, cfg: RunConfig,
               seed, log: Log | None = None, aggregation: str | None = None) -> tuple[CAETPath, AblationHead]:
    aggregation = aggregation or cfg.caet.aggregation
    variant = ("GMP", "GAP", "Flatten").index(aggregation)
    with phase_guard("caet"):
        plan = cfg.model_plan().caet
        rng = phase_rng(seed, "caet", variant)
        path = CAETPath(plan, rng, aggregation)
        head = AblationHead(plan.out_dim, rng)
        feats = feats.astype(path.dtype, copy=False)

        def logits(b, _rng):
            return head.logits(path(feats[b], valid[b]))

        params = path.parameters() + head.parameters()
        c = cfg.caet
        fit_classifier(path, params, logits, labels, train_idx, Adam(params, c.lr), c.epochs, c.batch_size,
                       c.label_smoothing, rng, "caet", _tagged(log, aggregation=aggregation))
        return path, head


def caet_outputs(path: CAETPath, feats: np.ndarray, valid: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(feats), batch_size):
            out.append(path(feats[i:i + batch_size].astype(path.dtype, copy=False), valid[i:i + batch_size]).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Phase 3: spatial path
# ---------------------------------------------------------------------------


def _split_val(train_idx: np.ndarray, fraction: float, rng: np.random.Generator):
    n_val = int(round(fraction * len(train_idx)))
    if fraction > 0 and len(train_idx) >= 2:
        n_val = max(n_val, 1)
    if n_val >= len(train_idx):
        n_val = 0
    order = train_idx[rng.permutation(len(train_idx))]
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_swin(swin_slices: list[np.ndarray], labels: np.ndarray, train_idx: np.ndarray, cfg: RunConfig,
               seed, log: Log | None = None) -> tuple[SwinPath, AblationHead]:
    with phase_guard("swin"):
        plan = cfg.model_plan().swin
        rng = phase_rng(seed, "swin")
        path = SwinPath(plan, rng)
        head = AblationHead(plan.out_dim, rng)
        c = cfg.swin
        fit_idx, val_idx = _split_val(np.asarray(train_idx), c.val_fraction, rng)

        def logits(b, _rng):
            return head.logits(path.forward_volumes([swin_slices[i] for i in b]))

        params = path.parameters() + head.parameters()
        opt = AdamW(params, c.lr, weight_decay=c.weight_decay)
        stopper = EarlyStopper(c.patience) if len(val_idx) else None
        fit_classifier(path, params, logits, labels, fit_idx, opt, c.max_epochs, c.batch_size,
                       c.label_smoothing, rng, "swin", log, val_idx if len(val_idx) else None, stopper)
        return path, head


def swin_outputs(path: SwinPath, swin_slices: list[np.ndarray], batch_size: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(swin_slices), batch_size):
            out.append(path.forward_volumes(swin_slices[i:i + batch_size]).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Phase 4: fusion head
# ---------------------------------------------------------------------------


def train_fusion(t_feats: np.ndarray, s_feats: np.ndarray, labels: np.ndarray, train_idx: np.ndarray,
                 cfg: RunConfig, seed, log: Log | None = None) -> FusionHead:
    """Only the head trains; the path features come in as fixed arrays."""
    with phase_guard("fusion"):
        plan = cfg.model_plan()
        rng = phase_rng(seed, "fusion")
        c = cfg.fusion
        head = FusionHead(plan.fusion_in, replace(plan.fusion, dropout=c.dropout), rng)
        x = np.concatenate([t_feats, s_feats], axis=1).astype(head.dtype)

        def logits(b, r):
            return head.logits(Tensor(x[b]), r)

        params = head.parameters()
        fit_classifier(head, params, logits, labels, train_idx, Adam(params, c.lr), c.epochs, c.batch_size,
                       c.label_smoothing, rng, "fusion", log)
        return head


# ---------------------------------------------------------------------------
# Whole schedule
# ---------------------------------------------------------------------------


@dataclass
class ScheduleResult:
    """Everything one pass of the schedule produces over a dataset."""

    model: CAETSWinModel
    cae: CAE
    caet_heads: dict[str, tuple[CAETPath, AblationHead]]
    swin_head: AblationHead
    caet_inputs: tuple[np.ndarray, np.ndarray]
    history: list[dict]

    def variant_probs(self, data: ModelInputs, idx: np.ndarray) -> dict[str, np.ndarray]:
        """Class probabilities of every trained variant on rows ``idx``."""
        feats, valid = self.caet_inputs
        out = {}
        with no_grad():
            for agg, (path, head) in self.caet_heads.items():
                out[f"CAET({agg})"] = head(Tensor(caet_outputs(path, feats[idx], valid[idx]))).data
            s = swin_outputs(self.model.swin, [data.swin[i] for i in idx])
            out["SWin"] = self.swin_head(Tensor(s)).data
            t = caet_outputs(self.model.caet, feats[idx], valid[idx])
            out["CAET-SWin"] = self.model.fusion(Tensor(np.concatenate([t, s], axis=1))).data
        return out


def run_schedule(data: ModelInputs, cfg: RunConfig, seed=None, log: Log | None = None,
                 train_idx: np.ndarray | None = None, aggregations: tuple[str, ...] = ()) -> ScheduleResult:
    """All four phases on ``data[train_idx]`` (default: every row).

    ``aggregations`` lists extra CAET read-outs to train for comparison; the
    configured one always trains and is the one fused.
    """
    seed = cfg.seed if seed is None else seed
    train_idx = np.arange(len(data)) if train_idx is None else np.asarray(train_idx)
    history: list[dict] = []

    def record(rec):
        history.append(rec)
        if log:
            log(rec)

    plan: ModelPlan = cfg.model_plan()
    slices = np.concatenate([data.caet[i] for i in train_idx])
    cae = train_cae_pretrain(slices, cfg, seed, record)
    cae = train_cae_finetune(cae, slices, cfg, seed, record)

    feats, valid = caet_inputs(cae.encoder, data.caet, plan.caet.max_slices)
    main = cfg.caet.aggregation
    heads = {}
    for agg in (main,) + tuple(a for a in aggregations if a != main):
        heads[agg] = train_caet(feats, valid, data.labels, train_idx, cfg, seed, record, agg)
    swin, swin_head = train_swin(data.swin, data.labels, train_idx, cfg, seed, record)

    t = caet_outputs(heads[main][0], feats[train_idx], valid[train_idx])
    s = swin_outputs(swin, [data.swin[i] for i in train_idx])
    fusion = train_fusion(t, s, data.labels[train_idx], np.arange(len(train_idx)), cfg, seed, record)
    model = CAETSWinModel.assemble(plan, cae.encoder, heads[main][0], swin, fusion)
    model.eval()
    return ScheduleResult(model, cae, heads, swin_head, (feats, valid), history)
