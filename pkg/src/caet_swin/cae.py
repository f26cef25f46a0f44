"""Convolutional auto-encoder that turns each lung slice into a feature vector."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import TrainingDiverged
from .nn import Conv2D, Linear, Module
from .plans import CAEPlan
from .tensor import ShapeError, Tensor, no_grad
from .training.losses import mse
from .training.optim import Adam

MAX_SLICES = 25


@dataclass(frozen=True)
class CAETrainConfig:
    batch_size: int = 128
    lr_pretrain: float = 1e-4
    epochs_pretrain: int = 200
    lr_finetune: float = 1e-6
    epochs_finetune: int = 50
    val_fraction: float = 0.2
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size <= 0 or self.lr_pretrain < 0 or self.lr_finetune < 0:
            raise ValueError("CAE training settings must be positive")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be non-negative")


class CAEEncoder(Module):
    """Five (conv 3x3 + ReLU + 2x2 max-pool) stages, then a linear bottleneck."""

    def __init__(self, plan: CAEPlan, rng: np.random.Generator, dtype=np.float32):
        self.plan = plan
        chans = (1,) + tuple(plan.channels)
        self.convs = [Conv2D(chans[i], chans[i + 1], 3, rng, padding=(1, 1), dtype=dtype)
                      for i in range(len(plan.channels))]
        self.fc = Linear(plan.channels[-1] * plan.grid**2, plan.bottleneck, rng, dtype=dtype)

    def features(self, x: Tensor) -> Tensor:
        """Pre-bottleneck feature map (n, C5, grid, grid)."""
        for conv in self.convs:
            x = T.max_pool2x2(T.relu(conv(x)))
        return x

    def forward(self, x: Tensor) -> Tensor:
        x = _as_batch(x, self.plan.input_side)
        f = self.features(x)
        return self.fc(f.reshape(f.shape[0], -1))


class CAEDecoder(Module):
    """Linear expansion to the bottleneck grid, then five (2x upsample + conv) stages."""

    def __init__(self, plan: CAEPlan, rng: np.random.Generator, dtype=np.float32):
        self.plan = plan
        rev = tuple(reversed(plan.channels))
        outs = rev[1:] + (1,)
        self.fc = Linear(plan.bottleneck, rev[0] * plan.grid**2, rng, dtype=dtype)
        self.convs = [Conv2D(rev[i], outs[i], 3, rng, padding=(1, 1), dtype=dtype) for i in range(len(rev))]

    def forward(self, z: Tensor) -> Tensor:
        g, c = self.plan.grid, self.plan.channels[-1]
        x = T.relu(self.fc(z)).reshape(z.shape[0], c, g, g)
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(T.upsample2x(x))
            if i < last:
                x = T.relu(x)
        return x


class CAE(Module):
    def __init__(self, plan: CAEPlan, rng: np.random.Generator, dtype=np.float32):
        self.plan = plan
        self.encoder = CAEEncoder(plan, rng, dtype)
        self.decoder = CAEDecoder(plan, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))

    def finetune_parameters(self) -> list[tuple[str, Tensor]]:
        """Bottleneck FCs plus the convolutions directly on either side of them."""
        keep = ("encoder.fc.", f"encoder.convs.{len(self.encoder.convs) - 1}.", "decoder.fc.", "decoder.convs.0.")
        return [(n, p) for n, p in self.named_parameters() if n.startswith(keep)]


def _as_batch(x, side: int) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1:] != (1, side, side):
        raise ShapeError(f"CAE expects (1, {side}, {side}) slices, got {x.shape}")
    return x


def cae_encode(enc: CAEEncoder, slice_: Tensor) -> Tensor:
    """(1, S, S) slice -> bottleneck vector."""
    if np.ndim(slice_.data if isinstance(slice_, Tensor) else slice_) != 3:
        raise ShapeError("cae_encode takes a single (1, S, S) slice")
    z = enc(slice_)
    return z.reshape(z.shape[-1])


def cae_reconstruct(enc: CAEEncoder, dec: CAEDecoder, slice_: Tensor) -> Tensor:
    x = slice_ if isinstance(slice_, Tensor) else Tensor(np.asarray(slice_, dtype=enc.dtype))
    out = dec(enc(x))
    return out.reshape(x.shape)


def encode_volume(enc: CAEEncoder, slices) -> Tensor:
    """Stack of 1..25 slices -> (k, bottleneck), rows in slice order."""
    k = len(slices)
    if not 1 <= k <= MAX_SLICES:
        raise ValueError(f"encode_volume takes 1..{MAX_SLICES} slices, got {k}")
    arr = np.stack([s.data if isinstance(s, Tensor) else np.asarray(s) for s in slices]).astype(enc.dtype)
    return enc(Tensor(arr))


def encode_array(enc: CAEEncoder, slices: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-only encoding of an (n, 1, S, S) array in chunks."""
    out = []
    with no_grad():
        for i in range(0, len(slices), batch_size):
            out.append(enc(Tensor(slices[i:i + batch_size].astype(enc.dtype, copy=False))).data)
    return np.concatenate(out) if out else np.zeros((0, enc.plan.bottleneck), dtype=enc.dtype)


def reconstruction_mse(model: CAE, data: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(data), batch_size):
            xb = data[i:i + batch_size].astype(model.dtype, copy=False)
            total += float(mse(model(Tensor(xb)), xb).data) * len(xb)
    return total / max(len(data), 1)


def _fit(model: CAE, params, data: np.ndarray, lr: float, epochs: int, batch_size: int,
         rng: np.random.Generator, val: np.ndarray | None, phase: str,
         log: Callable[[dict], None] | None, max_steps: int | None):
    opt = Adam([p for _, p in params], lr=lr)
    history = []
    best = (reconstruction_mse(model, val), model.state_dict()) if val is not None else None
    if val is not None:
        history.append({"epoch": 0, "loss": None, "val_loss": best[0]})
    steps = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        total, seen = 0.0, 0
        for i in range(0, len(order), batch_size):
            xb = data[order[i:i + batch_size]].astype(model.dtype, copy=False)
            opt.zero_grad()
            loss = mse(model(Tensor(xb)), xb)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite reconstruction loss at epoch {epoch}", phase)
            loss.backward()
            opt.step()
            total += value * len(xb)
            seen += len(xb)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        rec = {"epoch": epoch, "phase": phase, "loss": total / seen, "lr": lr}
        if val is not None:
            rec["val_loss"] = reconstruction_mse(model, val)
            if rec["val_loss"] < best[0]:
                best = (rec["val_loss"], model.state_dict())
        history.append(rec)
        if log:
            log(dict(rec, metric=rec.get("val_loss")))
        if max_steps is not None and steps >= max_steps:
            break
    if best is not None:
        model.load_state_dict(best[1])
    return history


def cae_pretrain(model: CAE, dataset: np.ndarray, cfg: CAETrainConfig, seed: int,
                 log: Callable[[dict], None] | None = None):
    """Adam on reconstruction MSE; the best epoch on a held-out split is kept.

    ``dataset`` is (n, 1, S, S).  Returns ``(model, history)``.
    """
    if len(dataset) == 0:
        raise ValueError("cae_pretrain needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(cfg.val_fraction * len(dataset)))
    if len(dataset) - n_val < 1:
        n_val = 0
    val = dataset[order[:n_val]] if n_val else dataset
    train = dataset[order[n_val:]]
    history = _fit(model, model.named_parameters(), train, cfg.lr_pretrain, cfg.epochs_pretrain,
                   cfg.batch_size, rng, val, "cae-pretrain", log, cfg.max_steps)
    return model, history


def cae_finetune(model: CAE, dataset: np.ndarray, cfg: CAETrainConfig, seed: int,
                 log: Callable[[dict], None] | None = None) -> CAE:
    """Update only :meth:`CAE.finetune_parameters`; every other tensor stays bit-identical."""
    if len(dataset) == 0:
        raise ValueError("cae_finetune needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    _fit(model, model.finetune_parameters(), dataset, cfg.lr_finetune, cfg.epochs_finetune,
         cfg.batch_size, rng, None, "cae-finetune", log, None)
    return model
