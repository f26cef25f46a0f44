"""Late fusion of the temporal (CAET) and spatial (SWin) features."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cae import CAEEncoder, encode_array
from .caet import CAETPath, pad_batch
from .nn import Dropout, Linear, Module
from .plans import FusionPlan, ModelPlan
from .swin import SwinPath
from .tensor import ShapeError, Tensor, no_grad


class FusionHead(Module):
    """Linear stack in -> 512 -> 128 -> 32 -> 2 with ReLU and dropout between layers."""

    def __init__(self, in_dim: int, plan: FusionPlan, rng: np.random.Generator, dtype=np.float32):
        dims = (in_dim,) + tuple(plan.hidden) + (plan.n_classes,)
        self.in_dim = in_dim
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype=dtype) for i in range(len(dims) - 1)]
        self.drop = Dropout(plan.dropout)

    def logits(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"fusion head expects {self.in_dim} features, got {x.shape[-1]}")
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = self.drop(T.relu(x), rng)
        return x

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return T.softmax(self.logits(x, rng), axis=-1)


class AblationHead(Module):
    """One linear layer to two classes, used to train a path on its own.

    Weights start at zero so training begins from uniform probabilities
    rather than from whatever scale the untrained path happens to emit.
    """

    def __init__(self, in_dim: int, rng: np.random.Generator, n_classes: int = 2, dtype=np.float32):
        self.in_dim = in_dim
        self.fc = Linear(in_dim, n_classes, rng, dtype=dtype)
        self.fc.weight.data[...] = 0

    def logits(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"head expects {self.in_dim} features, got {x.shape[-1]}")
        return self.fc(x)

    def forward(self, x: Tensor) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)


def fuse_forward(t, s, head: FusionHead) -> Tensor:
    """Concatenate [temporal, spatial] and classify.  Accepts vectors or row batches."""
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=head.dtype))
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=head.dtype))
    if t.shape[-1] + s.shape[-1] != head.in_dim:
        raise ShapeError(f"{t.shape[-1]} + {s.shape[-1]} features do not match head input {head.in_dim}")
    return head(T.concat([t, s], axis=-1))


def ablation_predict(path_feats, head: AblationHead) -> Tensor:
    x = path_feats if isinstance(path_feats, Tensor) else Tensor(np.asarray(path_feats, dtype=head.dtype))
    return head(x)


def decide(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; an exact tie goes to class 0."""
    probs = np.asarray(probs)
    return (probs[..., 1] > probs[..., 0]).astype(np.int64)


class CAETSWinModel(Module):
    def __init__(self, plan: ModelPlan, rng: np.random.Generator, aggregation: str = "GMP",
                 dtype=np.float32):
        self.plan = plan
        if plan.cae.bottleneck != plan.caet.d_model:
            raise ValueError("CAE bottleneck must equal the CAET model width")
        self.cae = CAEEncoder(plan.cae, rng, dtype)
        self.caet = CAETPath(plan.caet, rng, aggregation, dtype)
        self.swin = SwinPath(plan.swin, rng, dtype)
        self.fusion = FusionHead(plan.fusion_in, plan.fusion, rng, dtype)

    @classmethod
    def assemble(cls, plan: ModelPlan, cae: CAEEncoder, caet: CAETPath, swin: SwinPath,
                 fusion: FusionHead) -> CAETSWinModel:
        """Wrap independently trained parts without re-initialising anything."""
        if fusion.in_dim != caet.plan.out_dim + swin.plan.out_dim:
            raise ShapeError(f"fusion input {fusion.in_dim} != {caet.plan.out_dim} + {swin.plan.out_dim}")
        m = cls.__new__(cls)
        m.plan, m.cae, m.caet, m.swin, m.fusion = plan, cae, caet, swin, fusion
        return m

    def temporal_features(self, caet_slices: list[np.ndarray]) -> np.ndarray:
        """Per-volume (1..25, 1, S, S) slice stacks -> (B, 32) features, inference only."""
        seqs = [encode_array(self.cae, np.asarray(v, dtype=self.dtype)) for v in caet_slices]
        feats, valid = pad_batch(seqs, self.plan.caet.max_slices)
        with no_grad():
            return self.caet(feats, valid).data

    def spatial_features(self, swin_slices: list[np.ndarray]) -> np.ndarray:
        with no_grad():
            return self.swin.forward_volumes([np.asarray(v, dtype=self.dtype) for v in swin_slices]).data

    def predict_proba(self, caet_slices, swin_slices) -> np.ndarray:
        t = self.temporal_features(caet_slices)
        s = self.spatial_features(swin_slices)
        with no_grad():
            return fuse_forward(t, s, self.fusion).data


def model_predict(m: CAETSWinModel, caet_slices: np.ndarray, swin_slices: np.ndarray):
    """One volume's model inputs -> ``(probs, label)``; runs in inference mode."""
    was_training = m.training
    m.eval()
    try:
        probs = m.predict_proba([caet_slices], [swin_slices])[0]
    finally:
        m.train(was_training)
    return probs, int(decide(probs))
