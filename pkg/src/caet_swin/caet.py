"""Inter-slice transformer path over CAE slice embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import MSAParams, key_padding_mask
from .nn import AGGREGATIONS, LayerNorm, Linear, Module, aggregate
from .plans import CAETPlan
from .tensor import ShapeError, Tensor


@dataclass
class PaddedSequence:
    features: Tensor  # (max_len, d), rows >= valid_count are zero
    valid_count: int
    mask: np.ndarray  # bool (max_len,)


def pad_sequence(rows, max_len: int = 25) -> PaddedSequence:
    rows = rows if isinstance(rows, Tensor) else Tensor(np.asarray(rows, dtype=np.float32))
    if rows.ndim != 2:
        raise ShapeError(f"pad_sequence expects (k, d), got {rows.shape}")
    k, d = rows.shape
    if not 1 <= k <= max_len:
        raise ValueError(f"sequence length must be in 1..{max_len}, got {k}")
    if k < max_len:
        feats = T.concat([rows, Tensor(np.zeros((max_len - k, d), dtype=rows.dtype))], axis=0)
    else:
        feats = rows
    return PaddedSequence(feats, k, np.arange(max_len) < k)


def pad_batch(seqs: list[np.ndarray], max_len: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Array form for training: (B, max_len, d) features and (B, max_len) masks."""
    d = seqs[0].shape[1]
    out = np.zeros((len(seqs), max_len, d), dtype=seqs[0].dtype)
    valid = np.zeros((len(seqs), max_len), dtype=bool)
    for i, s in enumerate(seqs):
        if not 1 <= len(s) <= max_len:
            raise ValueError(f"sequence length must be in 1..{max_len}, got {len(s)}")
        out[i, :len(s)] = s
        valid[i, :len(s)] = True
    return out, valid


class PositionEmbedding(Module):
    def __init__(self, max_len: int, d: int, dtype=np.float32):
        self.table = T.parameter(np.zeros((max_len, d)), dtype)


class EncoderBlock(Module):
    """Pre-norm block: y = x + MSA(LN(x)); out = y + MLP(LN(y))."""

    def __init__(self, d_model: int, heads: int, d_k: int, d_v: int, mlp_hidden: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.msa = MSAParams(d_model, heads, d_k, d_v, rng, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.fc1 = Linear(d_model, mlp_hidden, rng, dtype=dtype)
        self.fc2 = Linear(mlp_hidden, d_model, rng, dtype=dtype)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        y = x + self.msa(self.ln1(x), mask)
        return y + self.fc2(T.gelu(self.fc1(self.ln2(y))))


def encoder_block_forward(b: EncoderBlock, x: Tensor, mask=None) -> Tensor:
    return b(x, mask)


class CAETHead(Module):
    def __init__(self, mode: str, seq_len: int, d_model: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        if mode not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {mode!r}")
        self.mode = mode
        agg_dim = seq_len * d_model if mode == "Flatten" else d_model
        self.fc = Linear(agg_dim, out_dim, rng, dtype=dtype)

    def forward(self, x: Tensor, valid=None) -> Tensor:
        if self.mode == "Flatten" and valid is not None:
            # After the encoder blocks the padded rows hold whatever attention
            # made of them; reset them to zero so Flatten sees true zero padding.
            keep = np.broadcast_to(np.asarray(valid, dtype=bool)[..., None], x.shape)
            x = T.mul(x, Tensor(keep.astype(x.dtype)))
        return T.relu(self.fc(aggregate(x, self.mode, valid)))


class CAETPath(Module):
    def __init__(self, plan: CAETPlan, rng: np.random.Generator, aggregation: str = "GMP",
                 dtype=np.float32):
        self.plan = plan
        self.pe = PositionEmbedding(plan.max_slices, plan.d_model, dtype)
        self.blocks = [EncoderBlock(plan.d_model, plan.heads, plan.d_k, plan.d_v, plan.mlp_hidden, rng, dtype)
                       for _ in range(plan.depth)]
        self.head = CAETHead(aggregation, plan.max_slices, plan.d_model, plan.out_dim, rng, dtype)

    @property
    def aggregation(self) -> str:
        return self.head.mode

    def forward(self, features, valid) -> Tensor:
        """(B, L, d) padded embeddings with (B, L) validity -> (B, out_dim)."""
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=self.dtype))
        valid = np.asarray(valid, dtype=bool)
        if x.shape[-2:] != (self.plan.max_slices, self.plan.d_model):
            raise ShapeError(f"expected (..., {self.plan.max_slices}, {self.plan.d_model}), got {x.shape}")
        mask = key_padding_mask(valid)
        x = x + self.pe.table
        for block in self.blocks:
            x = block(x, mask)
        return self.head(x, valid)


def caet_forward(seq: PaddedSequence, pe: PositionEmbedding, blocks: list[EncoderBlock],
                 head: CAETHead) -> Tensor:
    """Single padded sequence -> out_dim feature vector (non-negative)."""
    if len(blocks) != 3:
        raise ValueError(f"the temporal path stacks 3 encoder blocks, got {len(blocks)}")
    mask = key_padding_mask(seq.mask)
    x = seq.features + pe.table
    for block in blocks:
        x = block(x, mask)
    return head(x, seq.mask)
