"""Scaled dot-product attention and multi-head self-attention.

Masks are additive: 0 where a key is visible, ``-LARGE`` where it is hidden,
added to the scores before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, glorot_uniform, trunc_normal
from .tensor import ShapeError, Tensor

LARGE = 1e9


@dataclass(frozen=True)
class AttentionHeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @property
    def d_k(self) -> int:
        return self.wq.shape[1]

    @property
    def d_v(self) -> int:
        return self.wv.shape[1]


def _check_mask(mask: np.ndarray) -> None:
    if (mask <= -LARGE / 2).all(axis=-1).any():
        raise ValueError("attention mask hides every key for some query (no valid keys)")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                                 bias: Tensor | None = None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k) + bias + mask) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d_k))
    if bias is not None:
        scores = T.add(scores, bias)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ShapeError(f"mask {mask.shape} does not match scores {scores.shape}")
        _check_mask(mask)
        scores = T.add_constant(scores, mask)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


class MSAParams(Module):
    """Projections for ``h`` heads, stored fused: head ``i`` owns columns
    ``i*d_k:(i+1)*d_k`` of ``wq``/``wk`` and ``i*d_v:(i+1)*d_v`` of ``wv``."""

    def __init__(self, d_model: int, h: int, d_k: int, d_v: int | None, rng: np.random.Generator,
                 init: str = "glorot", dtype=np.float32):
        d_v = d_k if d_v is None else d_v
        if d_k <= 0 or d_v <= 0 or h <= 0:
            raise ValueError("d_k, d_v and h must be positive")
        self.d_model, self.h, self.d_k, self.d_v = d_model, h, d_k, d_v
        if init == "trunc_normal":
            mk = lambda shape: trunc_normal(rng, shape, dtype=dtype)  # noqa: E731
        else:
            mk = lambda shape: glorot_uniform(rng, shape[0], shape[1], shape, dtype)  # noqa: E731
        self.wq = mk((d_model, h * d_k))
        self.wk = mk((d_model, h * d_k))
        self.wv = mk((d_model, h * d_v))
        self.wo = mk((h * d_v, d_model))

    def head(self, i: int) -> AttentionHeadParams:
        """Column views of head ``i`` (share memory with the fused matrices)."""
        qk = slice(i * self.d_k, (i + 1) * self.d_k)
        vs = slice(i * self.d_v, (i + 1) * self.d_v)
        return AttentionHeadParams(Tensor(self.wq.data[:, qk]), Tensor(self.wk.data[:, qk]),
                                   Tensor(self.wv.data[:, vs]))

    def forward(self, x: Tensor, mask=None, bias=None) -> Tensor:
        return multi_head_self_attention(x, self, mask, bias)


def _split_heads(x: Tensor, h: int) -> Tensor:
    # (..., n, h*d) -> (..., h, n, d)
    *lead, n, hd = x.shape
    x = x.reshape(*lead, n, h, hd // h)
    return T.swapaxes(x, -2, -3)


def multi_head_self_attention(x: Tensor, p: MSAParams, mask=None, bias: Tensor | None = None) -> Tensor:
    """Concat(head_1..head_h) W_O with head_i = Attention(X Wq_i, X Wk_i, X Wv_i).

    ``x`` is (..., n, d_model).  ``mask`` is (n, n) or carries extra leading
    axes (e.g. per batch item or per window); it is broadcast over heads.
    ``bias`` is an optional learnable (h, n, n) score offset.
    """
    if x.shape[-1] != p.d_model:
        raise ShapeError(f"input last dim {x.shape[-1]} != d_model {p.d_model}")
    *lead, n, d = x.shape
    x2 = x.reshape(-1, d)
    q = _split_heads(T.matmul(x2, p.wq).reshape(*lead, n, p.h * p.d_k), p.h)
    k = _split_heads(T.matmul(x2, p.wk).reshape(*lead, n, p.h * p.d_k), p.h)
    v = _split_heads(T.matmul(x2, p.wv).reshape(*lead, n, p.h * p.d_v), p.h)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.ndim >= 3:
            mask = mask[..., None, :, :]
    heads = scaled_dot_product_attention(q, k, v, mask, bias)
    # (..., h, n, d_v) -> (..., n, h*d_v), heads concatenated in order
    cat = T.swapaxes(heads, -2, -3).reshape(-1, p.h * p.d_v)
    return T.matmul(cat, p.wo).reshape(*lead, n, p.d_model)


def build_padding_mask(valid) -> np.ndarray:
    """(n, n) additive mask hiding invalid keys from every query."""
    valid = np.asarray(valid, dtype=bool)
    if valid.ndim != 1:
        raise ValueError("valid must be a 1-D boolean sequence")
    if not valid.any():
        raise ValueError("padding mask needs at least one valid position")
    row = np.where(valid, 0.0, -LARGE)
    return np.tile(row, (valid.size, 1))


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """Batched form: (..., n) validity -> (..., n, n) additive mask."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise ValueError("padding mask needs at least one valid position per sequence")
    row = np.where(valid, 0.0, -LARGE)[..., None, :]
    return np.broadcast_to(row, valid.shape + (valid.shape[-1],)).copy()
