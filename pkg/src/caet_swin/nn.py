"""Parameterised layers shared by every model path."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

AGGREGATIONS = ("GMP", "GAP", "Flatten")


# ---------------------------------------------------------------------------
# Initialisers
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-limit, limit, size=shape), dtype)


def he_uniform(rng: np.random.Generator, fan_in: int, shape, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return T.parameter(rng.uniform(-limit, limit, size=shape), dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2
    return T.parameter(out * std, dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return T.parameter(np.zeros(shape), dtype)


def ones(shape, dtype=np.float32) -> Tensor:
    return T.parameter(np.ones(shape), dtype)


# ---------------------------------------------------------------------------
# Module base
# ---------------------------------------------------------------------------


class Module:
    """Container of named parameters and sub-modules.

    Parameters are any ``requires_grad`` tensor attribute; sub-modules may
    also sit in list attributes.  Names are dotted attribute paths, which is
    what checkpoints store.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        return next(iter(self.parameters())).dtype

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, init: str = "glorot", dtype=np.float32):
        if in_features <= 0 or out_features <= 0:
            raise ValueError("Linear dims must be positive")
        self.in_features = in_features
        self.out_features = out_features
        if init == "trunc_normal":
            self.weight = trunc_normal(rng, (in_features, out_features), dtype=dtype)
        else:
            self.weight = glorot_uniform(rng, in_features, out_features, (in_features, out_features), dtype)
        self.bias = zeros(out_features, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got shape {x.shape}")
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.in_features) if x.ndim != 2 else x
        y = T.matmul(x2, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, self.out_features) if x.ndim != 2 else y


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class Conv2D(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int | tuple[int, int],
                 rng: np.random.Generator, stride=(1, 1), padding=(0, 0), dtype=np.float32):
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        if kh < 1 or kw < 1 or min(stride) < 1:
            raise ValueError("kernel and stride must be >= 1")
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.kernel = he_uniform(rng, in_ch * kh * kw, (out_ch, in_ch, kh, kw), dtype)
        self.bias = zeros(out_ch, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


def conv2d_forward(layer: Conv2D, x: Tensor) -> Tensor:
    return layer(x)


class MaxPool2D(Module):
    window = (2, 2)
    stride = (2, 2)

    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2x2(x)


def maxpool2d_forward(x: Tensor) -> Tensor:
    return T.max_pool2x2(x)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.eps = eps
        self.gamma = ones(dim, dtype)
        self.beta = zeros(dim, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def layernorm_forward(ln: LayerNorm, x: Tensor) -> Tensor:
    return ln(x)


class Dropout(Module):
    def __init__(self, rate: float):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not self.training or self.rate == 0:
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng stream")
        return T.dropout(x, self.rate, rng)


def dropout_forward(d: Dropout, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
    return d(x, rng)


def aggregate(x: Tensor, mode: str, valid_mask=None) -> Tensor:
    """Pool a (..., seq, d) sequence into (..., d) (or (..., seq*d) for Flatten).

    GMP/GAP only look at rows where ``valid_mask`` is true; Flatten ignores
    the mask and keeps every row, padded ones included.
    """
    if mode not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {mode!r}")
    seq = x.shape[-2]
    if mode == "Flatten":
        return x.reshape(*x.shape[:-2], seq * x.shape[-1])
    if valid_mask is None:
        valid = np.ones(x.shape[:-1], dtype=bool)
    else:
        valid = np.asarray(valid_mask, dtype=bool)
        if valid.shape[-1] != seq:
            raise ShapeError(f"mask length {valid.shape[-1]} != sequence length {seq}")
        valid = np.broadcast_to(valid, x.shape[:-1])
    if not valid.any(axis=-1).all():
        raise ValueError("mask excludes every row")
    if mode == "GMP":
        return T.masked_max(x, valid[..., None], axis=-2)
    w = valid.astype(x.dtype)
    w = w / w.sum(axis=-1, keepdims=True)
    return T.tsum(T.mul(x, Tensor(np.broadcast_to(w[..., None], x.shape).copy())), axis=-2)
