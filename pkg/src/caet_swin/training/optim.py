"""Adam and AdamW with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


# Same fields; the decay is what changes meaning (decoupled instead of L2).
AdamWState = AdamState


def _ensure_moments(state: AdamState, params: Sequence[Tensor]) -> None:
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")


def _adam(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None], decoupled: bool) -> None:
    _ensure_moments(state, params)
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if decoupled and state.weight_decay:
            p.data -= p.data.dtype.type(state.lr * state.weight_decay) * p.data
        elif state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        delta = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= delta.astype(p.dtype, copy=False)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> None:
    """Bias-corrected Adam; ``weight_decay`` (if any) acts as an L2 term."""
    _adam(state, params, grads, decoupled=False)


def adamw_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> None:
    """AdamW: shrink by ``lr * weight_decay`` first, then the Adam update."""
    _adam(state, params, grads, decoupled=True)


class Adam:
    decoupled = False

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        _adam(self.state, self.params, [p.grad for p in self.params], self.decoupled)


class AdamW(Adam):
    decoupled = True
