"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward

# Coordinates whose true gradient is ~0 carry pure rounding noise from the
# difference quotient; the denominator floor keeps that noise from reading as
# a relative error of order one.
DENOM_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> float:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric) + 1e-12, floor)
    return float((diff / denom).max()) if diff.size else 0.0


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    saved = x.grad
    x.grad = None
    try:
        y = f(x)
        if not y.requires_grad:
            return np.zeros_like(x.data)
        grads = backward(y)
        return np.asarray(grads.get(x, np.zeros_like(x.data)), dtype=np.float64)
    finally:
        x.grad = saved
        x.requires_grad = was


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor.  ``x`` may be a parameter that ``f``
    reads through a closure: entries are perturbed in place.
    """
    a = analytic_gradient(f, x)
    n = numeric_gradient(f, x, eps)
    return relative_error(a, n)


def check_parameters(loss_fn: Callable[[], Tensor], params: Iterable[tuple[str, Tensor]],
                     eps: float = 1e-5) -> dict[str, float]:
    """Gradient-check every named parameter of a zero-argument loss closure."""
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    report = {}
    for name, p in params:
        analytic = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        numeric = numeric_gradient(lambda _: loss_fn(), p, eps)
        report[name] = relative_error(analytic, numeric)
        p.grad = None
    return report


# ---------------------------------------------------------------------------
# Block suite
# ---------------------------------------------------------------------------

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return (y * Tensor(w)).sum()


def _check_block(forward: Callable[[Tensor], Tensor], x: np.ndarray, module, rng: np.random.Generator) -> float:
    """Worst relative error over the input and every parameter of ``module``."""
    x = Tensor(np.asarray(x, dtype=np.float64))
    w = rng.standard_normal(forward(x).shape)
    errs = [finite_diff_check(lambda t: _weighted_sum(forward(t), w), x)]
    if module is not None:
        errs.extend(check_parameters(lambda: _weighted_sum(forward(x), w), module.named_parameters()).values())
    return max(errs)


def _suite(rng: np.random.Generator) -> dict[str, tuple[Callable[[], float], float]]:
    from . import tensor as T
    from .attention import MSAParams
    from .caet import EncoderBlock
    from .fusion import FusionHead
    from .nn import Conv2D, LayerNorm, Linear
    from .plans import FusionPlan
    from .swin import PatchMerging, SwinBlock

    f64 = np.float64

    def linear():
        m = Linear(5, 4, rng, dtype=f64)
        m.bias.data[...] = rng.standard_normal(4)
        return _check_block(m, rng.standard_normal((3, 5)), m, rng)

    def conv():
        m = Conv2D(2, 3, 3, rng, padding=(1, 1), dtype=f64)
        return _check_block(m, rng.standard_normal((2, 2, 5, 5)), m, rng)

    def pool():
        # distinct values keep the argmax away from ties
        x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) / 10.0
        return _check_block(T.max_pool2x2, x, None, rng)

    def layernorm():
        m = LayerNorm(6, dtype=f64)
        m.gamma.data[...] = rng.standard_normal(6)
        m.beta.data[...] = rng.standard_normal(6)
        return _check_block(m, rng.standard_normal((4, 6)), m, rng)

    def softmax():
        return _check_block(lambda t: T.softmax(t, axis=-1), rng.standard_normal((3, 5)), None, rng)

    def gelu():
        return _check_block(T.gelu, 2 * rng.standard_normal((4, 5)), None, rng)

    def msa():
        m = MSAParams(6, 2, 3, 4, rng, dtype=f64)
        return _check_block(m, rng.standard_normal((2, 5, 6)), m, rng)

    def encoder_block():
        m = EncoderBlock(6, 2, 3, 3, 8, rng, dtype=f64)
        _jitter_norms(m, rng)
        valid = np.array([[True] * 5, [True] * 3 + [False] * 2])
        from .attention import key_padding_mask
        mask = key_padding_mask(valid)
        return _check_block(lambda t: m(t, mask), rng.standard_normal((2, 5, 6)), m, rng)

    def swin_block():
        m = SwinBlock(4, 2, 4, 2, True, rng, mlp_ratio=2, dtype=f64)
        m.rel_bias.data[...] = 0.1 * rng.standard_normal(m.rel_bias.shape)
        _jitter_norms(m, rng)
        return _check_block(m, rng.standard_normal((1, 4, 4, 4)), m, rng)

    def patch_merge():
        m = PatchMerging(3, rng, dtype=f64)
        _jitter_norms(m, rng)
        return _check_block(m, rng.standard_normal((1, 4, 4, 3)), m, rng)

    def fusion_head():
        m = FusionHead(6, FusionPlan(hidden=(5, 4, 3), dropout=0.1), rng, dtype=f64)
        m.eval()
        for layer in m.layers:
            layer.bias.data[...] = 0.1 * rng.standard_normal(layer.bias.shape)
        return _check_block(m, rng.standard_normal((3, 6)), m, rng)

    return {
        "linear": (linear, PRIMITIVE_TOL), "conv": (conv, PRIMITIVE_TOL), "maxpool": (pool, PRIMITIVE_TOL),
        "layernorm": (layernorm, PRIMITIVE_TOL), "softmax": (softmax, PRIMITIVE_TOL), "gelu": (gelu, PRIMITIVE_TOL),
        "msa": (msa, BLOCK_TOL), "encoder_block": (encoder_block, BLOCK_TOL), "swin_block": (swin_block, BLOCK_TOL),
        "patch_merge": (patch_merge, BLOCK_TOL), "fusion_head": (fusion_head, BLOCK_TOL),
    }


def _jitter_norms(module, rng: np.random.Generator) -> None:
    """Move LayerNorm affine params off (1, 0) so their gradients are exercised generically."""
    for name, p in module.named_parameters():
        if name.endswith(("gamma", "beta")):
            p.data[...] += 0.2 * rng.standard_normal(p.shape)


BLOCKS = ("linear", "conv", "maxpool", "layernorm", "softmax", "gelu", "msa", "encoder_block", "swin_block",
          "patch_merge", "fusion_head")


def run_suite(seed: int = 0, only: Iterable[str] | None = None) -> list[tuple[str, float, float]]:
    """Returns ``(block, max_rel_err, tolerance)`` for each block, in a fixed order."""
    suite = _suite(np.random.default_rng(seed))
    names = list(only) if only else list(BLOCKS)
    unknown = [n for n in names if n not in suite]
    if unknown:
        raise ValueError(f"unknown blocks {unknown}; choose from {list(BLOCKS)}")
    return [(n, suite[n][0](), suite[n][1]) for n in names]
