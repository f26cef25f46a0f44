"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output through :func:`_record`, which
stores the parent tensors and a backward rule mapping the output gradient to
one gradient per parent.  :func:`backward` orders the recorded graph
topologically (the tape) and pushes gradients from the loss to the leaves.

Broadcasting is deliberately narrow: equal shapes, a scalar against a tensor,
or a trailing-axis operand such as a bias vector.  Constant (non-learnable)
masks go through :func:`add_constant`, which may broadcast freely because no
gradient is needed on the constant side.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_TYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


# Set to False to skip the per-op finiteness scan (e.g. for profiling).
CHECK_FINITE = True


def _record(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from a root, in topological order.

    Each entry is a non-leaf tensor; its parents always appear earlier in
    :attr:`nodes` or are leaves.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.is_leaf:
                if node.requires_grad:
                    self.leaves.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Gradients are *added* into ``leaf.grad`` so repeated calls accumulate;
    training loops clear them first.  Returns the leaf -> gradient map for
    this call only.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached: it does not depend on any requires_grad tensor")
    tape = tape or Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    if loss.is_leaf and loss.requires_grad and loss not in result:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        result[loss] = np.ones_like(loss.data)
    return result


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _reducer(shape: tuple[int, ...], out_shape: tuple[int, ...]) -> Callable[[np.ndarray], np.ndarray]:
    """Map an output-shaped gradient back to an operand of ``shape``."""
    if shape == out_shape:
        return lambda g: g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return lambda g: np.asarray(g.sum()).reshape(shape)
    lead = tuple(range(len(out_shape) - len(shape)))
    return lambda g: g.sum(axis=lead)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if b.size == 1 and b.ndim <= len(sa):
        return sa
    if a.size == 1 and a.ndim <= len(sb):
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_shape = _check_broadcast(a, b, "add")
    ra, rb = _reducer(a.shape, out_shape), _reducer(b.shape, out_shape)
    return _record(a.data + b.data, (a, b), lambda g: (ra(g), rb(g)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_shape = _check_broadcast(a, b, "sub")
    ra, rb = _reducer(a.shape, out_shape), _reducer(b.shape, out_shape)
    return _record(a.data - b.data, (a, b), lambda g: (ra(g), -rb(g)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_shape = _check_broadcast(a, b, "mul")
    ra, rb = _reducer(a.shape, out_shape), _reducer(b.shape, out_shape)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (ra(g * bd), rb(g * ad)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_constant(x: Tensor, const: np.ndarray) -> Tensor:
    """``x + const`` where ``const`` carries no gradient (masks, fixed biases).

    ``const`` may broadcast against ``x`` under numpy rules but must not
    change the shape of the result.
    """
    const = np.asarray(const, dtype=x.dtype)
    out = x.data + const
    if out.shape != x.shape:
        raise ShapeError(f"constant of shape {const.shape} would broadcast {x.shape} to {out.shape}")
    return _record(out, (x,), lambda g: (g,), "add_constant")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d/dx GELU given ``t = tanh(c (x + a x^3))``."""
    c = x.dtype.type(_GELU_C)
    x2 = x * x
    return 0.5 * (1 + t) + (0.5 * c) * x * (1 - t * t) * (1 + (3 * _GELU_A) * x2)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    t = np.tanh(c * xd * (1 + _GELU_A * (xd * xd)))
    y = 0.5 * xd * (1 + t)
    return _record(y, (x,), lambda g: (g * _gelu_grad(xd, t),), "gelu")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, gelu."""
    fns = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu, "gelu": gelu}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](*args, **kwargs)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across ``a``'s leading axes or has
    exactly ``a``'s leading axes.
    """
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), rule, "matmul")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    advanced = _is_advanced(idx)

    def rule(g):
        full = np.zeros(src_shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _record(np.array(x.data[idx]), (x,), rule, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    data = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record(data, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    data = np.stack([t.data for t in xs], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record(data, xs, rule, "stack")


def roll(x: Tensor, shift, axis) -> Tensor:
    """Cyclic shift (torus roll); the inverse is ``roll`` with negated shift."""
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return _record(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, neg, axis),), "roll")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(y), (x,), rule, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient goes to the first maximal element."""
    xd = x.data
    idx = np.argmax(xd, axis=axis)
    y = np.take_along_axis(xd, np.expand_dims(idx, axis), axis).squeeze(axis)

    def rule(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _record(y, (x,), rule, "max")


def masked_max(x: Tensor, valid: np.ndarray, axis: int) -> Tensor:
    """Max along ``axis`` over entries where ``valid`` is true.

    ``valid`` broadcasts against ``x``.  A reduction slice with no valid entry
    raises ``ValueError``.
    """
    xd = x.data
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), xd.shape)
    if not valid.any(axis=axis).all():
        raise ValueError("mask excludes every row of a reduction")
    filled = np.where(valid, xd, -np.inf)
    idx = np.argmax(filled, axis=axis)
    y = np.take_along_axis(xd, np.expand_dims(idx, axis), axis).squeeze(axis)

    def rule(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _record(y, (x,), rule, "masked_max")


# ---------------------------------------------------------------------------
# Normalised exponentials
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), rule, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def rule(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(y, (x,), rule, "log_softmax")


# ---------------------------------------------------------------------------
# Fused layer kernels
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with biased variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def rule(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + beta.data, (x, gamma, beta), rule, "layer_norm")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation, ``x`` is (n, c, h, w), ``kernel`` is (o, c, kh, kw)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    sy, sx = stride
    py, px = padding
    if kh > h + 2 * py or kw > w + 2 * px:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * py}x{w + 2 * px}")
    oh = (h + 2 * py - kh) // sy + 1
    ow = (w + 2 * px - kw) // sx + 1
    # channel-last padded input; one contiguous slice per kernel offset
    xp = np.zeros((n, h + 2 * py, w + 2 * px, c), dtype=x.dtype)
    xp[:, py:py + h, px:px + w, :] = x.data.transpose(0, 2, 3, 1)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.stack([xp[:, i:i + sy * oh:sy, j:j + sx * ow:sx, :] for i, j in offsets], axis=3)
    cols = cols.reshape(n * oh * ow, kh * kw * c)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gcols = (gm @ kmat).reshape(n, oh, ow, kh * kw, c)
        gxp = np.zeros_like(xp)
        for t, (i, j) in enumerate(offsets):
            gxp[:, i:i + sy * oh:sy, j:j + sx * ow:sx, :] += gcols[:, :, :, t, :]
        gx = gxp[:, py:py + h, px:px + w, :].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gk
        return gx, gk, gm.sum(axis=0)

    return _record(np.ascontiguousarray(out), parents, rule, "conv2d")


def max_pool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling on (..., h, w); ties go to the first
    element in row-major block order."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], -1)[..., 0]

    def rule(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], -1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(*lead, h, w),)

    return _record(y, (x,), rule, "max_pool2x2")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling on the last two axes."""
    *lead, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def rule(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _record(y, (x,), rule, "upsample2x")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1 - rate)."""
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def iter_leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.is_leaf and t.requires_grad]
