"""Hierarchical shifted-window transformer over nodule patches.

Token grids are channel-last: (..., H, W, C).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import LARGE, MSAParams, multi_head_self_attention
from .nn import LayerNorm, Linear, Module
from .plans import SwinPlan
from .tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# Window geometry
# ---------------------------------------------------------------------------


def window_partition(x: Tensor, m: int) -> Tensor:
    """(..., H, W, C) -> (..., H/m * W/m, m*m, C); windows and tokens row-major."""
    *lead, h, w, c = x.shape
    if h % m or w % m:
        raise ShapeError(f"grid {h}x{w} is not divisible by window {m}")
    nd = len(lead)
    x = x.reshape(*lead, h // m, m, w // m, m, c)
    axes = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
    x = T.transpose(x, axes)
    return x.reshape(*lead, (h // m) * (w // m), m * m, c)


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    *lead, nw, mm, c = windows.shape
    if nw != (h // m) * (w // m) or mm != m * m:
        raise ShapeError(f"windows {windows.shape} do not tile a {h}x{w} grid with m={m}")
    nd = len(lead)
    x = windows.reshape(*lead, h // m, w // m, m, m, c)
    axes = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return T.transpose(x, axes).reshape(*lead, h, w, c)


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Roll the grid by (-s, -s) on the torus; ``cyclic_shift(., -s)`` undoes it."""
    h, w = x.shape[-3], x.shape[-2]
    if not -min(h, w) < s < min(h, w):
        raise ValueError(f"shift {s} out of range for a {h}x{w} grid")
    if s == 0:
        return x
    return T.roll(x, (-s, -s), (-3, -2))


def region_ids(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Label each shifted-grid cell by the band it falls in along each axis.

    Bands are [0, H-m), [H-m, H-s), [H-s, H) (same for columns); cells from
    different bands came from non-adjacent places before the roll.
    """
    ids = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for rs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for cs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            ids[rs, cs] = cnt
            cnt += 1
    return ids


def build_shift_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """(nW, m*m, m*m) additive masks for attention on the shifted grid."""
    if h % m or w % m:
        raise ShapeError(f"grid {h}x{w} is not divisible by window {m}")
    nw = (h // m) * (w // m)
    if s == 0:
        return np.zeros((nw, m * m, m * m))
    ids = region_ids(h, w, m, s)
    win = ids.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(nw, m * m)
    return np.where(win[:, :, None] != win[:, None, :], -LARGE, 0.0)


def relative_position_index(m: int) -> np.ndarray:
    """(m*m, m*m) index into a ((2m-1)^2, heads) bias table by coordinate offset."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class PatchEmbedding(Module):
    """Non-overlapping p x p patches, flattened and projected to ``dim``.

    ``norm`` appends a LayerNorm over the embedding.  With small-sigma init
    and [0, 1] inputs the raw projections have variance close to the
    LayerNorm epsilon of the first block, which stalls training.
    """

    def __init__(self, patch: int, in_ch: int, dim: int, rng: np.random.Generator, dtype=np.float32,
                 norm: bool = True):
        self.patch = patch
        self.in_ch = in_ch
        self.proj = Linear(patch * patch * in_ch, dim, rng, init="trunc_normal", dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype) if norm else None

    def forward(self, img) -> Tensor:
        """(n, c, S, S) or (c, S, S) image -> (n, S/p, S/p, dim) tokens."""
        x = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=self.dtype))
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        n, c, h, w = x.shape
        p = self.patch
        if c != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} input channels, got {c}")
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        x = x.reshape(n, c, h // p, p, w // p, p)
        x = T.transpose(x, (0, 2, 4, 1, 3, 5)).reshape(n, h // p, w // p, c * p * p)
        out = self.proj(x)
        if self.norm is not None:
            out = self.norm(out)
        return out.reshape(h // p, w // p, -1) if single else out


def patch_embed(pe: PatchEmbedding, img) -> Tensor:
    return pe(img)


class SwinBlock(Module):
    """Pre-norm block with (shifted-)window attention and a 4x MLP.

    When the grid is no larger than the window, the window shrinks to the
    grid and the shift is dropped (a single window already sees everything).
    """

    def __init__(self, dim: int, heads: int, resolution: int, window: int, shifted: bool,
                 rng: np.random.Generator, mlp_ratio: int = 4, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        if resolution <= window:
            window, shifted = resolution, False
        if resolution % window:
            raise ShapeError(f"grid {resolution} not divisible by window {window}")
        self.dim, self.heads, self.resolution, self.window = dim, heads, resolution, window
        self.shift = window // 2 if shifted else 0
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.msa = MSAParams(dim, heads, dim // heads, dim // heads, rng, init="trunc_normal", dtype=dtype)
        self.rel_bias = T.parameter(np.zeros(((2 * window - 1) ** 2, heads)), dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, init="trunc_normal", dtype=dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, init="trunc_normal", dtype=dtype)
        self._rel_index = relative_position_index(window).reshape(-1)
        self._mask = build_shift_mask(resolution, resolution, window, self.shift) if self.shift else None

    def position_bias(self) -> Tensor:
        n = self.window**2
        b = self.rel_bias[self._rel_index].reshape(n, n, self.heads)
        return T.transpose(b, (2, 0, 1))

    def attention(self, x: Tensor) -> Tensor:
        """Windowed MSA on an already-normalised grid (..., H, W, C)."""
        h, w = x.shape[-3], x.shape[-2]
        if (h, w) != (self.resolution, self.resolution):
            raise ShapeError(f"block built for {self.resolution}x{self.resolution}, got {h}x{w}")
        x = cyclic_shift(x, self.shift)
        win = window_partition(x, self.window)
        out = multi_head_self_attention(win, self.msa, self._mask, self.position_bias())
        out = window_reverse(out, self.window, h, w)
        return cyclic_shift(out, -self.shift)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


def swin_block_forward(b: SwinBlock, x: Tensor) -> Tensor:
    return b(x)


class PatchMerging(Module):
    """2x2 neighbourhood concat (TL, BL, TR, BR) -> LayerNorm -> linear 4C -> 2C."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, init="trunc_normal", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-3], x.shape[-2]
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs an even grid, got {h}x{w}")
        parts = [x[..., 0::2, 0::2, :], x[..., 1::2, 0::2, :], x[..., 0::2, 1::2, :], x[..., 1::2, 1::2, :]]
        return self.reduction(self.norm(T.concat(parts, axis=-1)))


def patch_merge(pm: PatchMerging, x: Tensor) -> Tensor:
    return pm(x)


class SwinStage(Module):
    def __init__(self, dim_in: int, dim: int, depth: int, heads: int, resolution: int, window: int,
                 rng: np.random.Generator, merge: bool, mlp_ratio: int = 4, dtype=np.float32):
        if depth % 2:
            raise ValueError("stage depth must be even (W-MSA/SW-MSA pairs)")
        self.merge = PatchMerging(dim_in, rng, dtype) if merge else None
        self.blocks = [SwinBlock(dim, heads, resolution, window, i % 2 == 1, rng, mlp_ratio, dtype)
                       for i in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinPath(Module):
    def __init__(self, plan: SwinPlan, rng: np.random.Generator, dtype=np.float32):
        self.plan = plan
        dims, grids = plan.dims, plan.grids
        self.patch_embed = PatchEmbedding(plan.patch_size, plan.in_ch, plan.embed_dim, rng, dtype,
                                          norm=plan.patch_norm)
        self.stages = [SwinStage(dims[max(i - 1, 0)], dims[i], plan.depths[i], plan.heads[i], grids[i],
                                 plan.window, rng, merge=i > 0, mlp_ratio=plan.mlp_ratio, dtype=dtype)
                       for i in range(len(plan.depths))]
        self.norm = LayerNorm(dims[-1], dtype=dtype)

    def tokens(self, imgs) -> Tensor:
        """(n, c, S, S) -> final (n, g, g, D) token grid (after the last LayerNorm)."""
        x = self.patch_embed(imgs)
        for stage in self.stages:
            x = stage(x)
        return self.norm(x)

    def forward(self, imgs) -> Tensor:
        """(n, c, S, S) slices -> (n, D) per-slice features (token mean)."""
        x = self.tokens(imgs)
        n, g, _, d = x.shape
        return T.mean(x.reshape(n, g * g, d), axis=1)

    def forward_volumes(self, volumes: list[np.ndarray]) -> Tensor:
        """List of (k_i, c, S, S) slice stacks -> (B, D) volume features via max over slices."""
        counts = [len(v) for v in volumes]
        if min(counts) < 1:
            raise ValueError("every volume needs at least one slice")
        feats = self(Tensor(np.concatenate(volumes).astype(self.dtype, copy=False)))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        return T.stack([swin_aggregate_volume(feats[int(a):int(b)]) for a, b in zip(bounds[:-1], bounds[1:])])


def swin_forward_slice(path: SwinPath, img) -> Tensor:
    """(c, S, S) slice -> (D,) feature."""
    x = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=path.dtype))
    if x.ndim != 3:
        raise ShapeError(f"expected one (c, S, S) slice, got {x.shape}")
    out = path(x.reshape(1, *x.shape))
    return out.reshape(out.shape[-1])


def swin_aggregate_volume(slice_feats: Tensor) -> Tensor:
    """(k, D) -> (D,) max over slices."""
    if slice_feats.shape[0] < 1:
        raise ValueError("need at least one slice")
    return T.tmax(slice_feats, axis=0)
