"""Swin-style layers on channels-last feature maps (B, H, W, C)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .tensor import DimensionError, Tensor

MASK_VALUE = -1e9


class ConfigurationError(ValueError):
    """Invalid architectural hyperparameters."""


def window_partition(x: Tensor, w: int) -> Tensor:
    """(B, H, W, C) -> (B * H/w * W/w, w*w, C), windows in row-major order."""
    b, h, wd, c = x.shape
    if h % w or wd % w:
        raise DimensionError(f"feature map {h}x{wd} is not divisible by window {w}")
    x = x.reshape(b, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def window_reverse(windows: Tensor, w: int, h: int, wd: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if h % w or wd % w:
        raise DimensionError(f"feature map {h}x{wd} is not divisible by window {w}")
    c = windows.shape[-1]
    x = windows.reshape(-1, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, h, wd, c)


@lru_cache(maxsize=None)
def relative_position_index(w: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return ((rel[0] + w - 1) * (2 * w - 1) + rel[1] + w - 1).astype(np.intp)


@lru_cache(maxsize=None)
def shift_mask(h: int, wd: int, w: int, s: int) -> np.ndarray:
    """Additive attention mask (num_windows, w*w, w*w) for a cyclic shift of s.

    Tokens that came from different regions before the shift get
    ``MASK_VALUE``; all other pairs get 0.
    """
    region = np.zeros((h, wd), dtype=np.int64)
    cnt = 0
    for rs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
        for cs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            region[rs, cs] = cnt
            cnt += 1
    win = region.reshape(h // w, w, wd // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


class WindowAttention(Module):
    """Multi-head self-attention inside w x w windows."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator, rel_pos_bias: bool = True):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} is not divisible by heads {heads}")
        self.dim, self.heads, self.window = dim, heads, window
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_pos_bias = rel_pos_bias
        if rel_pos_bias:
            self.rel_bias_table = parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self.last_attn: np.ndarray | None = None

    def _split(self, t: Tensor) -> Tensor:
        n_b, n = t.shape[:2]
        return t.reshape(n_b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        n_b, n, c = windows.shape
        if c != self.dim:
            raise DimensionError(f"attention dim {self.dim} vs input {windows.shape}")
        q, k, v = self._split(self.q(windows)), self._split(self.k(windows)), self._split(self.v(windows))
        logits = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        if self.rel_pos_bias:
            idx = relative_position_index(self.window).reshape(-1)
            bias = self.rel_bias_table[idx].reshape(n, n, self.heads).transpose(2, 0, 1)
            logits = logits + bias
        if mask is not None:
            n_w = mask.shape[0]
            logits = logits.reshape(n_b // n_w, n_w, self.heads, n, n) + mask[None, :, None]
            logits = logits.reshape(n_b, self.heads, n, n)
        attn = T.softmax(logits, axis=-1)
        self.last_attn = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(n_b, n, c)
        return self.proj(out)


def wmsa(x: Tensor, attn: WindowAttention, w: int) -> Tensor:
    """Window attention with no token exchange across window borders."""
    _, h, wd, _ = x.shape
    out = attn(window_partition(x, w))
    return window_reverse(out, w, h, wd)


def swmsa(x: Tensor, attn: WindowAttention, w: int, s: int | None = None) -> Tensor:
    """Shifted-window attention via cyclic shift plus region mask."""
    if s is None:
        s = w // 2
    if s == 0:
        return wmsa(x, attn, w)
    if not 0 < s < w:
        raise ConfigurationError(f"shift {s} must satisfy 0 <= s < window {w}")
    _, h, wd, _ = x.shape
    shifted = T.roll(x, (-s, -s), (1, 2))
    out = attn(window_partition(shifted, w), shift_mask(h, wd, w, s))
    return T.roll(window_reverse(out, w, h, wd), (s, s), (1, 2))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm transformer block with (shifted) window attention.

    When ``resolution`` is given and does not exceed the window, the window
    shrinks to the resolution and the shift is dropped, since a single
    window already covers the map.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        window: int,
        rng: np.random.Generator,
        shifted: bool = False,
        mlp_ratio: int = 4,
        rel_pos_bias: bool = True,
        resolution: int | None = None,
    ):
        self.shifted = shifted
        if resolution is not None and resolution <= window:
            window = resolution
            self.shift = 0
        else:
            self.shift = window // 2 if shifted else 0
        self.window = window
        self.dim = dim
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return swin_block(x, self)


def swin_block(x: Tensor, p: SwinBlock) -> Tensor:
    y = p.norm1(x)
    y = swmsa(y, p.attn, p.window, p.shift) if p.shift else wmsa(y, p.attn, p.window)
    x = x + y
    return x + p.mlp(p.norm2(x))


class DoubleSwinBlock(Module):
    """A regular-window block followed by a shifted-window block."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 rel_pos_bias: bool = True, resolution: int | None = None):
        self.blocks = [
            SwinBlock(dim, heads, window, rng, False, mlp_ratio, rel_pos_bias, resolution),
            SwinBlock(dim, heads, window, rng, True, mlp_ratio, rel_pos_bias, resolution),
        ]

    def forward(self, x: Tensor) -> Tensor:
        return double_swin_block(x, *self.blocks)


def double_swin_block(x: Tensor, p1: SwinBlock, p2: SwinBlock) -> Tensor:
    if p1.shifted or not p2.shifted:
        raise ConfigurationError("double swin block needs a non-shifted block followed by a shifted one")
    return swin_block(swin_block(x, p1), p2)


class PatchEmbed(Module):
    """Split (B, C_in, H, W) into p x p patches and project each to ``dim``."""

    def __init__(self, dim: int, rng: np.random.Generator, in_channels: int = 3, patch: int = 4):
        self.patch, self.in_channels = patch, in_channels
        self.proj = Linear(patch * patch * in_channels, dim, rng)

    def forward(self, image: Tensor) -> Tensor:
        return patch_partition_embed(image, self)


def patch_partition_embed(image: Tensor, p: PatchEmbed) -> Tensor:
    b, c, h, w = image.shape
    k = p.patch
    if c != p.in_channels:
        raise DimensionError(f"expected {p.in_channels} input channels, got {image.shape}")
    if h % k or w % k:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {k}")
    x = image.reshape(b, c, h // k, k, w // k, k).transpose(0, 2, 4, 3, 5, 1)
    return p.proj(x.reshape(b, h // k, w // k, k * k * c))


class PatchMerging(Module):
    """Halve resolution, double channels: 2x2 parity sub-grids -> 4C -> 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return patch_merge(x, self)


def patch_merge(x: Tensor, p: PatchMerging) -> Tensor:
    _, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch merging needs even extents, got {h}x{w}")
    if c != p.dim:
        raise DimensionError(f"patch merging expects {p.dim} channels, got {c}")
    parts = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
    return p.reduction(T.concat(parts, axis=-1))


class PatchExpand(Module):
    """Double resolution, halve channels: C -> 2C, then a 2x2 rearrangement."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise DimensionError(f"patch expanding needs an even channel count, got {dim}")
        self.dim = dim
        self.expand = Linear(dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return patch_expand(x, self)


def patch_expand(x: Tensor, p: PatchExpand) -> Tensor:
    b, h, w, c = x.shape
    if c % 2:
        raise DimensionError(f"patch expanding needs an even channel count, got {c}")
    y = p.expand(x)
    # chunk k = row_parity + 2 * col_parity, as in patch_merge
    y = y.reshape(b, h, w, 2, 2, c // 2).transpose(0, 1, 4, 2, 3, 5)
    return y.reshape(b, 2 * h, 2 * w, c // 2)


class FinalExpand4(Module):
    """4x upsampling that keeps the channel count: C -> 16C, then 4x4 rearrangement."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.expand = Linear(dim, 16 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return final_expand4(x, self)


def final_expand4(x: Tensor, p: FinalExpand4) -> Tensor:
    b, h, w, c = x.shape
    y = p.expand(x).reshape(b, h, w, 4, 4, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, 4 * h, 4 * w, c)
