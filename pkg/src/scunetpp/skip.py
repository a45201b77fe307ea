"""Nested dense skip connections between encoder and decoder.

Nodes are indexed ``(level, column)``. Column 0 holds the encoder outputs
(level 3 holds the bottleneck output). Every other node fuses the nodes to
its left on the same level with an upsampled copy of the node diagonally
below-left of it::

    X(i, j) = fuse([X(i, 0), ..., X(i, j-1)], X(i+1, j-1))
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .swin import PatchExpand, patch_expand
from .tensor import DimensionError, Tensor

DEPTH = 3


def canonical_shape(level: int, img_size: int, base_dim: int) -> tuple[int, int, int]:
    """(H, W, C) of every node on ``level``."""
    side = img_size // 2 ** (level + 2)
    return side, side, base_dim * 2**level


def node_schedule(dense: bool, order: str = "column") -> list[tuple[int, int]]:
    """Fusion nodes in a valid evaluation order.

    ``order`` is ``"column"`` (column by column) or ``"diagonal"``
    (anti-diagonal by anti-diagonal); deeper levels go first within each.
    """
    if order == "column":
        key = lambda n: (n[1], -n[0])  # noqa: E731
    elif order == "diagonal":
        key = lambda n: (n[0] + n[1], -n[0])  # noqa: E731
    else:
        raise ValueError(f"unknown order {order!r}")
    if not dense:
        # plain skips form one chain up column 1, so both orders are deepest first
        return [(i, 1) for i in reversed(range(DEPTH))]
    nodes = [(i, j) for j in range(1, DEPTH + 1) for i in range(DEPTH) if i + j <= DEPTH]
    return sorted(nodes, key=key)


def terminal_column(level: int, dense: bool) -> int:
    """Column of the node the decoder consumes on ``level``."""
    return DEPTH - level if dense else 1


def node_inputs(i: int, j: int, dense: bool) -> tuple[list[tuple[int, int]], tuple[int, int]]:
    if dense:
        return [(i, k) for k in range(j)], (i + 1, j - 1)
    below = (i + 1, 1) if i + 1 < DEPTH else (DEPTH, 0)
    return [(i, 0)], below


class FuseNode(Module):
    """Concatenate same-level features with an upsampled deeper one, then Conv3x3-BN-ReLU."""

    def __init__(self, dim: int, n_same: int, rng: np.random.Generator):
        self.dim, self.n_same = dim, n_same
        self.up = PatchExpand(2 * dim, rng)
        self.conv = Conv2d((n_same + 1) * dim, dim, 3, rng, padding=1)
        self.bn = BatchNorm2d(dim)

    def forward(self, same_level: Sequence[Tensor], from_below: Tensor) -> Tensor:
        return fuse_node(same_level, from_below, self)


def fuse_node(same_level: Sequence[Tensor], from_below: Tensor, p: FuseNode) -> Tensor:
    if not same_level:
        raise DimensionError("fuse_node needs at least one same-level feature")
    if len(same_level) != p.n_same:
        raise DimensionError(f"fuse node built for {p.n_same} same-level inputs, got {len(same_level)}")
    ref = same_level[0].shape
    if ref[-1] != p.dim or any(t.shape != ref for t in same_level):
        raise DimensionError(f"same-level shapes {[t.shape for t in same_level]} do not match dim {p.dim}")
    b, h, w, c = ref
    if from_below.shape != (b, h // 2, w // 2, 2 * c):
        raise DimensionError(f"from_below {from_below.shape} does not fit level shape {ref}")
    up = patch_expand(from_below, p.up)
    x = T.concat([*same_level, up], axis=-1).transpose(0, 3, 1, 2)
    y = T.relu(p.bn(p.conv(x)))
    return y.transpose(0, 2, 3, 1)


@dataclass
class FeatureGrid:
    img_size: int
    base_dim: int
    dense: bool = True
    nodes: dict[tuple[int, int], Tensor] = field(default_factory=dict)

    def __setitem__(self, key: tuple[int, int], value: Tensor) -> None:
        i, _ = key
        expected = canonical_shape(i, self.img_size, self.base_dim)
        if tuple(value.shape[1:]) != expected:
            raise DimensionError(f"node {key} has shape {value.shape}, expected (B, *{expected})")
        self.nodes[key] = value

    def __getitem__(self, key: tuple[int, int]) -> Tensor:
        return self.nodes[key]

    def __contains__(self, key) -> bool:
        return key in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def output(self, level: int = 0) -> Tensor:
        return self.nodes[(level, terminal_column(level, self.dense))]


def build_grid(
    encoder_feats: Sequence[Tensor],
    bottleneck: Tensor,
    fuse: Mapping[tuple[int, int], FuseNode],
    img_size: int,
    base_dim: int,
    dense: bool = True,
    decoder: Mapping[int, Callable[[Tensor], Tensor]] | None = None,
    order: str = "column",
) -> FeatureGrid:
    """Fill the lattice from the encoder outputs (levels 0..2) and the bottleneck (level 3).

    ``decoder[i]``, when given, runs on level i's terminal node right after
    it is fused; the stored node is the decoder output, so the next level up
    is built from decoded features.
    """
    if len(encoder_feats) != DEPTH:
        raise DimensionError(f"expected {DEPTH} encoder features, got {len(encoder_feats)}")
    grid = FeatureGrid(img_size, base_dim, dense)
    for i, feat in enumerate(encoder_feats):
        grid[(i, 0)] = feat
    grid[(DEPTH, 0)] = bottleneck
    for i, j in node_schedule(dense, order):
        same, below = node_inputs(i, j, dense)
        missing = [k for k in [*same, below] if k not in grid]
        if missing:
            raise AssertionError(f"node {(i, j)} scheduled before its inputs {missing}")
        x = fuse[(i, j)]([grid[k] for k in same], grid[below])
        if decoder is not None and j == terminal_column(i, dense):
            x = decoder[i](x)
        grid[(i, j)] = x
    return grid
