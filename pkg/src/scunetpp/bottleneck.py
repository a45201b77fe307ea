"""Convolutional bottleneck at the deepest resolution."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import DimensionError, Tensor


class BottleneckUnit(Module):
    """Pre-activation 1x1 -> 3x3 -> 1x1 unit, each conv preceded by BN-ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, residual: bool = True):
        mid = channels // reduction
        if mid < 1:
            raise DimensionError(f"{channels} channels cannot be reduced by {reduction}")
        self.channels, self.mid, self.residual = channels, mid, residual
        self.bn1 = BatchNorm2d(channels)
        self.conv1 = Conv2d(channels, mid, 1, rng)
        self.bn2 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, mid, 3, rng, padding=1)
        self.bn3 = BatchNorm2d(mid)
        self.conv3 = Conv2d(mid, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"bottleneck expects (B, {self.channels}, H, W), got {x.shape}")
        y = self.conv1(T.relu(self.bn1(x)))
        y = self.conv2(T.relu(self.bn2(y)))
        y = self.conv3(T.relu(self.bn3(y)))
        return x + y if self.residual else y


class CNNBottleneck(Module):
    """Stack of :class:`BottleneckUnit` on an NCHW map; shape is preserved."""

    def __init__(self, channels: int, rng: np.random.Generator, units: int = 2, reduction: int = 4,
                 residual: bool = True):
        self.units = [BottleneckUnit(channels, rng, reduction, residual) for _ in range(units)]

    def forward(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


def cnn_bottleneck(x: Tensor, p: CNNBottleneck, mode: str = "train") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    p.train(mode == "train")
    return p(x)
