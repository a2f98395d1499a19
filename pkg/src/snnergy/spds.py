"""Spiking patch downsampling with a shortcut branch.

X_out = LIF(F_ext(X_in) + F_skip(X_in)). The extraction branch stacks
Conv3×3 → BN → MaxPool → LIF units (two for the 4× stem, one for the 2×
intermediate downsampler) and ends with a Conv3×3 → BN refinement. The
shortcut is a strided 1×1 convolution followed by BN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instrument import op_scope
from .layers import LIF, BatchNorm, Conv2d, MaxPool2d, Module
from .neuron import LifParams
from .tensor import DimensionError, SpikeTensor, Tensor


@dataclass(frozen=True)
class SpdsConfig:
    in_channels: int
    out_channels: int
    reduction: int = 2
    shortcut_tap: str = "input"

    def __post_init__(self) -> None:
        if self.reduction not in (2, 4):
            raise ValueError(f"reduction must be 2 or 4, got {self.reduction}")
        if self.shortcut_tap not in ("input", "unit1"):
            raise ValueError(f"shortcut_tap must be 'input' or 'unit1', got {self.shortcut_tap!r}")
        if self.reduction == 4 and self.out_channels % 2:
            raise ValueError("stem output channels must be even")


class _DownUnit(Module):
    def __init__(self, cin: int, cout: int, lif: LifParams | None, rng: np.random.Generator) -> None:
        self.conv = Conv2d(cin, cout, 3, 1, rng)
        self.bn = BatchNorm(cout, axis=2)
        self.pool = MaxPool2d()
        self.lif = LIF(lif, role="SPDS")

    def forward(self, x: Tensor) -> SpikeTensor:
        # Pooling acts on continuous BN outputs, before spiking.
        return self.lif(self.pool(self.bn(self.conv(x))))


class SPDS(Module):
    def __init__(self, cfg: SpdsConfig, lif: LifParams | None = None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        if cfg.reduction == 4:
            mid = cfg.out_channels // 2
            self.units = [_DownUnit(cfg.in_channels, mid, lif, rng), _DownUnit(mid, cfg.out_channels, lif, rng)]
        else:
            self.units = [_DownUnit(cfg.in_channels, cfg.out_channels, lif, rng)]
        self.refine = Conv2d(cfg.out_channels, cfg.out_channels, 3, 1, rng)
        self.refine_bn = BatchNorm(cfg.out_channels, axis=2)
        if cfg.shortcut_tap == "input":
            skip_in, skip_stride = cfg.in_channels, cfg.reduction
        else:
            skip_in, skip_stride = self.units[0].conv.out_channels, cfg.reduction // 2
        self.skip = Conv2d(skip_in, cfg.out_channels, 1, skip_stride, rng)
        self.skip_bn = BatchNorm(cfg.out_channels, axis=2)
        self.out_lif = LIF(lif, role="SPDS")
        unit = ["conv3x3", "bn", "maxpool", "lif"]
        self.layer_order = unit * len(self.units) + ["conv3x3", "bn", "add", "lif"]

    def forward(self, x: Tensor) -> SpikeTensor:
        if x.ndim != 5 or x.shape[2] != self.cfg.in_channels:
            raise DimensionError(f"SPDS expects [T,B,{self.cfg.in_channels},H,W], got {x.shape}")
        r = self.cfg.reduction
        if x.shape[3] % r or x.shape[4] % r:
            raise DimensionError(f"spatial size {x.shape[3:]} not divisible by {r}")
        with op_scope(self.path):
            h = x
            first = None
            for unit in self.units:
                h = unit(h)
                first = h if first is None else first
            main = self.refine_bn(self.refine(h))
            tap = x if self.cfg.shortcut_tap == "input" else first
            skip = self.skip_bn(self.skip(tap))
            return self.out_lif(main + skip)
