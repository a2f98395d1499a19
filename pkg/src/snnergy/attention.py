"""Unimodal spiking attention: quadratic SSA and linear query-key token attention.

Both modules take spike trains laid out as [T, B, N, C]. The core functions
(``token_mask``, ``ssa_core``) are exposed separately so they can be checked
against brute-force oracles on hand-built spike inputs.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .instrument import op_scope
from .layers import LIF, BatchNorm, Linear, Module
from .neuron import LifParams
from .tensor import DimensionError, Parameter, SpikeTensor, Tensor, as_spikes


def _check_heads(channels: int, heads: int) -> None:
    if heads < 1 or channels % heads:
        raise DimensionError(f"{channels} channels cannot be split into {heads} heads")


def token_mask(q: Tensor, heads: int, channel_axis: int, lif: LIF) -> SpikeTensor:
    """Binary per-token importance A = SN(Σ_c Q) with the sum taken per head.

    The channel axis is split into (heads, C_h) and the sum over C_h is kept as
    a size-1 axis, so the mask broadcasts back over the head's channels.
    """
    shape = q.shape
    c = shape[channel_axis]
    _check_heads(c, heads)
    split = shape[:channel_axis] + (heads, c // heads) + shape[channel_axis + 1 :]
    with op_scope("mask"):
        sums = q.reshape(split).sum(axis=channel_axis + 1, keepdims=True)
    return lif(sums)


def apply_mask(mask: SpikeTensor, k: Tensor, heads: int, channel_axis: int) -> SpikeTensor:
    """A ⊙ K with A broadcast over each head's channels; result stays binary."""
    shape = k.shape
    c = shape[channel_axis]
    split = shape[:channel_axis] + (heads, c // heads) + shape[channel_axis + 1 :]
    with op_scope("masking"):
        masked = mask * k.reshape(split)
    return as_spikes(masked.reshape(shape))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, b, n, c = x.shape
    return x.reshape(t, b, n, heads, c // heads).permute(0, 1, 3, 2, 4)


def _merge_heads(x: Tensor) -> Tensor:
    t, b, h, n, ch = x.shape
    return x.permute(0, 1, 3, 2, 4).reshape(t, b, n, h * ch)


def ssa_core(q: Tensor, k: Tensor, v: Tensor, scale: Tensor, heads: int, lif: LIF) -> SpikeTensor:
    """SN(Q Kᵀ V × s) per head for [T, B, N, C] spike trains. No softmax."""
    if q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"SSA operands {q.shape}, {k.shape}, {v.shape} disagree")
    _check_heads(q.shape[-1], heads)
    with op_scope("attn_core"):
        u = ops.qktv(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads), scale)
    return lif(_merge_heads(u))


class _Projection(Module):
    """SN(BN(x W)) on [T, B, N, C]."""

    def __init__(self, channels: int, role: str, lif: LifParams | None, rng: np.random.Generator) -> None:
        self.proj = Linear(channels, channels, bias=False, rng=rng)
        self.bn = BatchNorm(channels, axis=3)
        self.lif = LIF(lif, role=role)

    def forward(self, x: Tensor) -> SpikeTensor:
        return self.lif(self.bn(self.proj(x)))


class SSA(Module):
    """Spiking self-attention; quadratic in the token count N."""

    def __init__(
        self,
        channels: int,
        heads: int = 8,
        lif: LifParams | None = None,
        scale_init: float = 0.125,
        rng: np.random.Generator | None = None,
    ) -> None:
        _check_heads(channels, heads)
        rng = rng or np.random.default_rng(0)
        self.channels, self.heads = channels, heads
        self.q = _Projection(channels, "Q", lif, rng)
        self.k = _Projection(channels, "K", lif, rng)
        self.v = _Projection(channels, "V", lif, rng)
        self.scale = Parameter(np.array(scale_init))
        self.out_lif = LIF(lif, role="Attn")

    def forward(self, x: Tensor, kv: Tensor | None = None) -> SpikeTensor:
        """Self-attention on ``x``; with ``kv`` given, keys and values come from it."""
        kv = x if kv is None else kv
        if x.shape[-1] != self.channels or kv.shape != x.shape:
            raise DimensionError(f"SSA expects matching [T,B,N,{self.channels}] inputs, got {x.shape}, {kv.shape}")
        with op_scope(self.path):
            return ssa_core(self.q(x), self.k(kv), self.v(kv), self.scale, self.heads, self.out_lif)


class QKTA(Module):
    """Query-key token attention: linear in N, never forms an N×N object."""

    def __init__(
        self,
        channels: int,
        heads: int = 8,
        lif: LifParams | None = None,
        rng: np.random.Generator | None = None,
    ) -> None:
        _check_heads(channels, heads)
        rng = rng or np.random.default_rng(0)
        self.channels, self.heads = channels, heads
        self.q = _Projection(channels, "Q", lif, rng)
        self.k = _Projection(channels, "K", lif, rng)
        self.mask_lif = LIF(lif, role="Attn")
        self.post = _Projection(channels, "Out", lif, rng)

    def forward(self, x: Tensor) -> SpikeTensor:
        if x.ndim != 4 or x.shape[-1] != self.channels:
            raise DimensionError(f"QKTA expects [T,B,N,{self.channels}], got {x.shape}")
        with op_scope(self.path):
            q, k = self.q(x), self.k(x)
            masked = apply_mask(token_mask(q, self.heads, 3, self.mask_lif), k, self.heads, 3)
            return self.post(masked)
