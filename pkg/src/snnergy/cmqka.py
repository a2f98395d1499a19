"""Bidirectional cross-modal query-key attention.

Each direction (video←audio and audio←video) has a spatial and a temporal
complementary unit. A unit projects the query modality to Q and the other
modality to K, spikes both, turns the per-head channel sum of Q into a binary
token mask and keeps only the masked K spikes. The two pathways are pooled
along complementary axes (tokens for spatial, time for temporal), multiplied,
and added to the query modality through a learnable α-weighted residual.

Tensors are laid out [T, B, C, N] inside the block; the public block accepts
and returns [T, B, C, H, W].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import apply_mask, token_mask
from .instrument import op_scope
from .layers import LIF, BatchNorm, Conv1d, Module, SpikingMLP
from .neuron import LifParams
from .tensor import DimensionError, Parameter, SpikeTensor, Tensor, as_tensor

PATHWAYS = ("spatiotemporal", "spatial", "temporal")


class _SpikeProjection(Module):
    """SN(BN(Conv1D(x))) along either the token axis or the time axis."""

    def __init__(self, channels: int, kernel: int, role: str, lif: LifParams | None, rng: np.random.Generator):
        self.conv = Conv1d(channels, channels, kernel, rng)
        self.bn = BatchNorm(channels, axis=1)
        self.lif = LIF(lif, role=role)

    def forward(self, x: Tensor, temporal: bool) -> SpikeTensor:
        t, b, c, n = x.shape
        if temporal:
            # [T,B,C,N] -> [B·N, C, T]: time becomes the sequence axis.
            seq = x.permute(1, 3, 2, 0).reshape(b * n, c, t)
            y = self.bn(self.conv(seq)).reshape(b, n, c, t).permute(3, 0, 2, 1)
        else:
            y = self.bn(self.conv(x.reshape(t * b, c, n))).reshape(t, b, c, n)
        return self.lif(y)


class ComplementaryUnit(Module):
    """One direction of one pathway: masked key spikes A ⊙ K.

    Args:
        channels: C, shared by both modalities.
        heads: h; the mask is computed per head over C/h channels.
        mode: "spatial" projects along tokens, "temporal" along time.
        kernel: width of the projection convolution.
    """

    def __init__(
        self,
        channels: int,
        heads: int,
        mode: str = "spatial",
        kernel: int = 1,
        lif: LifParams | None = None,
        rng: np.random.Generator | None = None,
    ) -> None:
        if mode not in ("spatial", "temporal"):
            raise ValueError(f"unknown pathway mode {mode!r}")
        if channels % heads:
            raise DimensionError(f"{channels} channels cannot be split into {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.channels, self.heads, self.mode = channels, heads, mode
        self.q = _SpikeProjection(channels, kernel, "Q", lif, rng)
        self.k = _SpikeProjection(channels, kernel, "K", lif, rng)
        self.mask_lif = LIF(lif, role="Attn")
        self.last_mask: SpikeTensor | None = None

    def forward(self, query_mod: Tensor, key_mod: Tensor) -> SpikeTensor:
        if query_mod.shape != key_mod.shape:
            raise DimensionError(f"modality shapes differ: {query_mod.shape} vs {key_mod.shape}")
        if query_mod.ndim != 4 or query_mod.shape[2] != self.channels:
            raise DimensionError(f"expected [T,B,{self.channels},N], got {query_mod.shape}")
        temporal = self.mode == "temporal"
        with op_scope(self.path):
            with op_scope("q_proj"):
                q = self.q(query_mod, temporal)
            with op_scope("k_proj"):
                k = self.k(key_mod, temporal)
            mask = token_mask(q, self.heads, 2, self.mask_lif)
            self.last_mask = mask
            return apply_mask(mask, k, self.heads, 2)


def spatial_complement(query_mod: Tensor, key_mod: Tensor, unit: ComplementaryUnit) -> SpikeTensor:
    if unit.mode != "spatial":
        raise ValueError("unit is not a spatial unit")
    return unit(query_mod, key_mod)


def temporal_complement(query_mod: Tensor, key_mod: Tensor, unit: ComplementaryUnit) -> SpikeTensor:
    if unit.mode != "temporal":
        raise ValueError("unit is not a temporal unit")
    return unit(query_mod, key_mod)


def cross_fusion(s_feat: Tensor | None, t_feat: Tensor | None) -> Tensor:
    """H = mean_N(S) ⊙ mean_T(T), broadcast to [T, B, C, N].

    A disabled pathway (``None``) contributes the multiplicative identity, so
    the surviving pooled factor is broadcast alone.
    """
    ref = s_feat if s_feat is not None else t_feat
    if ref is None:
        raise ValueError("at least one pathway must be enabled")
    with op_scope("fusion"):
        s_red = s_feat.mean(axis=3, keepdims=True) if s_feat is not None else None
        t_red = t_feat.mean(axis=0, keepdims=True) if t_feat is not None else None
        if s_red is not None and t_red is not None:
            return s_red * t_red
        only = s_red if s_red is not None else t_red
        return only * as_tensor(np.ones(ref.shape, dtype=ref.dtype))


def fuse_and_integrate(
    original: Tensor,
    s_feat: Tensor | None,
    t_feat: Tensor | None,
    alpha: Tensor,
    mlp: SpikingMLP | None = None,
    pre_lif: LIF | None = None,
) -> Tensor:
    """out_pre = V + α·H; out = out_pre + MLP(SN(out_pre)). Real-valued result.

    ``original`` is [T, B, C, N] (or [T, B, C, H, W], flattened internally).
    """
    shape = original.shape
    ref = s_feat if s_feat is not None else t_feat
    n = ref.shape[3]
    if int(np.prod(shape[3:])) != n:
        raise DimensionError(f"token count {n} does not match spatial dims of {shape}")
    v = original.reshape(shape[:3] + (n,))
    h = cross_fusion(s_feat, t_feat)
    with op_scope("residual"):
        out_pre = v + alpha * h
    if mlp is not None:
        spikes = (pre_lif or LIF())(out_pre)
        with op_scope("mlp"):
            delta = mlp(spikes)
        with op_scope("residual"):
            out_pre = out_pre + delta
    return out_pre.reshape(shape)


class _Direction(Module):
    """All parameters that update one modality from the other."""

    def __init__(self, channels, heads, kernel, lif, alpha_init, mlp_ratio, pathway_mlp, rng):
        self.spatial = ComplementaryUnit(channels, heads, "spatial", 1, lif, rng)
        self.temporal = ComplementaryUnit(channels, heads, "temporal", kernel, lif, rng)
        self.alpha = Parameter(np.array(alpha_init))
        self.pre_lif = LIF(lif, role="MLPin")
        self.mlp = SpikingMLP(channels, mlp_ratio, lif, rng)
        self.s_mlp = SpikingMLP(channels, mlp_ratio, lif, rng) if pathway_mlp else None
        self.t_mlp = SpikingMLP(channels, mlp_ratio, lif, rng) if pathway_mlp else None

    def forward(self, query: Tensor, key: Tensor, pathways: str) -> Tensor:
        s_feat = t_feat = None
        if pathways in ("spatiotemporal", "spatial"):
            s_feat = self.spatial(query, key)
            if self.s_mlp is not None:
                s_feat = self.s_mlp(s_feat)
        if pathways in ("spatiotemporal", "temporal"):
            t_feat = self.temporal(query, key)
            if self.t_mlp is not None:
                t_feat = self.t_mlp(t_feat)
        with op_scope(self.path):
            return fuse_and_integrate(query, s_feat, t_feat, self.alpha, self.mlp, self.pre_lif)


@dataclass
class CmqkaOutput:
    video_out: Tensor
    audio_out: Tensor
    diagnostics: dict[str, float] = field(default_factory=dict)


class CmqkaBlock(Module):
    """Both directions of cross-modal query-key attention in one residual block.

    Inputs may be real-valued (the previous block's residual output); each
    modality is re-spiked by an input LIF first, which leaves binary inputs
    unchanged because the threshold is below 1.
    """

    def __init__(
        self,
        channels: int,
        heads: int = 8,
        lif: LifParams | None = None,
        alpha_init: float = 1.5,
        pathways: str = "spatiotemporal",
        temporal_kernel: int = 1,
        mlp_ratio: int = 4,
        pathway_mlp: bool = False,
        rng: np.random.Generator | None = None,
    ) -> None:
        if pathways not in PATHWAYS:
            raise ValueError(f"pathways must be one of {PATHWAYS}, got {pathways!r}")
        rng = rng or np.random.default_rng(0)
        self.channels, self.heads, self.pathways = channels, heads, pathways
        self.in_video = LIF(lif, role="In")
        self.in_audio = LIF(lif, role="In")
        args = (channels, heads, temporal_kernel, lif, alpha_init, mlp_ratio, pathway_mlp, rng)
        self.v_from_a = _Direction(*args)
        self.a_from_v = _Direction(*args)

    def forward(self, video: Tensor, audio: Tensor) -> CmqkaOutput:
        if video.shape != audio.shape:
            raise DimensionError(f"modality shapes differ: {video.shape} vs {audio.shape}")
        if video.shape[2] != self.channels:
            raise DimensionError(f"expected {self.channels} channels, got {video.shape}")
        shape = video.shape
        flat = shape[:3] + (int(np.prod(shape[3:])),)
        v = self.in_video(video.reshape(flat))
        a = self.in_audio(audio.reshape(flat))
        v_out = self.v_from_a(v, a, self.pathways)
        a_out = self.a_from_v(a, v, self.pathways)
        return CmqkaOutput(v_out.reshape(shape), a_out.reshape(shape), self.firing_rates())

    def firing_rates(self) -> dict[str, float]:
        rates: dict[str, list[float]] = {}
        for _, mod in self.named_modules():
            if isinstance(mod, LIF) and mod.last_rate is not None:
                rates.setdefault(mod.role, []).append(mod.last_rate)
        return {role: float(np.mean(vals)) for role, vals in rates.items()}
