"""The three-stage audio-visual spiking transformer.

stems (SPDS ×4) → stage 1 CMQKA → SPDS ×2 → stage 2 CMQKA → SPDS ×2 →
stage 3 cross-modal SSA → GAP over space, mean over time → fusion head.
"""

from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .attention import SSA
from .cmqka import PATHWAYS, CmqkaBlock
from .instrument import op_scope
from .layers import LIF, Linear, Module, SpikingMLP
from .neuron import LifParams
from .spds import SPDS, SpdsConfig
from .tensor import DimensionError, Tensor, concat


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels: int
    depth: int
    attention_kind: str
    heads: int


@dataclass(frozen=True)
class ModelConfig:
    input_hw: tuple[int, int] = (32, 32)
    timesteps: int = 2
    base_dim: int = 8
    depths: tuple[int, int, int] = (1, 1, 2)
    heads: int = 2
    fusion_head: str = "average"
    num_classes: int = 4
    video_channels: int = 3
    audio_channels: int = 1
    v_threshold: float = 0.6
    tau: float = 2.0
    surrogate_slope: float = 4.0
    detach_reset: bool = True
    alpha_init: float = 1.5
    scale_init: float = 0.125
    mlp_ratio: int = 4
    pathways: str = "spatiotemporal"
    temporal_kernel: int = 1
    pathway_mlp: bool = False
    ssa_mlp: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        h, w = self.input_hw
        if h % 16 or w % 16:
            raise ConfigError(f"input size {self.input_hw} must be divisible by 16")
        if self.fusion_head not in ("average", "concat"):
            raise ConfigError(f"fusion_head must be 'average' or 'concat', got {self.fusion_head!r}")
        if self.pathways not in PATHWAYS:
            raise ConfigError(f"pathways must be one of {PATHWAYS}")
        if self.timesteps < 1 or self.num_classes < 2 or self.base_dim < 2:
            raise ConfigError("timesteps >= 1, num_classes >= 2 and base_dim >= 2 are required")
        if len(self.depths) != 3 or min(self.depths) < 0:
            raise ConfigError(f"depths must be three non-negative counts, got {self.depths}")
        for spec in self.stages:
            if spec.channels % spec.heads:
                raise ConfigError(f"stage {spec.index}: {spec.channels} channels not divisible by {spec.heads} heads")

    @property
    def lif(self) -> LifParams:
        return LifParams(self.v_threshold, self.tau, self.surrogate_slope, self.detach_reset)

    @property
    def stages(self) -> list[StageSpec]:
        kinds = ("cmqka", "cmqka", "ssa_cross")
        return [
            StageSpec(i + 1, self.base_dim * 2**i, self.depths[i], kinds[i], self.heads) for i in range(3)
        ]

    @property
    def feature_dim(self) -> int:
        c3 = self.base_dim * 4
        return 2 * c3 if self.fusion_head == "concat" else c3

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("input_hw", "depths"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


PRESETS: dict[str, ModelConfig] = {
    "toy": ModelConfig(),
    "paper": ModelConfig(input_hw=(128, 128), timesteps=6, base_dim=192, heads=8),
    "paper96": ModelConfig(input_hw=(128, 128), timesteps=6, base_dim=96, heads=8),
}


def preset(name: str, **overrides: Any) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].replace(**overrides)


@contextlib.contextmanager
def _located(where: str) -> Iterator[None]:
    try:
        yield
    except DimensionError as err:
        raise DimensionError(f"{where}: {err}") from err


def _tokens(x: Tensor) -> Tensor:
    t, b, c = x.shape[:3]
    return x.reshape(t, b, c, -1)


class SsaCrossBlock(Module):
    """Cross-modal SSA in both directions with residuals and an optional MLP.

    For video←audio the queries come from video and keys and values from
    audio; the result is added back to video. Audio←video mirrors it.
    """

    def __init__(
        self,
        channels: int,
        heads: int = 8,
        lif: LifParams | None = None,
        scale_init: float = 0.125,
        mlp: bool = True,
        mlp_ratio: int = 4,
        rng: np.random.Generator | None = None,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.in_video = LIF(lif, role="In")
        self.in_audio = LIF(lif, role="In")
        self.attn_v = SSA(channels, heads, lif, scale_init, rng)
        self.attn_a = SSA(channels, heads, lif, scale_init, rng)
        if mlp:
            self.pre_v, self.pre_a = LIF(lif, role="MLPin"), LIF(lif, role="MLPin")
            self.mlp_v = SpikingMLP(channels, mlp_ratio, lif, rng)
            self.mlp_a = SpikingMLP(channels, mlp_ratio, lif, rng)
        else:
            self.pre_v = self.pre_a = self.mlp_v = self.mlp_a = None

    def forward(self, video: Tensor, audio: Tensor) -> tuple[Tensor, Tensor]:
        if video.shape != audio.shape:
            raise DimensionError(f"modality shapes differ: {video.shape} vs {audio.shape}")
        shape = video.shape
        v = self.in_video(_tokens(video))
        a = self.in_audio(_tokens(audio))
        vt, at = v.permute(0, 1, 3, 2), a.permute(0, 1, 3, 2)
        with op_scope(self.path, "residual"):
            v_new = v + self.attn_v(vt, at).permute(0, 1, 3, 2)
            a_new = a + self.attn_a(at, vt).permute(0, 1, 3, 2)
        if self.mlp_v is not None:
            with op_scope(self.path, "mlp"):
                v_new = v_new + self.mlp_v(self.pre_v(v_new))
                a_new = a_new + self.mlp_a(self.pre_a(a_new))
        return v_new.reshape(shape), a_new.reshape(shape)


def classify_head(f_v: Tensor, f_a: Tensor, mode: str, head: Linear) -> Tensor:
    """Fuse pooled modality features and map them to logits."""
    if f_v.shape != f_a.shape:
        raise DimensionError(f"feature shapes differ: {f_v.shape} vs {f_a.shape}")
    if mode == "average":
        fused = (f_v + f_a) * 0.5
    elif mode == "concat":
        fused = concat([f_v, f_a], axis=1)
    else:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    return head(fused)


@dataclass
class ForwardTrace:
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    features: tuple[Tensor, Tensor] | None = None


class SNNergy(Module):
    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        lif = cfg.lif
        s1, s2, s3 = cfg.stages
        self.video_stem = SPDS(SpdsConfig(cfg.video_channels, s1.channels, 4), lif, rng)
        self.audio_stem = SPDS(SpdsConfig(cfg.audio_channels, s1.channels, 4), lif, rng)
        block_args = dict(
            lif=lif,
            alpha_init=cfg.alpha_init,
            pathways=cfg.pathways,
            temporal_kernel=cfg.temporal_kernel,
            mlp_ratio=cfg.mlp_ratio,
            pathway_mlp=cfg.pathway_mlp,
            rng=rng,
        )
        self.stage1 = [CmqkaBlock(s1.channels, s1.heads, **block_args) for _ in range(s1.depth)]
        self.stage1_out = [LIF(lif, role="Stage"), LIF(lif, role="Stage")]
        self.down1 = [SPDS(SpdsConfig(s1.channels, s2.channels, 2), lif, rng) for _ in range(2)]
        self.stage2 = [CmqkaBlock(s2.channels, s2.heads, **block_args) for _ in range(s2.depth)]
        self.stage2_out = [LIF(lif, role="Stage"), LIF(lif, role="Stage")]
        self.down2 = [SPDS(SpdsConfig(s2.channels, s3.channels, 2), lif, rng) for _ in range(2)]
        self.stage3 = [
            SsaCrossBlock(s3.channels, s3.heads, lif, cfg.scale_init, cfg.ssa_mlp, cfg.mlp_ratio, rng)
            for _ in range(s3.depth)
        ]
        self.stage3_out = [LIF(lif, role="Stage"), LIF(lif, role="Stage")]
        self.head = Linear(cfg.feature_dim, cfg.num_classes, bias=True, rng=rng)
        self.trace = ForwardTrace()
        self.assign_names()

    def forward(self, video: Tensor, audio: Tensor) -> Tensor:
        cfg = self.cfg
        t, b = video.shape[:2]
        want_v = (cfg.timesteps, b, cfg.video_channels) + tuple(cfg.input_hw)
        want_a = (cfg.timesteps, b, cfg.audio_channels) + tuple(cfg.input_hw)
        if video.shape != want_v or audio.shape != want_a:
            raise DimensionError(f"inputs {video.shape}, {audio.shape} do not match config {want_v}, {want_a}")
        shapes = self.trace.shapes
        shapes.clear()
        with _located("video stem"):
            v = self.video_stem(video)
        with _located("audio stem"):
            a = self.audio_stem(audio)
        shapes["stem"] = v.shape
        for idx, (blocks, outs) in enumerate(((self.stage1, self.stage1_out), (self.stage2, self.stage2_out)), 1):
            for j, block in enumerate(blocks):
                with _located(f"stage {idx} block {j}"):
                    res = block(v, a)
                v, a = res.video_out, res.audio_out
            v, a = outs[0](v), outs[1](a)
            shapes[f"stage{idx}"] = v.shape
            down = self.down1 if idx == 1 else self.down2
            with _located(f"downsample after stage {idx}"):
                v, a = down[0](v), down[1](a)
        for j, block in enumerate(self.stage3):
            with _located(f"stage 3 block {j}"):
                v, a = block(v, a)
        v, a = self.stage3_out[0](v), self.stage3_out[1](a)
        shapes["stage3"] = v.shape
        # GAP over space, then the mean over time.
        f_v = v.mean(axis=(0, 3, 4))
        f_a = a.mean(axis=(0, 3, 4))
        self.trace.features = (f_v, f_a)
        return classify_head(f_v, f_a, cfg.fusion_head, self.head)
