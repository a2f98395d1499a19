"""Parameterised building blocks: convolutions, linear maps, BN, pooling, LIF, MLP."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .instrument import op_scope, record_layer, record_spikes
from .neuron import LifParams, lif_multistep
from .tensor import DimensionError, Parameter, SpikeTensor, Tensor, default_dtype


class Module:
    """Container with parameter discovery, train/eval mode and hierarchical names."""

    training: bool = True
    path: str = ""

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self.children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, mod in self.named_modules():
            for key, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{name}.{key}" if name else key), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self.named_modules():
            if isinstance(mod, BatchNorm):
                yield f"{name}.running_mean", mod.stats["mean"]
                yield f"{name}.running_var", mod.stats["var"]

    def assign_names(self) -> "Module":
        for name, mod in self.named_modules():
            mod.path = name
        return self

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise DimensionError(f"tensor {name!r}: checkpoint shape {src.shape} vs model {arr.shape}")
            arr[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Bias-free 2-D convolution on [T, B, C, H, W] spike or real inputs."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        rng: np.random.Generator | None = None,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))

    def forward(self, x: Tensor) -> Tensor:
        t, b, c, h, w = x.shape
        if c != self.in_channels:
            raise DimensionError(f"{self.path or 'conv2d'}: expected {self.in_channels} channels, got {x.shape}")
        with op_scope(self.path):
            y = ops.conv2d(x.reshape(t * b, c, h, w), self.weight, self.stride, self.padding)
        ho, wo = y.shape[2:]
        record_layer(self.path, t * b * ho * wo * self.out_channels * c * self.kernel**2, x.data)
        return y.reshape(t, b, self.out_channels, ho, wo)


class Conv1d(Module):
    """Bias-free 1-D convolution on [M, C, L]; kernel 1 is a token-wise channel mix."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel), in_channels * kernel))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"{self.path or 'conv1d'}: expected {self.in_channels} channels, got {x.shape}")
        with op_scope(self.path):
            y = ops.conv1d(x, self.weight, padding=self.kernel // 2)
        m, _, length = x.shape
        record_layer(self.path, m * length * self.out_channels * self.in_channels * self.kernel, x.data)
        return y


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        with op_scope(self.path):
            y = ops.linear(x, self.weight, self.bias)
        record_layer(self.path, x.size // self.in_features * self.in_features * self.out_features, x.data)
        return y


class BatchNorm(Module):
    """Batch normalization over every axis except ``axis``."""

    def __init__(self, channels: int, axis: int = 1, eps: float = 1e-5, momentum: float = 0.1) -> None:
        self.channels, self.axis, self.eps, self.momentum = channels, axis, eps, momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        dt = default_dtype()
        self.stats = {"mean": np.zeros(channels, dtype=dt), "var": np.ones(channels, dtype=dt)}

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(
            x, self.gamma, self.beta, self.axis, self.stats, self.training, self.momentum, self.eps
        )


class MaxPool2d(Module):
    """2×2 window, stride 2, on [T, B, C, H, W]."""

    def forward(self, x: Tensor) -> Tensor:
        t, b, c, h, w = x.shape
        y = ops.maxpool2d(x.reshape(t * b, c, h, w))
        return y.reshape(t, b, c, h // 2, w // 2)


class LIF(Module):
    """Multi-step LIF layer over a leading time axis.

    ``role`` tags the layer for firing-rate grouping (Q, K, Attn, MLP1, ...).
    """

    def __init__(self, params: LifParams | None = None, role: str = "SN") -> None:
        self.params = params or LifParams()
        self.role = role
        self.last_rate: float | None = None

    def forward(self, x: Tensor) -> SpikeTensor:
        s = lif_multistep(x, self.params)
        self.last_rate = float(s.data.mean())
        record_spikes(self.path, self.role, s.data)
        return s


class SpikingMLP(Module):
    """SN(BN(W₂·SN(BN(W₁·x)))) with 1×1 convolutions on [T, B, C, N]."""

    def __init__(
        self,
        channels: int,
        ratio: int = 4,
        lif: LifParams | None = None,
        rng: np.random.Generator | None = None,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        hidden = channels * ratio
        self.channels = channels
        self.fc1 = Conv1d(channels, hidden, 1, rng)
        self.bn1 = BatchNorm(hidden, axis=1)
        self.lif1 = LIF(lif, role="MLP1")
        self.fc2 = Conv1d(hidden, channels, 1, rng)
        self.bn2 = BatchNorm(channels, axis=1)
        self.lif2 = LIF(lif, role="MLP2")

    def forward(self, x: Tensor) -> SpikeTensor:
        t, b, c, n = x.shape
        if c != self.channels:
            raise DimensionError(f"{self.path or 'mlp'}: expected {self.channels} channels, got {x.shape}")
        h = self.bn1(self.fc1(x.reshape(t * b, c, n)))
        h = self.lif1(h.reshape(t, b, -1, n))
        y = self.bn2(self.fc2(h.reshape(t * b, -1, n)))
        return self.lif2(y.reshape(t, b, c, n))
