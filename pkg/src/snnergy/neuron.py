"""Leaky integrate-and-fire neurons with hard reset and a sigmoid surrogate.

Two routes compute the same dynamics. ``lif_step``/``lif_forward_T`` compose
tape primitives one timestep at a time and are easy to audit. ``lif_multistep``
is a single fused node with hand-written BPTT, used by every layer.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Function,
    SpikeTensor,
    Tensor,
    _smooth_ok,
    as_spikes,
    concat,
)

_smooth: contextvars.ContextVar[bool] = contextvars.ContextVar("snnergy_smooth", default=False)


@contextlib.contextmanager
def smooth_spikes() -> Iterator[None]:
    """Replace the Heaviside forward by σ(k(V−θ)) so finite differences are meaningful.

    Only meant for gradient checks: the backward pass is unchanged, which makes
    the analytic gradient the exact derivative of the smoothed forward.
    """
    t1 = _smooth.set(True)
    t2 = _smooth_ok.set(True)
    try:
        yield
    finally:
        _smooth_ok.reset(t2)
        _smooth.reset(t1)


def smooth_enabled() -> bool:
    return _smooth.get()


@dataclass(frozen=True)
class LifParams:
    """Neuron constants. ``decay`` is the per-step leak factor 1/tau."""

    v_threshold: float = 0.6
    tau: float = 2.0
    surrogate_slope: float = 4.0
    detach_reset: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay 1/tau must lie in (0,1), got tau={self.tau}")
        if self.v_threshold <= 0:
            raise ValueError("v_threshold must be positive")
        if self.surrogate_slope <= 0:
            raise ValueError("surrogate_slope must be positive")

    @property
    def decay(self) -> float:
        return 1.0 / self.tau


@dataclass
class LifState:
    membrane: Tensor
    last_spike: SpikeTensor

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "LifState":
        return cls(Tensor(np.zeros(shape)), SpikeTensor(np.zeros(shape)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def surrogate_grad(v_minus_th: np.ndarray | float, slope: float) -> np.ndarray:
    """k·σ(kx)·(1−σ(kx)), the stand-in for dS/dV."""
    sig = _sigmoid(slope * np.asarray(v_minus_th))
    return slope * sig * (1.0 - sig)


def _fire(v: np.ndarray, p: LifParams) -> np.ndarray:
    if _smooth.get():
        return _sigmoid(p.surrogate_slope * (v - p.v_threshold)).astype(v.dtype, copy=False)
    return (v >= p.v_threshold).astype(v.dtype)


class Fire(Function):
    """Heaviside spike generation with surrogate backward."""

    def forward(self, v, params=None):
        self.save(v, params)
        return _fire(v, params)

    def backward(self, grad):
        v, p = self.saved
        return (grad * surrogate_grad(v - p.v_threshold, p.surrogate_slope).astype(v.dtype),)


def lif_step(state: LifState, input_current: Tensor, params: LifParams) -> tuple[LifState, SpikeTensor]:
    """One timestep: V = decay·V_prev·(1 − S_prev) + x, S = [V ≥ θ]."""
    if input_current.shape != state.membrane.shape:
        raise DimensionError(
            f"input shape {input_current.shape} does not match state shape {state.membrane.shape}"
        )
    prev = state.last_spike.detach() if params.detach_reset else state.last_spike
    v = state.membrane * (1.0 - prev) * params.decay + input_current
    s = Fire.apply(v, params=params, out_cls=SpikeTensor)
    return LifState(v, s), s


def lif_forward_T(inputs: Sequence[Tensor] | Tensor, params: LifParams) -> SpikeTensor:
    """Iterate ``lif_step`` over the leading time axis from a zero state."""
    steps = list(inputs) if not isinstance(inputs, Tensor) else [inputs[t] for t in range(inputs.shape[0])]
    if not steps:
        raise ContractError("lif_forward_T needs at least one timestep")
    state = LifState.zeros(steps[0].shape)
    out = []
    for x in steps:
        state, s = lif_step(state, x, params)
        out.append(s.reshape((1,) + s.shape))
    return as_spikes(concat(out, axis=0))


class LifMultistep(Function):
    """All T steps of a LIF layer as one node; backward is explicit BPTT."""

    def forward(self, x, params=None):
        p: LifParams = params
        d = p.decay
        v = np.empty_like(x)
        s = np.empty_like(x)
        v_prev = np.zeros_like(x[0])
        s_prev = np.zeros_like(x[0])
        for t in range(x.shape[0]):
            v[t] = d * v_prev * (1.0 - s_prev) + x[t]
            s[t] = _fire(v[t], p)
            v_prev, s_prev = v[t], s[t]
        self.save(v, s, p)
        return s

    def backward(self, grad):
        v, s, p = self.saved
        d = p.decay
        sg = surrogate_grad(v - p.v_threshold, p.surrogate_slope).astype(v.dtype)
        gx = np.empty_like(grad)
        gv_next = np.zeros_like(grad[0])
        for t in range(grad.shape[0] - 1, -1, -1):
            gs = grad[t]
            if not p.detach_reset:
                gs = gs - gv_next * d * v[t]
            gv = gs * sg[t] + gv_next * d * (1.0 - s[t])
            gx[t] = gv
            gv_next = gv
        return (gx,)


def lif_multistep(x: Tensor, params: LifParams) -> SpikeTensor:
    """Spike train for inputs of shape [T, ...] starting from rest."""
    if x.shape[0] < 1:
        raise ContractError("empty time axis")
    return LifMultistep.apply(x, params=params, out_cls=SpikeTensor)  # type: ignore[return-value]


def membrane_trace(x: np.ndarray, params: LifParams) -> tuple[np.ndarray, np.ndarray]:
    """Plain numpy (V, S) sequences, no tape. Handy for analysis and oracles."""
    d = params.decay
    v = np.zeros_like(x, dtype=np.float64)
    s = np.zeros_like(v)
    vp = np.zeros_like(v[0])
    sp = np.zeros_like(v[0])
    for t in range(x.shape[0]):
        v[t] = d * vp * (1 - sp) + x[t]
        s[t] = v[t] >= params.v_threshold
        vp, sp = v[t], s[t]
    return v, s
