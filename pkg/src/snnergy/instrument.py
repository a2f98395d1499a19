"""Opt-in run-time instrumentation: op counters, allocation audit, spike traces.

Every hook here is a no-op unless the matching context manager is active, so
normal training runs pay one context-variable lookup per op.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

_scope: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar("snnergy_scope", default=())
_counter: contextvars.ContextVar["OpCounter | None"] = contextvars.ContextVar("snnergy_counter", default=None)
_allocs: contextvars.ContextVar["AllocationTracker | None"] = contextvars.ContextVar("snnergy_allocs", default=None)
_spikes: contextvars.ContextVar["SpikeTrace | None"] = contextvars.ContextVar("snnergy_spikes", default=None)
_layers: contextvars.ContextVar["LayerTrace | None"] = contextvars.ContextVar("snnergy_layers", default=None)


@contextlib.contextmanager
def op_scope(*names: str) -> Iterator[None]:
    """Label every op issued inside the block with a nested scope path."""
    token = _scope.set(_scope.get() + names)
    try:
        yield
    finally:
        _scope.reset(token)


def current_scope() -> str:
    return "/".join(_scope.get())


class OpCounter:
    """Multiply-accumulate-equivalent counts keyed by scope path.

    Convolutions, linear maps and matmuls count one op per MAC. Reductions,
    Hadamard products and residual additions count one op per element.
    Batch normalization and neuron dynamics are not counted (BN is folded into
    the preceding weights at deployment time).
    """

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, n: int) -> None:
        self.counts[current_scope()] += int(n)

    def total(self, *, contains: str | None = None, exclude: str | None = None) -> int:
        """Sum of counts whose scope path contains / excludes a substring."""
        out = 0
        for key, value in self.counts.items():
            if contains is not None and contains not in key:
                continue
            if exclude is not None and exclude in key:
                continue
            out += value
        return out


def count_ops(n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(n)


@contextlib.contextmanager
def counting() -> Iterator[OpCounter]:
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@dataclass
class AllocationTracker:
    """Byte counter over every tensor buffer created while active."""

    records: list[tuple[str, int]] = field(default_factory=list)

    def add(self, nbytes: int) -> None:
        self.records.append((current_scope(), int(nbytes)))

    @property
    def peak_bytes(self) -> int:
        return max((b for _, b in self.records), default=0)

    @property
    def total_bytes(self) -> int:
        return sum(b for _, b in self.records)

    def largest(self, *, contains: str | None = None) -> int:
        return max(
            (b for s, b in self.records if contains is None or contains in s),
            default=0,
        )

    def buffers_at_least(self, nbytes: int) -> list[tuple[str, int]]:
        return [(s, b) for s, b in self.records if b >= nbytes]


def record_alloc(nbytes: int) -> None:
    tracker = _allocs.get()
    if tracker is not None:
        tracker.add(nbytes)


@contextlib.contextmanager
def tracking_allocations() -> Iterator[AllocationTracker]:
    tracker = AllocationTracker()
    token = _allocs.set(tracker)
    try:
        yield tracker
    finally:
        _allocs.reset(token)


@dataclass
class SpikeRecord:
    role: str
    spikes: float = 0.0
    elements: int = 0
    non_binary: int = 0
    calls: int = 0


class SpikeTrace:
    """Per-layer spike totals accumulated over one or more forward passes."""

    def __init__(self) -> None:
        self.layers: dict[str, SpikeRecord] = {}

    def add(self, name: str, role: str, spikes: np.ndarray) -> None:
        rec = self.layers.get(name)
        if rec is None:
            rec = self.layers[name] = SpikeRecord(role)
        rec.spikes += float(spikes.sum(dtype=np.float64))
        rec.elements += spikes.size
        rec.non_binary += int(np.count_nonzero((spikes != 0) & (spikes != 1)))
        rec.calls += 1


def record_spikes(name: str, role: str, spikes: np.ndarray) -> None:
    trace = _spikes.get()
    if trace is not None:
        trace.add(name, role, spikes)


@contextlib.contextmanager
def tracing_spikes() -> Iterator[SpikeTrace]:
    trace = SpikeTrace()
    token = _spikes.set(trace)
    try:
        yield trace
    finally:
        _spikes.reset(token)


@dataclass
class LayerEntry:
    name: str
    macs: int
    input_rate: float


class LayerTrace:
    """Per-layer MAC counts paired with the firing rate of the layer input."""

    def __init__(self) -> None:
        self.entries: list[LayerEntry] = []

    def add(self, name: str, macs: int, input_rate: float) -> None:
        self.entries.append(LayerEntry(name, int(macs), float(input_rate)))


def record_layer(name: str, macs: int, x: np.ndarray) -> None:
    """Log one layer call: total MACs issued and the spike rate of its input."""
    trace = _layers.get()
    if trace is None:
        return
    binary = bool(np.all((x == 0) | (x == 1)))
    # Non-spiking inputs (the encoding layer) are billed as fully dense.
    rate = float(x.mean()) if binary else 1.0
    trace.add(name, macs, rate)


@contextlib.contextmanager
def tracing_layers() -> Iterator[LayerTrace]:
    trace = LayerTrace()
    token = _layers.set(trace)
    try:
        yield trace
    finally:
        _layers.reset(token)
