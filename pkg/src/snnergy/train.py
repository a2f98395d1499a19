"""BPTT training with AdamW and a warmup-plus-cosine schedule, evaluation, ablations."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as dio
from .instrument import tracing_spikes
from .model import ConfigError, ModelConfig, SNNergy
from .ops import cross_entropy
from .profiler import FiringRateStats, measure_firing_rates
from .tensor import Parameter, Tensor, get_tape, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 5
    reference_epochs: int = 100
    epochs: int = 30
    batch_size: int = 16
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_path: str | None = None
    target_top1: float | None = None

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.reference_epochs:
            raise ConfigError("warmup_epochs must lie in [0, reference_epochs]")

    @property
    def effective_warmup_epochs(self) -> int:
        """Warmup shrunk in proportion when the run is shorter than the reference."""
        if self.warmup_epochs == 0:
            return 0
        if self.epochs >= self.reference_epochs:
            return self.warmup_epochs
        return min(self.epochs, max(1, round(self.warmup_epochs * self.epochs / self.reference_epochs)))

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Linear warmup to ``lr_max`` then cosine decay reaching ``lr_min`` on the last step."""
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr_max
    progress = (step - warmup_steps + 1) / span
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay: p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 5e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ) -> None:
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.data *= 1 - lr * self.weight_decay
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: dict[str, np.ndarray] | None) -> None:
        super().__init__(message)
        self.last_good_state = state


@dataclass
class Metrics:
    epochs: list[dict[str, float]] = field(default_factory=list)
    test_top1: float | None = None
    test_loss: float | None = None
    firing_rates: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def best_val_top1(self) -> float:
        return max((e["val_top1"] for e in self.epochs), default=0.0)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _batch(ds: dio.Dataset, idx: np.ndarray) -> tuple[Tensor, Tensor, np.ndarray]:
    # Stored as [S, T, ...]; the model wants time first.
    v = Tensor(np.ascontiguousarray(ds.video[idx].swapaxes(0, 1)))
    a = Tensor(np.ascontiguousarray(ds.audio[idx].swapaxes(0, 1)))
    return v, a, ds.labels[idx]


def evaluate(
    model: SNNergy, ds: dio.Dataset, batch_size: int = 32, with_rates: bool = False
) -> tuple[float, float, FiringRateStats | None]:
    """Eval-mode top-1 accuracy, mean loss and optional firing-rate statistics."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty split")
    model.eval()
    correct, loss_sum = 0, 0.0
    with no_grad(), tracing_spikes() as trace:
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            v, a, y = _batch(ds, idx)
            logits = model(v, a)
            loss_sum += float(cross_entropy(logits, y).data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    model.train()
    rates = measure_firing_rates(trace) if with_rates else None
    return correct / len(ds), loss_sum / len(ds), rates


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    splits: dict[str, dio.Dataset],
    model: SNNergy | None = None,
) -> tuple[SNNergy, Metrics]:
    """Train from scratch; returns the model holding the best-validation weights."""
    tr, va = splits["train"], splits["val"]
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("train and val splits must be non-empty")
    if tr.video.shape[1] != model_cfg.timesteps:
        raise ConfigError(f"dataset has T={tr.video.shape[1]}, model expects T={model_cfg.timesteps}")
    model = model or SNNergy(model_cfg)
    params = model.parameters()
    opt = AdamW(params, train_cfg.lr, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(tr) / train_cfg.batch_size)
    total = steps_per_epoch * train_cfg.epochs
    warmup = steps_per_epoch * train_cfg.effective_warmup_epochs
    metrics = Metrics()
    best = (-1.0, {k: v.copy() for k, v in model.state_dict().items()})
    tape = get_tape()
    step = 0
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        for epoch in range(train_cfg.epochs):
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(tr))
            loss_sum, correct = 0.0, 0
            model.train()
            for start in range(0, len(tr), train_cfg.batch_size):
                idx = order[start : start + train_cfg.batch_size]
                v, a, y = _batch(tr, idx)
                tape.reset()
                model.zero_grad()
                logits = model(v, a)
                loss = cross_entropy(logits, y)
                lval = float(loss.data)
                if not math.isfinite(lval):
                    tape.reset()
                    raise TrainingDiverged(f"loss became {lval} at epoch {epoch} step {step}", best[1])
                loss.backward()
                tape.reset()
                clip_grad_norm(params, train_cfg.grad_clip)
                lr = lr_at(step, total, warmup, train_cfg.lr, train_cfg.lr_min)
                opt.step(lr)
                step += 1
                loss_sum += lval * len(idx)
                correct += int((logits.data.argmax(axis=1) == y).sum())
            val_top1, val_loss, _ = evaluate(model, va, train_cfg.batch_size)
            row = {
                "epoch": epoch + 1,
                "lr": lr,
                "train_loss": loss_sum / len(tr),
                "train_top1": correct / len(tr),
                "val_loss": val_loss,
                "val_top1": val_top1,
            }
            metrics.epochs.append(row)
            log.info("epoch %d train_loss %.4f val_top1 %.3f", epoch + 1, row["train_loss"], val_top1)
            if val_top1 > best[0]:
                best = (val_top1, {k: v.copy() for k, v in model.state_dict().items()})
            if train_cfg.target_top1 is not None and val_top1 >= train_cfg.target_top1:
                break
    model.load_state_dict(best[1])
    if "test" in splits and len(splits["test"]):
        metrics.test_top1, metrics.test_loss, rates = evaluate(model, splits["test"], with_rates=True)
        metrics.firing_rates = {f"{s}/{r}": v for (s, r), v in rates.by_stage_role().items()}
    metrics.wall_seconds = time.perf_counter() - t0
    if train_cfg.checkpoint_path:
        save_model(train_cfg.checkpoint_path, model, {"train": train_cfg.to_dict(), "metrics": metrics.to_dict()})
    return model, metrics


def save_model(path: str | Path, model: SNNergy, extra: dict[str, Any] | None = None) -> None:
    dio.save_checkpoint(path, model.state_dict(), {"config": model.cfg.to_dict(), **(extra or {})})


def load_model(path: str | Path) -> tuple[SNNergy, dict[str, Any]]:
    header, state = dio.load_checkpoint(path)
    model = SNNergy(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model, header


PATHWAY_VALUES = ("spatial", "temporal", "spatiotemporal")


def ablation_sweep(
    kind: str,
    values: Sequence[Any],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data_spec: dio.DatasetSpec,
    seeds: Sequence[int] = (0,),
) -> list[dict[str, Any]]:
    """Train one variant per (value, seed); rows carry value, seed, top1, loss, wall time.

    ``timesteps`` regenerates the data with T = value; ``pathway`` switches the
    CMQKA fusion between spatial-only, temporal-only and both.
    """
    if kind not in ("timesteps", "pathway"):
        raise ConfigError(f"unknown ablation kind {kind!r}")
    rows = []
    for value in values:
        for seed in seeds:
            if kind == "timesteps":
                mc = model_cfg.replace(timesteps=int(value), seed=seed)
                spec = dataclasses.replace(data_spec, timesteps=int(value))
            else:
                if value not in PATHWAY_VALUES:
                    raise ConfigError(f"pathway must be one of {PATHWAY_VALUES}")
                mc = model_cfg.replace(pathways=value, seed=seed)
                spec = data_spec
            splits = dio.make_splits(spec)
            t0 = time.perf_counter()
            _, m = train(mc, train_cfg.replace(seed=seed, checkpoint_path=None), splits)
            rows.append(
                {
                    "kind": kind,
                    "value": value,
                    "seed": seed,
                    "top1": m.best_val_top1,
                    "loss": min(e["val_loss"] for e in m.epochs),
                    "test_top1": m.test_top1,
                    "wall_s": time.perf_counter() - t0,
                }
            )
    return rows
