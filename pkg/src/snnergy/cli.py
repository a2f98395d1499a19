"""Command-line entry point: ``snnergy <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Set ``SNNERGY_LOG=INFO`` (or DEBUG) for progress logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data as dio
from .model import ConfigError, ModelConfig, SNNergy, preset
from .train import TrainConfig

log = logging.getLogger("snnergy")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from err


def _hw(text: str) -> tuple[int, int]:
    vals = _ints(text.replace("x", ","))
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected H or HxW, got {text!r}")
    return vals[0], vals[1]


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not isinstance(cfg, dict) or set(cfg) - {"model", "train", "data"}:
        raise ConfigError("config must be an object with optional 'model', 'train' and 'data' sections")
    return cfg


def _data_spec(args: argparse.Namespace, base: dict[str, Any]) -> dio.DatasetSpec:
    spec = dict(base)
    for key, attr in (
        ("num_classes", "classes"),
        ("samples_per_class", "samples_per_class"),
        ("hw", "hw"),
        ("timesteps", "timesteps"),
        ("cross_modal_correlation", "rho"),
        ("noise_sigma", "sigma"),
        ("seed", "seed"),
    ):
        val = getattr(args, attr, None)
        if val is not None:
            spec[key] = val
    try:
        return dio.DatasetSpec.from_dict(spec)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def _model_cfg(args: argparse.Namespace, cfg: dict[str, Any], data_hw: tuple[int, int] | None = None) -> ModelConfig:
    overrides = dict(cfg.get("model", {}))
    # The model follows the data resolution unless the config pins it.
    if data_hw is not None and "input_hw" not in overrides:
        overrides["input_hw"] = data_hw
    for key in ("timesteps", "base_dim", "heads", "pathways", "fusion_head"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    base = preset(getattr(args, "preset", None) or "toy")
    try:
        return ModelConfig.from_dict({**base.to_dict(), **overrides})
    except TypeError as err:
        raise ConfigError(str(err)) from err


def _train_cfg(args: argparse.Namespace, cfg: dict[str, Any]) -> TrainConfig:
    vals = dict(cfg.get("train", {}))
    for key in ("epochs", "batch_size", "lr", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            vals[key] = val
    try:
        return TrainConfig.from_dict(vals)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def _splits_from(args: argparse.Namespace, cfg: dict[str, Any]) -> dict[str, dio.Dataset]:
    if getattr(args, "data", None):
        return {s: dio.load_split(args.data, s) for s in ("train", "val", "test")}
    base = {"timesteps": preset("toy").timesteps, **cfg.get("data", {})}
    if getattr(args, "timesteps", None) is not None:
        base["timesteps"] = args.timesteps
    return dio.make_splits(_data_spec(args, base))


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = _data_spec(args, _load_config(args.config).get("data", {}))
    splits = dio.save_dataset(args.out, spec)
    print(f"wrote {sum(len(s) for s in splits.values())} samples to {args.out}")
    print(f"digest {dio.directory_digest(args.out)}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .train import train

    cfg = _load_config(args.config)
    splits = _splits_from(args, cfg)
    mc = _model_cfg(args, cfg, splits["train"].video.shape[-2:])
    tc = _train_cfg(args, cfg).replace(checkpoint_path=args.out)
    _, metrics = train(mc, tc, splits)
    for row in metrics.epochs:
        print(
            f"epoch {row['epoch']:3d}  train_loss {row['train_loss']:.4f}  "
            f"val_loss {row['val_loss']:.4f}  val_top1 {row['val_top1']:.3f}"
        )
    print(f"best val_top1 {metrics.best_val_top1:.3f}  test_top1 {metrics.test_top1:.3f}")
    if args.metrics:
        Path(args.metrics).write_text(json.dumps(metrics.to_dict(), indent=2))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .train import evaluate, load_model

    model, _ = load_model(args.checkpoint)
    ds = dio.load_split(args.data, args.split)
    top1, loss, rates = evaluate(model, ds, with_rates=True)
    print(f"{args.split}: top1 {top1:.4f}  loss {loss:.4f}  samples {len(ds)}")
    print(rates.to_text())
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    from . import profiler as prof

    if args.preset == "paper-table":
        for dim, stages in prof.PAPER_STAGES.items():
            print(f"d = {dim} (dominant MACs per block per timestep, millions)")
            print(prof.complexity_table(stages).to_text())
            print()
        diffs = prof.paper_table_diff()
        if diffs:
            print("MISMATCH against the reference table:")
            for line in diffs:
                print("  " + line)
            return 1
        print("all cells match the reference table")
        return 0
    # Energy and firing rates of one instrumented forward.
    from .instrument import tracing_layers, tracing_spikes
    from .tensor import Tensor, no_grad

    if args.checkpoint:
        from .train import load_model

        model, _ = load_model(args.checkpoint)
    else:
        model = SNNergy(_model_cfg(args, _load_config(args.config)))
    mc = model.cfg
    spec = dio.DatasetSpec(
        num_classes=mc.num_classes, samples_per_class=1, hw=mc.input_hw, timesteps=mc.timesteps, seed=args.seed or 0
    )
    ds = dio.generate_dataset(spec)
    model.eval()
    with no_grad(), tracing_layers() as layers, tracing_spikes() as spikes:
        model(Tensor(ds.video.swapaxes(0, 1)), Tensor(ds.audio.swapaxes(0, 1)))
    report = prof.energy_from_trace(layers, mc.timesteps, len(ds))
    print(report.to_text())
    print()
    print(prof.measure_firing_rates(spikes).to_text())
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    from .profiler import BenchResult, scaling_bench

    kinds = ["cmqka", "ssa"] if args.kind == "both" else [args.kind]
    rows, slopes = [], {}
    for kind in kinds:
        res = scaling_bench(kind, args.n, args.c, args.repeats, args.heads, args.timesteps, args.seed or 0)
        rows += res.rows
        slopes.update(res.slopes)
    result = BenchResult(rows, slopes)
    result.write_csv(args.out)
    for r in rows:
        flag = "  (variance > 30%)" if r.variance_flag else ""
        print(f"{r.kind:6s} N={r.n:6d} ops={r.ops:>14d} wall={r.wall_ns_median / 1e6:10.3f} ms peak={r.peak_bytes}{flag}")
    for kind, slope in slopes.items():
        print(f"log-log slope {kind}: {slope:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from .train import ablation_sweep

    cfg = _load_config(args.config)
    base = {"timesteps": preset("toy").timesteps, **cfg.get("data", {})}
    if getattr(args, "timesteps", None) is not None:
        base["timesteps"] = args.timesteps
    spec = _data_spec(args, base)
    mc = _model_cfg(args, cfg, spec.hw)
    tc = _train_cfg(args, cfg)
    if args.kind == "timesteps":
        values: list[Any] = _ints(args.values or "1,2,4")
    else:
        values = (args.values or "spatial,temporal,spatiotemporal").split(",")
    rows = ablation_sweep(args.kind, values, mc, tc, spec, args.seeds)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(f"{row['kind']} {row['value']!s:15s} seed {row['seed']}  top1 {row['top1']:.3f}  loss {row['loss']:.4f}")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snnergy", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", help="JSON file with model/train/data sections")

    def data_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--classes", type=int)
        sp.add_argument("--samples-per-class", type=int)
        sp.add_argument("--hw", type=_hw)
        sp.add_argument("--rho", type=float)
        sp.add_argument("--sigma", type=float)

    def model_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--preset", choices=["toy", "paper", "paper96"], default="toy")
        sp.add_argument("--timesteps", type=int)
        sp.add_argument("--base-dim", type=int)
        sp.add_argument("--heads", type=int)
        sp.add_argument("--pathways", choices=["spatiotemporal", "spatial", "temporal"])
        sp.add_argument("--fusion-head", choices=["average", "concat"])

    def train_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp)
    data_flags(sp)
    sp.add_argument("--timesteps", type=int)
    sp.add_argument("--out", default="data")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model with BPTT")
    common(sp)
    model_flags(sp)
    train_flags(sp)
    data_flags(sp)
    sp.add_argument("--data", help="dataset directory (generated in memory when omitted)")
    sp.add_argument("--out", default="model.ckpt")
    sp.add_argument("--metrics", help="write metrics JSON here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("profile", help="complexity table or energy/firing-rate report")
    common(sp)
    sp.add_argument("--preset", default="paper-table", choices=["paper-table", "toy", "paper", "paper96"])
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("bench", help="linear vs quadratic attention scaling sweep")
    common(sp)
    sp.add_argument("--kind", choices=["cmqka", "ssa", "both"], default="both")
    sp.add_argument("--n", type=_ints, default=[64, 256, 1024, 4096])
    sp.add_argument("--c", type=int, default=96)
    sp.add_argument("--heads", type=int, default=8)
    sp.add_argument("--timesteps", type=int, default=2)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out", default="bench.csv")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate", help="timestep or pathway ablation sweep")
    common(sp)
    model_flags(sp)
    train_flags(sp)
    data_flags(sp)
    sp.add_argument("--kind", choices=["timesteps", "pathway"], required=True)
    sp.add_argument("--values", help="comma-separated values")
    sp.add_argument("--seeds", type=_ints, default=[0])
    sp.add_argument("--out", default="ablation.csv")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("SNNERGY_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(args.func(args))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
