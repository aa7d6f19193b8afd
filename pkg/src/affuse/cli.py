"""Command-line front end.

Subcommands::

    affuse train     [--config F] [--set K=V ...] [--seed N] [--out DIR] [--precision P] [--dry-run]
    affuse eval      --checkpoint F [--split val|train]
    affuse gradcheck [ops|attention|fusion|blocks|all]
    affuse report    [--format text|json] [--input-size S]
    affuse inspect   --checkpoint F [--input F] [--samples N]

Every subcommand accepts the common flags. Exit codes: 0 success, 1 a
check failed, 2 usage or configuration error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as K
from .analysis import count_flops, count_params, overhead_ratio
from .checks import SCOPES, format_results, run_suite, units
from .data import FormatError, load_container, write_blobs
from .networks import build_network, count_blocks
from .tensor import ConfigError, DimensionError, InputError
from .train import (
    Divergence,
    RunConfig,
    collect_fusion_weights,
    evaluate,
    load_checkpoint,
    load_datasets,
    parse_config,
    train_run,
)

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with errors raised instead of printed, so ``main`` controls the exit code."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value run configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision")
    p.add_argument("--dry-run", action="store_true",
                   help="validate the configuration and print the network inventory, then stop")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="affuse", description="Attentional feature fusion: training, checks and reports.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a network and write metrics plus a checkpoint")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured dataset")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("val", "train"), default="val")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("scope", nargs="?", default="all", choices=SCOPES)

    p = sub.add_parser("report", help="FLOPs and parameter report next to the add-fusion baseline")
    _common(p)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--input-size", type=int, help="square input side (default: the configured image size)")

    p = sub.add_parser("inspect", help="dump the attention maps of every fusion site")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, help="dataset container with the images to inspect "
                                              "(default: the configured validation set)")
    p.add_argument("--samples", type=int, default=8, help="number of images to run")
    return parser


def _load_config(args, default_text: str = "") -> RunConfig:
    text = default_text
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    kw = {"seed": args.seed, "out": args.out, "precision": args.precision}
    return parse_config(text, tuple(args.overrides), **{k: v for k, v in kw.items() if v is not None})


def _inventory(cfg: RunConfig) -> dict:
    spec = cfg.network_spec()
    net = build_network(spec)
    return {
        "network": spec.to_dict(),
        "parameters": net.num_parameters(),
        "fusion_sites": [dict(vars(b)) for b in count_blocks(spec)],
    }


def _emit(obj) -> None:
    print(json.dumps(obj), flush=True)


def _checkpoint_config(args) -> RunConfig:
    """Config for a checkpoint: its ``run.cfg`` sidecar, then --config/--set on top."""
    sidecar = args.checkpoint.parent / "run.cfg"
    base = sidecar.read_text(encoding="utf-8") if sidecar.exists() else ""
    return _load_config(args, base)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        _emit({"dry_run": True, "config": dataclasses.asdict(cfg), **_inventory(cfg)})
        return EXIT_OK
    try:
        result = train_run(cfg, Path(cfg.out), emit=_emit)
    except Divergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _emit({"final": result.final, "checkpoint": str(Path(cfg.out) / "checkpoint.bin")})
    return EXIT_OK


def _restore(args, cfg: RunConfig):
    if not args.checkpoint.exists():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    K.set_precision(cfg.precision)
    net = build_network(cfg.network_spec())
    mean, std = load_checkpoint(args.checkpoint, net)
    return net, mean, std


def cmd_eval(args) -> int:
    cfg = _checkpoint_config(args)
    if args.dry_run:
        _emit({"dry_run": True, **_inventory(cfg)})
        return EXIT_OK
    net, mean, std = _restore(args, cfg)
    train_ds, val_ds = load_datasets(cfg)
    ds = val_ds if args.split == "val" else train_ds
    if ds.images.shape[1] != net.spec.in_channels:
        raise ConfigError(f"dataset has {ds.images.shape[1]} channels, checkpoint expects {net.spec.in_channels}")
    key = "val_miou" if cfg.task == "segment" else "val_accuracy"
    _emit({"split": args.split, "samples": len(ds), key: evaluate(net, ds, cfg, mean, std)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.precision == "f32":
        raise ConfigError("gradcheck runs in double precision only (--precision f64)")
    seed = args.seed if args.seed is not None else 0
    if args.dry_run:
        _emit({"dry_run": True, "scope": args.scope, "units": [f"{s}/{n}" for s, n, _ in units(args.scope)]})
        return EXIT_OK
    results = run_suite(args.scope, seed=seed)
    print(format_results(results), flush=True)
    failed = [f"{r.scope}/{r.unit}" for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _report(cfg: RunConfig, fusion: str, size: int) -> dict:
    spec = cfg.network_spec()
    spec.fusion = fusion
    net = build_network(spec)
    rep = count_flops(net, (1, spec.in_channels, size, size))
    return {"fusion": fusion, "parameters": count_params(net).total, "flops": rep}


def cmd_report(args) -> int:
    cfg = _load_config(args)
    size = args.input_size or cfg.image_size
    if args.dry_run:
        _emit({"dry_run": True, "input_size": size, **_inventory(cfg)})
        return EXIT_OK
    K.set_precision(cfg.precision)
    sides = [_report(cfg, cfg.fusion, size)]
    if cfg.fusion != "add":
        sides.append(_report(cfg, "add", size))
    table = [{"block": kind, "doubling": d, "r": cfg.r, "overhead_percent": overhead_ratio(kind, d, cfg.r)}
             for kind in ("basic", "bottleneck") for d in (True, False)]
    if args.format == "json":
        print(json.dumps({
            "input_shape": [1, 3, size, size],
            "networks": [{"fusion": s["fusion"], "parameters": s["parameters"], **s["flops"].to_dict()}
                         for s in sides],
            "block_overhead": table,
        }, indent=2))
        return EXIT_OK
    for s in sides:
        print(f"== fusion={s['fusion']}  parameters={s['parameters']:,}  input=1x3x{size}x{size}")
        print(s["flops"].to_text())
        print()
    if len(sides) == 2:
        a, b = sides[0]["flops"], sides[1]["flops"]
        print(f"{'':<22} {cfg.fusion:>16} {'add':>16}")
        print(f"{'parameters':<22} {sides[0]['parameters']:>16,} {sides[1]['parameters']:>16,}")
        for label, attr in (("conv FLOPs", "conv_flops"), ("attention FLOPs", "attention_flops"),
                            ("pointwise FLOPs", "pointwise_flops")):
            print(f"{label:<22} {getattr(a, attr):>16,} {getattr(b, attr):>16,}")
        print(f"{'overhead':<22} {a.overhead_percent:>15.2f}% {b.overhead_percent:>15.2f}%")
        print()
    print(f"single-module overhead at r={cfg.r} (bottleneck rows: analytic layout)")
    for row in table:
        print(f"  {row['block']:<10} doubling={'yes' if row['doubling'] else 'no ':<3}  {row['overhead_percent']:.2f}%")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _checkpoint_config(args)
    if cfg.fusion in ("add", "concat"):
        raise ConfigError(f"fusion {cfg.fusion!r} has no attention weights to inspect")
    if args.samples < 1:
        raise ConfigError("--samples must be positive")
    if args.dry_run:
        _emit({"dry_run": True, **_inventory(cfg)})
        return EXIT_OK
    net, mean, std = _restore(args, cfg)
    if args.input is not None:
        ds = load_container(args.input, cfg.num_classes())
    else:
        ds = load_datasets(cfg)[1]
    n = min(args.samples, len(ds))
    x = (ds.images[:n].astype(np.float64) / 255.0 - mean[None, :, None, None]) / std[None, :, None, None]
    sites = collect_fusion_weights(net, x)
    if not sites:
        raise ConfigError("network has no attentional fusion site (check the replacement policy)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_blobs(out / "fusion_weights.bin", [(path, m) for path, m in sites])
    summary = []
    for path, m in sites:
        rec = {"site": path, "shape": list(m.shape), "mean": float(m.mean()),
               "min": float(m.min()), "max": float(m.max()),
               "spatial_var_max": float(m.var(axis=(2, 3)).max())}
        summary.append(rec)
        _emit(rec)
    (out / "fusion_weights.json").write_text(json.dumps(summary, indent=2))
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
             "report": cmd_report, "inspect": cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    prev = K.get_precision()
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, DimensionError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        K.set_precision(prev)


def _entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    _entry()
