"""Command-line entry point.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
Verbosity follows ``SMFNET_LOG_LEVEL`` (e.g. DEBUG, INFO, WARNING) unless ``-v`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
LOG_ENV = "SMFNET_LOG_LEVEL"

log = logging.getLogger("smfnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args):
    from .config import TrainConfig, toy_config

    if args.config:
        cfg = TrainConfig.from_ini(args.config)
    elif getattr(args, "toy", False):
        cfg = toy_config()
    else:
        cfg = TrainConfig()
    cfg = cfg.with_overrides(args.set or [])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_stage1(args) -> int:
    from .training import PairedPatches, plot_losses, train_stage1

    cfg = _config(args)
    out = _prepare_out(args.out)
    cfg.to_ini(out / "config.ini")
    data = PairedPatches.from_directory(args.data, cfg)
    log.info("stage I on %d patches", len(data))
    res = train_stage1(cfg, data, out, out / "train_log.csv")
    res.checkpoint.save(out / "stage1.ckpt")
    plot_losses({"stage1": res}, out / "loss_stage1.png")
    print(out / "stage1.ckpt")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    from .training import Checkpoint, PairedPatches, plot_losses, train_stage2

    cfg = _config(args)
    init = Checkpoint.load(args.init)
    out = _prepare_out(args.out)
    cfg.to_ini(out / "config.ini")
    data = PairedPatches.from_directory(args.data, cfg)
    res = train_stage2(cfg, data, init, out, out / "train_log.csv")
    res.checkpoint.save(out / "stage2.ckpt")
    plot_losses({"stage2": res}, out / "loss_stage2.png")
    print(out / "stage2.ckpt")
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .training import Checkpoint, fuse_directory

    ckpt = Checkpoint.load(args.ckpt)
    written = fuse_directory(ckpt, args.ir, args.vis, _prepare_out(args.out))
    print(f"fused {len(written)} pair(s) into {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_directory

    table = evaluate_directory(args.fused, args.ir, args.vis, args.ssim_reduction)
    print(table.format())
    if args.out:
        out = _prepare_out(args.out)
        table.write_csv(out / "metrics.csv")
        (out / "metrics.txt").write_text(table.format() + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .config import ABLATIONS, apply_ablation
    from .metrics import evaluate_directory
    from .training import PairedPatches, fuse_directory, plot_losses, read_manifest, train_all, write_toy_dataset

    if args.name.upper() not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}")
    if not args.toy and not args.data:
        raise UsageError("ablate needs --data unless --toy is given")
    cfg = _config(args)
    if args.toy and not any(s.startswith("train.max_iterations") for s in args.set or []):
        cfg = replace(cfg, max_iterations=args.toy_iterations)
    cfg = apply_ablation(cfg, args.name)
    out = _prepare_out(args.out)
    data_root = write_toy_dataset(out / "data", count=4, size=64, seed=cfg.seed) if args.toy else Path(args.data)
    cfg.to_ini(out / "config.ini")
    data = PairedPatches.from_directory(data_root, cfg)
    results = train_all(cfg, data, out)
    plot_losses(results, out / "loss.png")
    final = "joint" if cfg.joint_stage else "stage2"
    fused_dir = out / "fused"
    fuse_directory(results[final].checkpoint, data_root / "ir", data_root / "vis", fused_dir)
    table = evaluate_directory(fused_dir, data_root / "ir", data_root / "vis")
    table.write_csv(out / "metrics.csv")
    summary = {
        "ablation": args.name.upper(),
        "description": ABLATIONS[args.name.upper()][0],
        "checkpoints": {k: read_manifest(out / f"{k}.ckpt") for k in results},
        "metrics_mean": table.mean.as_dict() if table.mean else None,
    }
    for m in summary["checkpoints"].values():
        m.pop("parameters")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(table.format())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smfnet", description="Infrared/visible image fusion: training, fusion and evaluation.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def cfg_args(sp):
        sp.add_argument("--config", help="INI config file ([train], [loss], [model] sections)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train-stage1", help="train encoder and decoder for reconstruction")
    cfg_args(sp)
    sp.add_argument("--data", required=True, help="directory holding ir/ and vis/")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_stage1)

    sp = sub.add_parser("train-stage2", help="add fusion layers and train for fusion")
    cfg_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--init", required=True, help="stage-I checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_stage2)

    sp = sub.add_parser("fuse", help="fuse every ir/vis pair with a trained checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ir", required=True)
    sp.add_argument("--vis", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("evaluate", help="quality metrics for a directory of fused images")
    sp.add_argument("--fused", required=True)
    sp.add_argument("--ir", required=True)
    sp.add_argument("--vis", required=True)
    sp.add_argument("--out", help="write metrics.csv and metrics.txt here")
    sp.add_argument("--ssim-reduction", choices=("sum", "mean"), default="sum")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="run one ablation variant end to end")
    sp.add_argument("name", help="AE1 ... AE13")
    cfg_args(sp)
    sp.add_argument("--toy", action="store_true", help="synthetic data and a narrow network")
    sp.add_argument("--toy-iterations", type=int, default=20, help="iterations per stage with --toy")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)
    return p


def _setup_logging(verbose: int) -> None:
    if verbose:
        level = logging.DEBUG if verbose > 1 else logging.INFO
    else:
        level = getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    from .config import ConfigError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
