"""Command-line entry point.

Subcommands: pretrain, prune, tune, pilot, transfer, ablate, report.
Exit codes: 0 success, 1 fatal error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import harness, masking, models, pruners
from .data import synth_generate
from .harness import ConfigError, ExperimentConfig, load_config
from .seeding import child_seed


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="restrict to one seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--sparsity", default=None,
                   help="comma-separated sparsity list overriding the config")
    p.add_argument("--method", default=None,
                   help="comma-separated method list overriding the config")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "sparsity", None):
        cfg = replace(cfg, sparsities=tuple(float(v) for v in args.sparsity.split(",")))
    if getattr(args, "method", None):
        cfg = replace(cfg, methods=tuple(args.method.split(",")))
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    up_train, up_test = synth_generate(cfg.upstream)
    for seed in cfg.seeds:
        state = harness.get_pretrained(cfg, seed, up_train, up_test)
        acc = pruners.evaluate(state, up_test,
                               input_size=min(cfg.upstream.size, cfg.canvas))
        print(f"seed {seed}: pretrained {cfg.model} on {up_train.name}, "
              f"test acc {acc:.4f}")
    return 0


def cmd_prune(args) -> int:
    cfg = _load(args)
    up_train, up_test = synth_generate(cfg.upstream)
    down_train, _ = synth_generate(cfg.downstream)
    for seed in cfg.seeds:
        pre = harness.get_pretrained(cfg, seed, up_train, up_test)
        base = models.reinit_head(pre, child_seed(seed, "head", down_train.name))
        for name in cfg.methods:
            for s in cfg.sparsities:
                method = harness.build_method(cfg, name, s)
                mask, scores, prompt, _ = pruners.find_stage(base, method,
                                                             down_train, seed)
                run_dir = os.path.join(cfg.out_dir, f"seed{seed}", f"{name}_s{s:g}")
                os.makedirs(run_dir, exist_ok=True)
                masking.save_mask(os.path.join(run_dir, "mask.cspk"), mask, base, scores)
                if prompt is not None:
                    from . import prompting
                    prompting.save_prompt(os.path.join(run_dir, "prompt.cspk"),
                                          prompt, base.spec.digest())
                print(f"seed {seed} {name} s={s:g}: mask sparsity "
                      f"{masking.sparsity_of(mask):.6f} -> {run_dir}")
    return 0


def cmd_tune(args) -> int:
    cfg = _load(args)
    report = harness.run_experiment(cfg)
    path = os.path.join(cfg.out_dir, "report.csv")
    harness.emit_report(report, path)
    print(f"{len(report.rows)} rows, {len(report.errors)} errors -> {path}")
    return 0 if not report.errors else 1


def cmd_pilot(args) -> int:
    cfg = _load(args)
    report = harness.run_pilot(cfg)
    path = os.path.join(cfg.out_dir, "pilot.csv")
    harness.emit_report(report, path)
    print(f"{len(report.rows)} pilot rows -> {path}")
    return 0 if not report.errors else 1


def cmd_transfer(args) -> int:
    cfg = _load(args)
    report = harness.run_transfer(cfg)
    path = os.path.join(cfg.out_dir, "transfer.csv")
    harness.emit_report(report, path)
    print(f"{len(report.rows)} transfer rows -> {path}")
    return 0 if not report.errors else 1


def cmd_ablate(args) -> int:
    cfg = _load(args)
    report = harness.run_ablation(cfg)
    path = os.path.join(cfg.out_dir, "ablation.csv")
    harness.emit_report(report, path)
    print(f"{len(report.rows)} ablation rows -> {path}")
    return 0 if not report.errors else 1


def cmd_report(args) -> int:
    cfg = _load(args)
    report = harness.run_experiment(cfg)
    csv_path = os.path.join(cfg.out_dir, "report.csv")
    curves_path = os.path.join(cfg.out_dir, "curves.csv")
    harness.emit_report(report, csv_path)
    harness.emit_curves(report, curves_path)
    print(f"report -> {csv_path}\ncurves -> {curves_path}")
    return 0 if not report.errors else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cosparse",
        description="Prompt-assisted sparsification experiments on small vision models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("pretrain", cmd_pretrain), ("prune", cmd_prune), ("tune", cmd_tune),
        ("pilot", cmd_pilot), ("transfer", cmd_transfer), ("ablate", cmd_ablate),
        ("report", cmd_report),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # fatal, non-config
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
