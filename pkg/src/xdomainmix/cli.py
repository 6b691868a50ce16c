"""Command-line entry point: ``xdomainmix <subcommand> ...``.

Exit codes: 0 success, 1 run or sweep failure, 2 bad arguments or config,
3 non-finite values during training.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import autodiff, experiments, metrics, models
from .config import ConfigError, ExperimentConfig
from .training import Method

THREADS_ENV = "XDOMAINMIX_THREADS"


def parse_seeds(text: str) -> list[int]:
    """``"0-4"``, ``"1,3,5"`` or a mix such as ``"0-2,7"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def parse_fractions(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise argparse.ArgumentTypeError("fractions must be a nonempty list of values in [0, 1]")
    return values


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or cfg.out
    if not out:
        raise ConfigError("out", "no output directory: pass --out or set 'out' in the config")
    return Path(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdomainmix", description="Feature-level cross-domain augmentation experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds: Optional[str] = None):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides the config's 'out')")
        if seeds is None:
            p.add_argument("--seed", type=int, default=0)
        else:
            p.add_argument("--seeds", type=parse_seeds, default=parse_seeds(seeds), help="e.g. 0-4 or 0,2,5")
            p.add_argument("--threads", type=int, default=default_threads(),
                           help=f"concurrent child runs (default ${THREADS_ENV} or 1)")

    methods = [m.value for m in Method]
    p = sub.add_parser("run", help="train one model")
    common(p)
    p.add_argument("--method", choices=methods)

    p = sub.add_parser("sweep", help="seeds x methods with mean/std summary rows")
    common(p, "0-4")
    p.add_argument("--method", action="append", choices=methods, help="repeatable; default all methods")

    p = sub.add_parser("ablate", help="mixing/discard ablation grid")
    common(p, "0-4")

    p = sub.add_parser("mmd-study", help="MMD between augmented and original features")
    common(p, "0-2")
    p.add_argument("--bandwidth", type=float, help="fixed kernel bandwidth (default: median heuristic per seed)")

    p = sub.add_parser("removal-study", help="accuracy after removing top-ranked feature dims")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategy", action="append", choices=list(metrics.REMOVAL_STRATEGIES),
                   help="repeatable; default all strategies, one CSV each")
    p.add_argument("--fractions", type=parse_fractions, default=parse_fractions("0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"))
    p.add_argument("--target", choices=["class", "domain"], default="class")

    p = sub.add_parser("dump-features", help="original and augmented validation features as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=methods)

    p = sub.add_parser("project-2d", help="2-D projection of validation features as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    return parser


def _cmd_run(args, cfg, raw_bytes) -> int:
    overrides = {"method": args.method} if args.method else {}
    out = experiments.run(cfg, args.seed, _out_dir(args, cfg), raw_bytes, **overrides)
    sel = out.result.selected
    print(f"selected step {sel.step}: val_acc {sel.val_acc:.4f} test_acc {sel.test_acc:.4f} -> {out.out_dir}")
    return 0


def _cmd_sweep(args, cfg, raw_bytes) -> int:
    methods = args.method or [m.value for m in Method]
    res = experiments.sweep(cfg, args.seeds, methods, _out_dir(args, cfg), args.threads)
    return _report(res)


def _cmd_ablate(args, cfg, raw_bytes) -> int:
    return _report(experiments.ablate(cfg, args.seeds, _out_dir(args, cfg), args.threads))


def _report(res: experiments.SweepResult) -> int:
    for label, seed, err in res.failures:
        print(f"FAILED {label} seed {seed}: {err}", file=sys.stderr)
    return 0 if res.ok else 1


def _cmd_mmd(args, cfg, raw_bytes) -> int:
    rows = experiments.mmd_study(cfg, args.seeds, _out_dir(args, cfg), args.bandwidth)
    for r in rows:
        print(f"seed {r['seed']} {r['method']:<10} mmd {r['mmd']:.6g}")
    return 0


def _load_params(args, cfg):
    bundle = cfg.make_bundle(args.seed)
    params = models.load_checkpoint(args.checkpoint)
    experiments.check_compatible(params, bundle)
    return params, bundle


def _cmd_removal(args, cfg, raw_bytes) -> int:
    params, bundle = _load_params(args, cfg)
    out = _out_dir(args, cfg)
    for strategy in args.strategy or list(metrics.REMOVAL_STRATEGIES):
        path = out / f"removal_{args.target}_{strategy}.csv"
        experiments.removal_csv(params, bundle, strategy, args.fractions, args.target, path, args.seed)
        print(path)
    return 0


def _cmd_dump(args, cfg, raw_bytes) -> int:
    params, bundle = _load_params(args, cfg)
    if args.method:
        cfg = cfg.with_train(method=args.method)
    path = _out_dir(args, cfg) / "features.csv"
    experiments.dump_features(params, bundle, cfg.train_config(args.seed), path, args.seed)
    print(path)
    return 0


def _cmd_project(args, cfg, raw_bytes) -> int:
    params, bundle = _load_params(args, cfg)
    path = _out_dir(args, cfg) / "projection.csv"
    experiments.projection(params, bundle, path, args.seed)
    print(path)
    return 0


COMMANDS = {
    "run": _cmd_run, "sweep": _cmd_sweep, "ablate": _cmd_ablate, "mmd-study": _cmd_mmd,
    "removal-study": _cmd_removal, "dump-features": _cmd_dump, "project-2d": _cmd_project,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        raw_bytes = Path(args.config).read_bytes()
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.command](args, cfg, raw_bytes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except autodiff.NonFiniteError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
