"""Command-line entry point: ``bartree <command> [options]``.

Exit codes: 0 success, 1 usage or parse error, 2 numeric or model error,
3 failed checks under ``--assert``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .campaign import run_campaign
from .estimate import NoiseNotRecorded, SingularDesign, estimate
from .limits import LimitError, compute_limits, design_limit
from .model import UnstableModel, simulate
from .noise import CalibrationError
from .treeio import TreeFormatError, read_tree, write_tree
from .verify import scale_table

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_ASSERT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("need a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bartree", description="Bifurcating autoregressive processes on binary trees.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", metavar="PATH", required=config_required, help="TOML run configuration")
        p.add_argument("--seed", type=_u64, help="override experiment.master_seed")
        p.add_argument("--out", metavar="DIR", help="output directory (default: [output] dir)")

    p = sub.add_parser("simulate", help="simulate one tree and write it as CSV")
    common(p)
    p.add_argument("--no-record-noise", action="store_true", help="omit the eps column")

    p = sub.add_parser("estimate", help="estimate theta, sigma2 and rho from a tree")
    p.add_argument("--tree", metavar="PATH", help="tree file written by 'simulate'")
    common(p, config_required=False)
    p.add_argument("--n", type=int, help="estimate from T_n (default: deepest generation)")

    p = sub.add_parser("limits", help="print the limit quantities as JSON")
    common(p)

    p = sub.add_parser("montecarlo", help="run the replicated verification campaign")
    common(p)
    p.add_argument("--workers", type=_positive, help="worker processes (never changes the output)")
    p.add_argument("--assert", dest="assert_", action="store_true", help="exit 3 if any check fails")

    p = sub.add_parser("check-scales", help="scale admissibility table for b_N = N**alpha")
    p.add_argument("--config", metavar="PATH", help="TOML file with a [scales] table")
    p.add_argument("--out", metavar="DIR")
    return parser


def _load(args) -> C.RunConfig:
    text = Path(args.config).read_text()
    if not text.strip():
        raise UsageError(f"{args.config}: empty configuration")
    cfg = C.loads(text)
    return C.with_overrides(cfg, seed=getattr(args, "seed", None),
                            workers=getattr(args, "workers", None), out=getattr(args, "out", None))


def _emit(obj, out_dir, name) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    exp = cfg.experiment
    record = exp.record_noise and not args.no_record_noise
    tree = simulate(cfg.build_model(), cfg.build_noise(), exp.n, seed=exp.master_seed,
                    init=cfg.init, record_noise=record)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "tree.csv"
    write_tree(tree, path)
    print(json.dumps({"n": tree.n, "size": tree.shape.size, "seed": tree.seed,
                      "noise_recorded": tree.has_noise, "path": str(path)}))
    return EXIT_OK


def cmd_estimate(args) -> int:
    if args.tree:
        tree = read_tree(args.tree)
        Gamma = None
    elif args.config:
        cfg = _load(args)
        noise = cfg.build_noise()
        tree = simulate(cfg.build_model(), noise, cfg.experiment.n, seed=cfg.experiment.master_seed,
                        init=cfg.init, record_noise=cfg.experiment.record_noise)
        Gamma = None if noise is None else noise.Gamma
    else:
        raise UsageError("estimate needs --tree or --config")
    res = estimate(tree, args.n, Gamma)
    out = res.to_dict()
    if res.M is not None:
        out["M"] = res.M.tolist()
    _emit(out, args.out, "estimate.json")
    return EXIT_OK


def cmd_limits(args) -> int:
    cfg = _load(args)
    model, noise = cfg.build_model(), cfg.build_noise()
    if noise is None:
        L = design_limit(model, 0.0, check=False)
        obj = {"model": model.to_dict(), "noise": None, "L": L.tolist()}
    else:
        obj = {"model": model.to_dict(), "noise": noise.to_dict(), **compute_limits(model, noise).to_dict()}
    _emit(obj, args.out, "limits.json")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = _load(args)
    if cfg.build_noise() is None:
        raise UsageError("montecarlo needs a random noise family")
    report = run_campaign(cfg)
    report.write(cfg.output_dir)
    failed = [c["name"] for c in report.checks if not c["passed"]]
    for c in report.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    print(f"wrote report.json, tails.csv, rates.csv, cov.csv to {cfg.output_dir}")
    if args.assert_ and failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_check_scales(args) -> int:
    scales = C.ScalesSpec()
    if args.config:
        cfg = _load(args)
        scales = cfg.scales or scales
    rows = scale_table(scales.cases, scales.betas, scales.alphas)
    for r in rows:
        print(f"case={r['case']} beta={r['beta']} alpha={r['alpha']} "
              f"{'pass' if r['pass'] else 'fail'} {r['regime']} (alpha < {r['threshold']:.6g})")
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        (path / "scales.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "limits": cmd_limits,
    "montecarlo": cmd_montecarlo,
    "check-scales": cmd_check_scales,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bartree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularDesign, UnstableModel, LimitError, CalibrationError, NoiseNotRecorded,
            np.linalg.LinAlgError) as exc:
        print(f"bartree: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (C.ConfigError, TreeFormatError, OSError, ValueError) as exc:
        print(f"bartree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
