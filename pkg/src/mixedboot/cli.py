"""Command-line interface: ``mixedboot {fit,bootstrap,ci,lineup}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import build_design, read_table
from .errors import MixedBootError
from .formula import parse_formula
from .inference import BUILTIN_STATISTICS, INTERVAL_TYPES, confint
from .lineup import make_lineup, reveal
from .reml import fit_reml
from .resamplers import BootstrapConfig, bootstrap
from .results import read_result

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool_pair(text: str) -> tuple[bool, bool]:
    truthy = {"true": True, "t": True, "1": True, "false": False, "f": False, "0": False}
    parts = [p.strip().lower() for p in text.split(",")]
    if len(parts) != 2 or any(p not in truthy for p in parts):
        raise argparse.ArgumentTypeError(f"expected two booleans like 'false,true', got {text!r}")
    return truthy[parts[0]], truthy[parts[1]]


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _ci_types(text: str) -> tuple[str, ...]:
    types = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in types if t not in INTERVAL_TYPES]
    if bad or not types:
        raise argparse.ArgumentTypeError(f"interval types must be drawn from {','.join(INTERVAL_TYPES)}")
    return types


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MIXEDBOOT_WORKERS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixedboot", description="Bootstrap inference for two-level linear mixed models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_opts(p, required=True):
        p.add_argument("--data", required=required, help="CSV file with a header row")
        p.add_argument("--formula", required=required, help="e.g. 'y ~ x + (1 | g)'")

    def boot_opts(p):
        p.add_argument("--type", choices=["case", "parametric", "residual", "reb", "wild"])
        p.add_argument("--B", type=int, default=1000)
        p.add_argument("--resample", type=_bool_pair)
        p.add_argument("--reb-variant", type=int, choices=[0, 1, 2])
        p.add_argument("--hccme", choices=["hc2", "hc3"])
        p.add_argument("--aux-dist", choices=["f1", "f2"])
        p.add_argument("--statistic", choices=sorted(BUILTIN_STATISTICS), default="fixef")
        p.add_argument("--seed", type=_seed)
        p.add_argument("--workers", type=int, default=_default_workers())

    p_fit = sub.add_parser("fit", help="fit the model by REML and print the estimates")
    model_opts(p_fit)
    p_fit.add_argument("--out", help="directory for fit.json")

    p_boot = sub.add_parser("bootstrap", help="run a bootstrap and write stats/replicates/logs")
    model_opts(p_boot)
    boot_opts(p_boot)
    p_boot.add_argument("--out", default="mixedboot-out")

    p_ci = sub.add_parser("ci", help="confidence intervals from a saved or inline bootstrap")
    model_opts(p_ci, required=False)
    boot_opts(p_ci)
    p_ci.add_argument("--results", help="directory written by 'mixedboot bootstrap'")
    p_ci.add_argument("--level", type=float, default=0.95)
    p_ci.add_argument("--ci-types", type=_ci_types, default=INTERVAL_TYPES)
    p_ci.add_argument("--out")

    p_line = sub.add_parser("lineup", help="residual lineup data with parametric decoys")
    model_opts(p_line, required=False)
    p_line.add_argument("--panels", type=int, default=20)
    p_line.add_argument("--seed", type=_seed, default=0)
    p_line.add_argument("--out", default="mixedboot-lineup")
    p_line.add_argument("--reveal", metavar="TOKEN", help="decode a lineup token (needs the same --seed)")
    return parser


def _fit(args):
    spec = parse_formula(args.formula)
    data = build_design(read_table(args.data), spec)
    return fit_reml(data)


def _config(args) -> BootstrapConfig:
    if args.type is None:
        raise MixedBootError("--type is required")
    opts = {"case": {"resample": args.resample}, "reb": {"reb_variant": args.reb_variant},
            "wild": {"hccme": args.hccme, "aux_dist": args.aux_dist}}.get(args.type, {})
    for flag, name in (("resample", "case"), ("reb_variant", "reb"), ("hccme", "wild"), ("aux_dist", "wild")):
        if getattr(args, flag) is not None and args.type != name:
            raise MixedBootError(f"--{flag.replace('_', '-')} only applies to --type {name}")
    return BootstrapConfig(args.type, args.B, master_seed=args.seed, **opts)


def _run_bootstrap(args):
    if args.workers < 1:
        raise MixedBootError("--workers must be at least 1")
    config = _config(args)
    model = _fit(args)
    stat = BUILTIN_STATISTICS[args.statistic]
    return bootstrap(model, stat, config, workers=args.workers)


def cmd_fit(args) -> int:
    model = _fit(args)
    data = model.data
    print(f"Linear mixed model fit by REML")
    print(f"REML criterion at convergence: {model.reml_criterion:.3f}")
    print("Random effects:")
    for name, value in model.variance_components().entries:
        print(f"  {name:<24} {value:.6g}")
    print("Fixed effects:")
    se = np.sqrt(np.diag(model.fixed_cov))
    for name, b, s in zip(data.fixed_names, model.params.beta, se):
        print(f"  {name:<24} {b: .6g}  (se {s:.4g})")
    print(f"Number of obs: {data.n_total}, groups: {data.g}")
    if model.boundary:
        print("boundary (singular) fit")
    if not model.converged:
        print("warning: optimizer did not converge")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        record = {
            "fixed_effects": dict(zip(data.fixed_names, model.params.beta.tolist())),
            "fixed_cov": model.fixed_cov.tolist(),
            "variance_components": dict(model.variance_components().entries),
            "reml_criterion": model.reml_criterion,
            "converged": model.converged,
            "boundary": model.boundary,
            "n_iterations": model.n_iterations,
            "n_obs": data.n_total,
            "n_groups": data.g,
        }
        (out / "fit.json").write_text(json.dumps(record, indent=2))
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    result = _run_bootstrap(args)
    result.write(args.out)
    print(result.format_summary())
    return EXIT_OK


def cmd_ci(args) -> int:
    if args.results:
        result = read_result(args.results)
        out = args.out or args.results
    else:
        if not (args.data and args.formula):
            raise MixedBootError("ci needs --results DIR or --data/--formula/--type to run inline")
        result = _run_bootstrap(args)
        out = args.out or "mixedboot-out"
        result.write(out)
    table = confint(result, args.ci_types, args.level)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "intervals.csv").write_text(table.to_csv())
    (out / "intervals.json").write_text(table.to_json())
    print(table)
    return EXIT_OK


def cmd_lineup(args) -> int:
    if args.reveal:
        print(f"True data in position {reveal(args.reveal, args.seed)}")
        return EXIT_OK
    if not (args.data and args.formula):
        raise MixedBootError("lineup needs --data and --formula (or --reveal TOKEN)")
    model = _fit(args)
    bundle = make_lineup(model, args.panels, args.seed)
    bundle.write(args.out)
    print(f"reveal with: mixedboot lineup --reveal {bundle.key} --seed {args.seed}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "bootstrap": cmd_bootstrap, "ci": cmd_ci, "lineup": cmd_lineup}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"mixedboot: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MixedBootError, ValueError) as exc:
        print(f"mixedboot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
