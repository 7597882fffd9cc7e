"""``seplab`` command line: verify, gradcheck, experiment, ablate, report.

Exit codes: 0 success, 1 check or experiment failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .blocks import BlockKind, BlockSpec, parse_kind
from .equivalence import CSV_HEADER, DEFAULT_PAIRS, PAIRS, gradcheck, sweep_pair
from .experiment import (
    ConfigError,
    ExperimentConfig,
    ablate_nonlinearity,
    load_config,
    run_protocol,
    write_outputs,
)
from .report import SchemaError, read_summary, render_svg

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _names(arg: str, default) -> list[str]:
    if arg == "all":
        return list(default)
    return [s.strip() for s in arg.split(",") if s.strip()]


def cmd_verify(args) -> int:
    names = _names(args.pairs, DEFAULT_PAIRS)
    unknown = [n for n in names if n not in PAIRS]
    if unknown or not names:
        raise UsageError(f"unknown pair(s) {', '.join(unknown) or '(none)'}; known: {', '.join(PAIRS)}")
    reports = [sweep_pair(n, cases=args.cases, tol=args.tol, seed=args.seed) for n in names]
    for r in reports:
        print(r)
    if args.out:
        rows = [CSV_HEADER] + [r.to_csv_row() for r in reports]
        Path(args.out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    try:
        kinds = [parse_kind(k) for k in _names(args.kinds, [k.value for k in BlockKind])]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ok = True
    for kind in kinds:
        spec = BlockSpec(kind, args.channels, args.channels, kernel=args.kernel)
        report = gradcheck(spec, eps=args.eps, tol=args.tol, seed=args.seed, size=args.size)
        print(report)
        ok &= report.passed
    return EXIT_OK if ok else EXIT_FAIL


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.deterministic:
        overrides["deterministic"] = True
    if getattr(args, "shared_init", False):
        overrides["shared_init"] = True
    if args.trials is not None:
        overrides["trials"] = args.trials
    return replace(cfg, **overrides) if overrides else cfg


def _progress(quiet):
    if quiet:
        return None
    return lambda r: print(f"  {r}", file=sys.stderr, flush=True)


def cmd_experiment(args) -> int:
    cfg = _config(args)
    result = run_protocol(cfg, jobs=args.jobs, progress=_progress(args.quiet))
    paths = write_outputs(result, args.out)
    print(f"{'setup':<26} {'mean|d|%':>10} {'std':>8} {'used':>5} {'div':>4}")
    for s in result.summary:
        print(f"{s.setup:<26} {s.mean_abs_diff_pct:>10.4f} {s.std_abs_diff_pct:>8.4f} {s.trials_used:>5} {s.diverged:>4}")
    print(f"wrote {', '.join(str(p) for p in paths.values())} ({result.elapsed_s:.1f} s)")
    dead = [s.setup for s in result.summary if s.diverged == cfg.trials]
    if dead:
        print(f"every trial diverged for: {', '.join(dead)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    result = ablate_nonlinearity(cfg, progress=_progress(args.quiet))
    for p in result.pairs:
        print(f"trial {p.trial} seed {p.seed}: plain {p.plain_error_pct:.2f}%  relu {p.relu_error_pct:.2f}%")
    n = len(result._valid())
    print(
        f"mean plain {result.mean_plain:.4f}%  mean relu {result.mean_relu:.4f}%  "
        f"relu >= plain in {result.relu_not_better}/{n} pairs  sign {result.mean_difference_sign:+d}"
    )
    if args.out:
        Path(args.out).write_text(result.to_csv(), encoding="utf-8")
    if n == 0:
        print("every pair diverged", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        text = Path(args.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc.strerror}") from None
    svg = render_svg(read_summary(text))
    Path(args.svg).write_text(svg, encoding="utf-8")
    print(f"wrote {args.svg}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seplab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="numerical equivalence sweeps between block formulations")
    p.add_argument("--pairs", default="all", help=f"'all' or comma-separated from: {', '.join(PAIRS)}")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--tol", type=float, default=None, help="override the per-pair tolerance")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="write a CSV report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients per block kind")
    p.add_argument("--kinds", default="all")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--kernel", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    for name, func, helptext in (
        ("experiment", cmd_experiment, "multi-trial |delta test error| protocol"),
        ("ablate", cmd_ablate, "paired Separable vs intermediate-ReLU trials"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key = value config file (defaults if omitted)")
        p.add_argument("--trials", type=int, default=None, help="override the config's trial count")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--quiet", action="store_true")
        if name == "experiment":
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--shared-init", action="store_true")
            p.add_argument("--jobs", type=int, default=1, help="worker processes, one (trial, setup) run each")
        else:
            p.add_argument("--out", help="write per-pair CSV here")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="render a summary CSV as an SVG bar chart")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--svg", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"seplab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
