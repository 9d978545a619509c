"""Command line entry point.

    fgl run {fgl,fedavg,centralized} [--config PATH] [--out DIR] [--seed N] [--preset P]
    fgl sweep [--ns 2000,5000,10000] ...
    fgl landscape ...
    fgl compare-comm ...
    fgl compare RUN_DIR RUN_DIR [...] [--out DIR]

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, build_config, parse_config
from .runner import DEFAULT_SWEEP, RunFailed, compare_runs, run_experiment

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--out", type=Path, help="output directory (default: config out_dir or runs/<name>)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--preset", choices=("main", "baseline"), help="hyperparameter preset")


def _ns_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("--ns needs at least one value")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fgl", description="Federated generative learning experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train one method end to end")
    run.add_argument("method", choices=("fgl", "fedavg", "centralized"))
    _common(run)

    sweep = sub.add_parser("sweep", help="FGL accuracy against synthetic sample count")
    sweep.add_argument("--ns", type=_ns_list, default=DEFAULT_SWEEP,
                       help="comma-separated synthetic sample counts")
    _common(sweep)

    land = sub.add_parser("landscape", help="loss-surface slices for FGL and FedAvg models")
    _common(land)

    comm = sub.add_parser("compare-comm", help="FGL vs FedAvg communication ledgers")
    _common(comm)

    cmp_ = sub.add_parser("compare", help="side-by-side report of finished runs")
    cmp_.add_argument("runs", nargs="+", type=Path)
    cmp_.add_argument("--out", type=Path, help="write comparison.json here instead of stdout")
    return parser


def _load(args):
    overrides = {"seed": args.seed, "preset": args.preset}
    if args.config is None:
        return build_config({"dataset": "gmm-default"}, overrides)
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "compare":
            report = compare_runs(args.runs)
            text = json.dumps(report, indent=2, sort_keys=True) + "\n"
            if args.out:
                args.out.mkdir(parents=True, exist_ok=True)
                (args.out / "comparison.json").write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = _load(args)
        experiment = args.method if args.command == "run" else args.command
        out = args.out or (Path(cfg.out_dir) if cfg.out_dir else Path("runs") / experiment)
        options = {"ns": args.ns} if args.command == "sweep" else {}
        manifest = run_experiment(cfg, experiment, out, **options)
        print(f"{experiment}: wrote {len(manifest['files'])} files to {out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RunFailed as exc:
        print(f"run failed in phase {exc.phase}: {type(exc.cause).__name__}: {exc.cause}",
              file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
