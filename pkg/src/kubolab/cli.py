"""kubolab command line: one subcommand per pipeline stage plus ``run`` and ``report``."""
import argparse
import logging
import sys

from .config import STAGES, ConfigError, RunConfig, load_config
from .kubo import EmptyGrid
from .model import ModelError
from .pipeline import EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_NOGAP, report, run
from .spectral import NoGap


def _parser():
    ap = argparse.ArgumentParser(prog="kubolab", description="Hall conductance and adiabatic response on "
                                                             "finite magnetic models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run",) + STAGES:
        p = sub.add_parser(name, help="run the configured pipeline" if name == "run" else f"run the {name} stage")
        p.add_argument("--config", help="TOML configuration (defaults apply when omitted)")
        p.add_argument("--out", help="output directory (overrides outputs.directory)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, help="seed for randomized potentials (overrides seeds.potential)")
    p = sub.add_parser("report", help="merge stage summaries in an output directory and redraw plots")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="ignored; accepted for symmetry")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int)
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "report":
        code, out = report(args.out)
        print(f"report written to {out}")
        return code
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stages = None if args.command == "run" else [args.command]
    try:
        code, out = run(cfg, stages, args.out, args.threads, args.seed)
    except ModelError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoGap, EmptyGrid) as exc:
        print(f"no gap: {exc}", file=sys.stderr)
        return EXIT_NOGAP
    if code == EXIT_NOGAP:
        print(f"no certified gap; manifest written to {out}", file=sys.stderr)
    elif code == EXIT_ACCEPTANCE:
        print(f"acceptance failure; outputs in {out}", file=sys.stderr)
    else:
        print(f"outputs in {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
