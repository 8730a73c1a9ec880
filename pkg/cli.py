"""
Command-line harness.

    python cli.py run configs/default.ini [--threads N] [--seed S] [--out DIR]
    python cli.py simulate configs/default.ini [--out DIR]
    python cli.py compare runs/x/am runs/x/wam [--out DIR]

Exit status: 0 success, 2 configuration or contract error, 3 numerical failure.
"""

import argparse
import logging
import sys

from calculators.errors import ConfigurationError, ContractViolation, NumericalError
from config.run_config import load_run_config, with_overrides
from config.settings import settings
from services.experiment import compare_run_dirs, run_experiment, simulate_only

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Alternating minimization CT reconstruction bench")
    subcommands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "simulate data and run the configured solvers"),
                            ("simulate", "simulate data only")):
        command = subcommands.add_parser(name, help=help_text)
        command.add_argument("config", help="INI run configuration")
        command.add_argument("--threads", type=int, default=None,
                             help="solver threads (default: THREADS setting, 0 = all cores)")
        command.add_argument("--seed", type=int, default=None, help="override [simulation] seed")
        command.add_argument("--out", default=None, help="output directory")

    compare = subcommands.add_parser("compare", help="matched-objective comparison of two solver directories")
    compare.add_argument("run_a")
    compare.add_argument("run_b")
    compare.add_argument("--out", default=None, help="directory for report.json and the difference image")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "compare":
            report = compare_run_dirs(args.run_a, args.run_b, args.out)
            print(report.model_dump_json(indent=2))
            return EXIT_OK

        config = with_overrides(load_run_config(args.config), seed=args.seed)
        threads = args.threads if args.threads else None
        if args.command == "simulate":
            summary = simulate_only(config, args.out, threads=threads)
        else:
            summary = run_experiment(config, args.out, threads=threads)
        print(f"Results written to {summary.directory}")
        for run in summary.runs:
            print(f"  {run.solver}: {run.iterations} iterations, objective {run.final_objective:.6e}, "
                  f"{run.elapsed_s:.2f}s")
        return EXIT_OK

    except (ConfigurationError, ContractViolation) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
