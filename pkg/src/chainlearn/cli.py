"""
Command line interface.

    learn run <config>                  run one configuration file
    learn preset <name>                 run a named preset (sweeps: one dir per value)
    learn replay <run-dir> --x0 ...     replay with the learned potential
    learn export-plots <run-dir>        plot-ready CSVs and PNG figures

The output root defaults to ``$LEARN_OUTPUT_ROOT`` (or ``./runs``).
Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import OUTPUT_ROOT_ENV, ConfigError, load_config
from .pipeline import PipelineError, replay_from_run, run_pipeline, run_preset
from .presets import PRESETS, UnknownPresetError
from .recon import SolverError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _vector(text: str):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learn", description="Learn a chain potential from simulated evolutions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a configuration file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: <root>/<output.name>)")
    p.add_argument("--no-trajectories", action="store_true", help="skip per-experiment trajectory CSVs")

    p = sub.add_parser("preset", help="run a named preset")
    p.add_argument("name", help="one of: " + ", ".join(PRESETS))
    p.add_argument("--root", help=f"output root (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--no-trajectories", action="store_true")

    p = sub.add_parser("replay", help="replay from a new start with a learned potential")
    p.add_argument("run_dir")
    p.add_argument("--x0", type=_vector, required=True, help="initial state, comma-separated")
    p.add_argument("--u0", type=_vector, help="control (default: equilibrium control of the true energy)")
    p.add_argument("--out", help="paired trajectory CSV (default: <run-dir>/replay_cli.csv)")

    p = sub.add_parser("export-plots", help="write plot-ready CSVs and figures")
    p.add_argument("run_dir")
    p.add_argument("--csv-only", action="store_true", help="skip PNG figures")
    return parser


def _print_report(rep):
    r = rep.manifest["reconstruction"]
    print(
        f"{rep.outdir}: sup error {r['sup_error']:.3e} (rel {r['relative_sup_error']:.3e}), "
        f"L2 error {r['l2_error']:.3e}, K={rep.manifest['grid']['K']}, "
        f"{rep.manifest['total_seconds']:.2f} s"
    )
    for rr in rep.manifest["replay"]:
        print(f"  replay seed {rr['seed']}: max error {rr['max_error']:.3e}, support distance {rr['support_distance']:.3e}")


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = load_config(args.config)
        rep = run_pipeline(cfg, args.out, write_trajectories=not args.no_trajectories)
        _print_report(rep)
    elif args.command == "preset":
        for _, rep in run_preset(args.name, args.root, write_trajectories=not args.no_trajectories):
            _print_report(rep)
    elif args.command == "replay":
        out = args.out or os.path.join(args.run_dir, "replay_cli.csv")
        _, _, (emax, el1) = replay_from_run(args.run_dir, args.x0, args.u0, out)
        print(f"{out}: max error {emax:.3e}, L1 error {el1:.3e}")
    elif args.command == "export-plots":
        from .plotting import export_plots, find_runs, plot_sweep, setup_style

        runs = find_runs(args.run_dir)
        if not runs:
            raise FileNotFoundError(f"no run artifacts under {args.run_dir}")
        for rd in runs:
            for path in export_plots(rd, figures=not args.csv_only):
                print(path)
        if len(runs) > 1 and not args.csv_only:
            setup_style()
            path = os.path.join(args.run_dir, "sweep.png")
            plot_sweep(runs, [os.path.basename(r) for r in runs], path)
            print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, UnknownPresetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ConfigError):
            return EXIT_CONFIG
        if isinstance(exc.cause, SolverError):
            return EXIT_SOLVER
        return EXIT_FAILURE
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
