"""``qdf`` command-line entry point.

Subcommands::

    qdf preprocess RAW.xyz [RAW.xyz ...] --output DATA_DIR
    qdf train DATA_DIR --output RUN_DIR [--resume CHECKPOINT]
    qdf predict CHECKPOINT MOLECULES.xyz --output PREDICTIONS.tsv
    qdf eval-extrapolation CHECKPOINT SMALL_DIR LARGE_DIR --output REPORT_DIR
    qdf check-gradients

Configuration precedence, lowest first: shipped defaults, the file named by
``$QDF_CONFIG``, ``--config FILE``, individual flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("qdf")


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded BLAS, fixed seeds")
    p.add_argument("--target", choices=("atomization", "zpve", "enthalpy"))
    p.add_argument("--max-atoms", type=int)
    p.add_argument("--min-atoms", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--strict", action="store_true", default=None,
                   help="abort on the first malformed record")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    ap = argparse.ArgumentParser(prog="qdf", description="Quantum deep field training and "
                                 "prediction for small organic molecules.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common],
                       help="parse extended-XYZ files into a dataset directory")
    p.add_argument("raw", nargs="+", type=Path)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("train", parents=[common], help="train on a preprocessed directory")
    p.add_argument("dataset", type=Path)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")

    p = sub.add_parser("predict", parents=[common], help="predict energies for molecules")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("molecules", type=Path)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("eval-extrapolation", parents=[common],
                       help="MAE by molecule size on small (held-out) and large molecules")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("small", type=Path, help="preprocessed directory the model was trained on")
    p.add_argument("large", type=Path, help="preprocessed directory of larger molecules")
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("check-gradients", parents=[common],
                       help="compare analytic and finite-difference gradients")
    p.add_argument("--n-orbitals", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--grid-interval", type=float, default=0.5)
    p.add_argument("--sphere-radius", type=float, default=0.75)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return ap


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "deterministic": args.deterministic,
        "target_kind": args.target,
        "max_atoms": args.max_atoms,
        "min_atoms": args.min_atoms,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "base_lr": args.lr,
        "strict": args.strict,
    }


def _pin_threads() -> None:
    for var in THREAD_VARS:
        os.environ[var] = "1"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.deterministic:
        # must happen before numpy loads its BLAS
        _pin_threads()
    from qdf import commands
    return commands.run(args, _overrides(args))


if __name__ == "__main__":
    raise SystemExit(main())
