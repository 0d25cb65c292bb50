"""Command-line entry point.

Subcommands select the pipeline; a config file supplies the parameters.
Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 capacity
refusal.
"""
from __future__ import annotations

import argparse
import os
import sys

# Pin BLAS to one thread before numpy loads: per-seed outputs are then
# byte-identical no matter how many seed workers run concurrently.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .errors import CapacityError, NumericalError, ValidationError  # noqa: E402

_SUBCOMMANDS = {
    "amp": "amp_vs_se",
    "se": "amp_vs_se",
    "gd": "gd_vs_dmft",
    "dmft": "gd_vs_dmft",
    "gordon": "gordon_rank1",
    "baselines": "baselines",
}


def _add_common(sub):
    sub.add_argument("--config", required=True, help="INI config path")
    sub.add_argument("--seed", type=int, default=None, help="override the seeds list")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--threads", type=int,
                     default=int(os.environ.get("RBMLAB_THREADS", "1")))
    sub.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbmlab")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "amp", "se", "gd", "dmft", "gordon", "baselines"):
        _add_common(subs.add_parser(name))
    sweep_p = subs.add_parser("sweep")
    _add_common(sweep_p)
    sweep_p.add_argument("--axis", required=True)
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated numeric values")
    return parser


def _run(args) -> None:
    from dataclasses import replace

    from . import experiments
    from .spiked_data import save_dataset

    kind = _SUBCOMMANDS.get(args.command)
    config = experiments.load_config(args.config, kind_override=kind)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    out = args.out or f"out_{config.kind}"

    if args.command == "generate":
        from .experiments import _build, _dataset
        lambdas, r, k, alpha, pu, pw, _, _ = _build(config.model)
        os.makedirs(out, exist_ok=True)
        for seed in config.seeds:
            data = _dataset(config.model, lambdas, pu, pw, seed)
            save_dataset(data, os.path.join(out, f"dataset_seed{seed}.spkd"))
        if not args.quiet:
            print(f"wrote {len(config.seeds)} dataset(s) to {out}")
    elif args.command == "sweep":
        values = [float(v) for v in args.values.split(",")]
        experiments.sweep(config, args.axis, values, out, threads=args.threads,
                          quiet=args.quiet)
    else:
        experiments.run_experiment(config, out, threads=args.threads,
                                   quiet=args.quiet)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except CapacityError as exc:
        print(f"capacity refusal: {exc}", file=sys.stderr)
        return 4
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
