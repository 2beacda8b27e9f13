"""Command-line entry point: ``hoyersparse <command> [options]``.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O error
(including a missing checkpoint or dataset).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import gradcheck, pruning
from .config import ConfigError, ExperimentConfig, bundled_configs, load_config
from .data import FormatError
from .model import CheckpointError, load_checkpoint
from .regularizers import descent_path

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

# each stage reads the checkpoint written by the one before it
_PREVIOUS = {"sparsify": "pretrain", "prune": "sparsify", "finetune": "prune"}


def _resolve_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists():
        bundled = bundled_configs()
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        if name not in bundled:
            raise FileNotFoundError(f"config not found: {args.config}")
        path = bundled[name]
    return load_config(path).with_overrides(seed=args.seed, out=args.out, data=args.data)


def _print_report(report) -> None:
    print(f"nonzero {report.total_nonzero}/{report.total_weights} ({report.nonzero_percent:.2f}%)")
    print(f"structure {report.structure_str}  flops {report.flops} ({report.flops_percent:.2f}%)")
    for key, acc in report.accuracy.items():
        print(f"{key} {acc:.4f}")


def cmd_stage(args) -> int:
    config = _resolve_config(args)
    stage = args.command
    if stage == "pipeline":
        _, report = pruning.run_pipeline(config)
        _print_report(report)
        return EXIT_OK
    data = pruning.load_data(config)
    if stage == "pretrain":
        result = pruning.run_pretrain(config, data)
    else:
        source = args.checkpoint or Path(config["out"]) / f"{_PREVIOUS[stage]}.json"
        net = load_checkpoint(source)
        runner = {"sparsify": pruning.run_sparsify, "prune": pruning.run_prune,
                  "finetune": pruning.run_finetune}[stage]
        result = runner(config, net, data)
    _print_report(result.report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    networks = tuple(args.networks)
    results = gradcheck.run_all(probes=args.probes, seed=args.seed, corrupt=args.corrupt, networks=networks)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} max_rel_error {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def write_trajectory_csv(steps, weights, thresholds, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"w_{j + 1}" for j in range(weights.shape[1])] + ["threshold"])
        for t, w, th in zip(steps, weights, thresholds):
            writer.writerow([int(t)] + [repr(float(v)) for v in w] + [repr(float(th))])


def cmd_descent(args) -> int:
    steps, weights, thresholds = descent_path(args.dim, args.steps, args.lr, args.seed, args.stride)
    out = Path(args.out or "runs/descent")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "descent.csv"
    write_trajectory_csv(steps, weights, thresholds, path)
    small = int((abs(weights[-1]) < 1e-2).sum())
    print(f"wrote {path}: {small}/{args.dim} coordinates below 1e-2, final threshold {thresholds[-1]:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoyersparse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("pretrain", "sparsify", "prune", "finetune", "pipeline"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run every stage")
        p.add_argument("--config", required=True,
                       help="JSON config file, or the name of a bundled config (e.g. lenet300100_hs)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--data", help="MNIST directory (overrides the config data section)")
        if name in _PREVIOUS:
            p.add_argument("--checkpoint",
                           help=f"input checkpoint (default: OUT/{_PREVIOUS[name]}.json)")
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--networks", nargs="*", default=["lenet300100", "lenet5"])
    p.add_argument("--corrupt", metavar="ITEM",
                   help="scale the analytic gradient of ITEM by 1.01 (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("descent-demo", help="pure HoyerSquare descent in 20 dimensions, as CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (default runs/descent)")
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--stride", type=int, default=1, help="record every STRIDE steps")
    p.set_defaults(func=cmd_descent)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError, FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
