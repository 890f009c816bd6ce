"""Command-line front end.

    spanforge pretrain --config exp4 --out runs
    spanforge probe    --config exp4 --out runs --format table
    spanforge generate --config exp20 --out runs
    spanforge infill   --config exp20 --out runs --seed 3
    spanforge evaluate --config exp20 --out runs
    spanforge matrix   --out runs                 # exp0..exp9
    spanforge matrix   --config exp4,exp8,my.yaml --out runs

--config takes a preset name or a YAML config path (matrix: a comma-separated
list of either).  --seed overrides the corruption/training/generation seeds.
Exits 0 on success; on failure prints the failing stage to stderr and exits 2.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from spanforge import __version__, harness, presets


def _resolve_config(value: str) -> harness.ExperimentConfig:
    if value in presets.PRESETS:
        return presets.get_preset(value)
    if Path(value).is_file():
        return harness.load_config(value)
    raise harness.ConfigError(
        f"--config {value!r} is neither a preset name nor an existing config file"
    )


def _with_seed(config: harness.ExperimentConfig, seed: int | None) -> harness.ExperimentConfig:
    return config if seed is None else config.with_seed(seed)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spanforge",
        description="pretrain, probe, and generate with span-corruption protein models",
    )
    parser.add_argument("--version", action="version", version=f"spanforge {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        default=None,
        help="preset name or YAML config path (matrix: comma-separated list)",
    )
    common.add_argument("--seed", type=int, default=None, help="override run seeds")
    common.add_argument("--out", default="runs", help="artifact directory (default: runs)")
    common.add_argument(
        "--format", choices=("tsv", "table"), default="tsv", help="report format"
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("pretrain", parents=[common], help="fit the model, save checkpoint + log")
    sub.add_parser("probe", parents=[common], help="pretrain, run probes, write a report")
    sub.add_parser("generate", parents=[common], help="fine-tune frozen-encoder, beam-generate")
    sub.add_parser("infill", parents=[common], help="mask and refill corpus records")
    sub.add_parser("evaluate", parents=[common], help="score generated sequences")
    sub.add_parser("matrix", parents=[common], help="run several experiments, one report table")
    return parser


def _run(args: argparse.Namespace) -> None:
    if args.verb == "matrix":
        names = args.config.split(",") if args.config else list(presets.DEFAULT_MATRIX)
        configs = [_with_seed(_resolve_config(name.strip()), args.seed) for name in names]
        results, report_path = harness.run_matrix(configs, out_dir=args.out, format=args.format)
        sys.stdout.write(report_path.read_text())
        print(f"wrote {report_path}")
        return

    config = _with_seed(_resolve_config(args.config or "exp0"), args.seed)
    if args.verb == "pretrain":
        path = harness.run_pretraining(config, out_dir=args.out)
        print(f"wrote {path}")
    elif args.verb == "probe":
        result = harness.run_experiment(config, out_dir=args.out, format=args.format)
        sys.stdout.write(result.report_path.read_text())
        print(f"wrote {result.report_path}")
    elif args.verb == "generate":
        path = harness.run_generation(config, out_dir=args.out)
        print(f"wrote {path}")
    elif args.verb == "infill":
        path = harness.run_infill(config, out_dir=args.out)
        print(f"wrote {path}")
    elif args.verb == "evaluate":
        path = harness.run_evaluation(config, out_dir=args.out)
        sys.stdout.write(path.read_text())
        print(f"wrote {path}")
    else:  # unreachable: argparse rejects unknown verbs
        raise harness.HarnessError(f"unknown verb {args.verb!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _run(args)
    except harness.StageError as exc:
        print(f"spanforge: {exc.stage}: {exc.cause}", file=sys.stderr)
        return 2
    except harness.HarnessError as exc:
        print(f"spanforge: config: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
