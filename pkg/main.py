"""Command-line entry point for motion-aware caching experiments.

Run with::

    python main.py run --config experiment.json
    python main.py sweep --param alpha --values 0 0.5 1
    python main.py verify prop1
    python main.py export --trace out/traces/motioncache_seed0.mctr
    python main.py inspect --runs

Exit codes: 0 success, 2 configuration or argument error, 3 verification
failure, 4 I/O or trace format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable

from app import registry
from app.config import (
    DEFAULT_CONFIG_PATH,
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    load_config,
)
from app.core import CacheStateError
from app.experiment import (
    build_scenario,
    export_importance_frames,
    run,
    sweep,
    trace_table,
    verify,
)
from app.trace import VERBOSITY_LEVELS, TraceFormatError, read_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_IO = 4


def _config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    return apply_overrides(
        config,
        seed=args.seed,
        output_dir=args.out,
        policy=args.policy,
        verbosity=args.verbosity,
    )


def _cmd_run(args: argparse.Namespace) -> int:
    summary = run(_config(args), reuse=args.reuse)
    print(summary.frame().to_string(index=False))
    print(f"summary: {summary.summary_path}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _config(args)
    table = sweep(config, args.param, args.values, policy_name=args.policy)
    print(table.to_string(index=False))
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    report = verify(
        _config(args),
        args.kind,
        proxy=args.proxy,
        permutations=args.permutations,
    )
    print(json.dumps(report.as_dict(), sort_keys=True, indent=2))
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_VERIFY


def _cmd_export(args: argparse.Namespace) -> int:
    trace = read_trace(args.trace)
    masks = None
    if args.config.exists():
        config = load_config(args.config)
        scenario = build_scenario(config, trace.header.seed)
        if scenario.chunk_shape == tuple(trace.header.shape):
            masks = scenario.motion_masks
        else:
            logger.warning("[export] config scenario does not match the trace shape")
    out = Path(args.out) if args.out else args.trace.parent / "frames"
    steps = tuple(args.steps) if args.steps else None
    written = export_importance_frames(
        trace, out, masks, steps=steps, fmt=args.format  # type: ignore[arg-type]
    )
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    if args.runs:
        out = Path(args.out) if args.out else Path(load_config(args.config).output_dir)
        rows = registry.list_runs(args.limit, db_path=out / registry.DB_NAME)
        for row in rows:
            print(json.dumps(row, sort_keys=True))
        return EXIT_OK
    if args.trace is None:
        raise ValueError("inspect needs --trace PATH or --runs")
    trace = read_trace(args.trace)
    print(json.dumps(trace.header.model_dump(mode="json"), sort_keys=True, indent=2))
    print(trace_table(trace).to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=Path, default=DEFAULT_CONFIG_PATH, help="JSON/YAML config"
    )
    common.add_argument("--seed", type=int, default=None, help="override the seeds")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--policy", default=None, help="restrict to one policy")
    common.add_argument(
        "--verbosity", choices=sorted(VERBOSITY_LEVELS), default=None
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )

    parser = argparse.ArgumentParser(
        description="Motion-aware residual caching experiments"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p_run = commands.add_parser("run", parents=[common], help="run all policies")
    p_run.add_argument("--reuse", action="store_true", help="reuse registry hits")
    p_run.set_defaults(handler=_cmd_run)

    p_sweep = commands.add_parser("sweep", parents=[common], help="ablation sweep")
    p_sweep.add_argument("--param", required=True, choices=["alpha", "K", "tau"])
    p_sweep.add_argument("--values", type=float, nargs="*", default=[])
    p_sweep.set_defaults(handler=_cmd_sweep)

    p_verify = commands.add_parser("verify", parents=[common], help="run a check")
    p_verify.add_argument("kind", choices=["prop1", "lemma", "ndcg", "sparse-dense"])
    p_verify.add_argument(
        "--proxy", choices=["frame-difference", "oracle"], default="frame-difference"
    )
    p_verify.add_argument("--permutations", type=int, default=100)
    p_verify.set_defaults(handler=_cmd_verify)

    p_export = commands.add_parser("export", parents=[common], help="weight maps")
    p_export.add_argument("--trace", type=Path, required=True)
    p_export.add_argument("--format", choices=["png", "pgm"], default="png")
    p_export.add_argument("--steps", type=int, nargs=2, metavar=("START", "STOP"))
    p_export.set_defaults(handler=_cmd_export)

    p_inspect = commands.add_parser("inspect", parents=[common], help="show traces")
    p_inspect.add_argument("--trace", type=Path, default=None)
    p_inspect.add_argument("--runs", action="store_true", help="list the registry")
    p_inspect.add_argument("--limit", type=int, default=20)
    p_inspect.set_defaults(handler=_cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except ConfigError as exc:
        logger.error("configuration error at %s", exc)
        return EXIT_CONFIG
    except (OSError, TraceFormatError) as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except (ValueError, CacheStateError) as exc:
        logger.error("invalid request: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
