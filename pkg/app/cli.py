"""
Command-line entry point.

    python -m app <subcommand> [--config FILE | --benchmark NAME] [flags]

Exit status: 0 when every configured assertion passes, 1 when one fails,
2 for invalid input, 3 for numerical failures.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from app.config import get_settings
from app.exceptions import ErgodicHJBError, SchemaError
from app.schemas.experiment import TASKS, ExperimentConfig, apply_overrides, load_config, parse_config
from app.services.benchmarks import benchmark_config, list_benchmarks
from app.tasks import DEFAULT_TOLERANCES, build_context, plan, run_task
from app.utils import metrics
from app.utils.field_io import fmt, write_summary
from app.utils.logger import get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_ASSERTION_FAILED = 1


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _points(text: str) -> List[List[float]]:
    """``"0,0;1,0.5"`` -> [[0, 0], [1, 0.5]]."""
    points = [_floats(chunk) for chunk in text.split(";") if chunk.strip()]
    if not points:
        raise argparse.ArgumentTypeError("expected at least one point")
    return points


def _json(text: str) -> Dict[str, Any]:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc.msg}")


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--config", help="experiment config (JSON, schema_version 1)")
    source.add_argument("--benchmark", help="built-in scenario name (see list-benchmarks)")
    common.add_argument("--system", help="system kind when neither --config nor --benchmark is given")
    common.add_argument("--lagrangian", type=_json, help="LagrangianConfig as JSON")
    common.add_argument("--grid", type=_json, help="GridConfig as JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=settings.threads,
                        help="worker threads (default: ERGODIC_HJB_THREADS)")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan without solving")

    parser = argparse.ArgumentParser(prog="ergodic-hjb", description="Ergodic HJB numerical laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    for task in TASKS:
        p = sub.add_parser(task, parents=[common])
        if task == "solve-vt":
            p.add_argument("--T", type=float)
            p.add_argument("--diagnostics", action="store_true", default=None,
                           help="stability diagnostics at T and 2T")
        elif task == "solve-discounted":
            p.add_argument("--lambda", dest="lam", type=float)
        elif task == "ergodic-estimate":
            p.add_argument("--T-list", dest="T_list", type=_floats)
            p.add_argument("--lambda-list", dest="lambda_list", type=_floats)
            p.add_argument("--R", type=float)
            p.add_argument("--probes", type=_points, help="semicolon-separated points, e.g. \"0,0;1,0\"")
        elif task == "sr-distance":
            p.add_argument("--from", dest="from_point", type=_floats)
            p.add_argument("--to", dest="to_point", type=_floats)
            p.add_argument("--restarts", type=int)
        elif task == "ball-box":
            p.add_argument("--R", type=float)
            p.add_argument("--n-pairs", dest="n_pairs", type=int)
            p.add_argument("--restarts", type=int)
        elif task == "corrector":
            p.add_argument("--lambda-list", dest="lambda_sequence", type=_floats)
        elif task == "lax-oleinik":
            p.add_argument("--t", type=float)
        elif task == "validate":
            p.add_argument("--R", type=float)

    sub.add_parser("list-benchmarks", help="print the built-in scenarios")
    return parser


PARAM_FLAGS = ("T", "T_list", "lam", "lambda_list", "lambda_sequence", "R", "from_point", "to_point",
               "restarts", "n_pairs", "t", "diagnostics", "probes")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, benchmark or inline flags, then flag overrides."""
    task = args.command
    if args.config:
        config = load_config(args.config)
    elif args.benchmark:
        config = parse_config(benchmark_config(args.benchmark, task))
    elif args.system:
        if args.lagrangian is None:
            raise SchemaError("lagrangian", "--system needs --lagrangian")
        data: Dict[str, Any] = {"schema_version": 1, "task": task, "system": {"kind": args.system},
                                "lagrangian": args.lagrangian}
        if args.grid is not None:
            data["grid"] = args.grid
        config = parse_config(data)
    else:
        raise SchemaError("<args>", "one of --config, --benchmark or --system is required")

    overrides: Dict[str, Any] = {"task": task, "seed": args.seed, "output_dir": args.out}
    for name in PARAM_FLAGS:
        overrides[f"params.{name}"] = getattr(args, name, None)
    return apply_overrides(config, **overrides)


def _emit(values: Dict[str, Any], stream) -> None:
    for key in sorted(values):
        stream.write(f"{key}={fmt(values[key])}\n")


def run(
    config: ExperimentConfig,
    out_dir: Optional[str] = None,
    threads: int = 1,
    dry_run: bool = False,
    stdout=None,
) -> int:
    """Execute one experiment; writes summary.txt and prints it."""
    stdout = stdout or sys.stdout
    out = Path(out_dir or config.output_dir or get_settings().output_dir)
    try:
        ctx = build_context(config, out, threads=threads)
        if dry_run:
            _emit(plan(ctx), stdout)
            return EXIT_OK
        result = run_task(ctx)
    except ErgodicHJBError as exc:
        logger.error("cli.run.failed", extra={"task": config.task, "error": exc.message,
                                               "error_type": type(exc).__name__})
        summary = {"task": config.task, "status": "error", "exit_code": exc.exit_code, **exc.to_dict()}
        if out.exists():
            write_summary(summary, out / "summary.txt")
        _emit(summary, stdout)
        return exc.exit_code
    finally:
        logger.info("cli.metrics", extra={"value": metrics.get_snapshot()})

    summary: Dict[str, Any] = {"task": config.task, "seed": config.seed,
                               "status": "passed" if result.passed else "failed"}
    summary.update(result.summary)
    for name, passed in result.assertions.items():
        summary[f"assert_{name}"] = passed
        if name in DEFAULT_TOLERANCES or name in config.tolerances:
            summary[f"tolerance_{name}"] = ctx.tolerance(name)
    summary["artifacts"] = " ".join(sorted(result.artifacts))
    write_summary(summary, out / "summary.txt")
    _emit(summary, stdout)
    return EXIT_OK if result.passed else EXIT_ASSERTION_FAILED


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-benchmarks":
        for name, anchor in list_benchmarks():
            print(f"{name}\t{anchor}")
        return EXIT_OK
    try:
        config = config_from_args(args)
    except ErgodicHJBError as exc:
        logger.error("cli.config.invalid", extra={"error": exc.message, "error_type": type(exc).__name__})
        print(f"error: {exc.message}", file=sys.stderr)
        return exc.exit_code
    return run(config, out_dir=args.out, threads=max(1, args.threads), dry_run=args.dry_run)
