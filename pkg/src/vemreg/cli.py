"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 invalid input or configuration.
Logs go to stderr; results go to the given files or to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .bench import METHODS, run_benchmark, write_records_csv, write_report_csv
from .config import LOG_LEVELS, GlobalConfig, config_digest, load_config
from .errors import NotFoundError, ValidationError, format_exception
from .geometry import RigidTransform
from .multiview import TransformSet, register_multiview
from .pairwise import register_pair, write_trace_csv
from .scan import load_scan
from .synth import RenderSettings, collect_meshes, generate_benchmark
from .vem import vem, write_vem_dump

logger = logging.getLogger("vemreg")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _write_json(data: Any, path: str | None) -> None:
    text = json.dumps(data, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
        logger.info("Wrote %s", path)


def _read_json(path: str) -> Any:
    if not Path(path).exists():
        raise NotFoundError(f"file not found: {path}", details={"path": path})
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}", details={"path": path})


# =============================================================================
# Subcommands
# =============================================================================


def cmd_register_pair(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    P1 = load_scan(args.scan1)
    P2 = load_scan(args.scan2)
    result = register_pair(P1, P2, cfg.swarm, workers=cfg.worker_count)
    payload = result.transform.to_dict()
    payload.update(energy=result.energy, iterations=result.iterations)
    _write_json(payload, args.out)
    if args.trace:
        write_trace_csv(result, args.trace)
    if args.dump_vem:
        breakdown = vem(result.transform, P1, P2, cfg.swarm.f_gate_mm, cfg.swarm.bilinear_max_spread_mm, keep_points=True)
        write_vem_dump(breakdown, args.dump_vem)
    return 0


def cmd_register_multi(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    scans = [load_scan(path) for path in args.scans]
    prior = TransformSet.from_dict(_read_json(args.prior)) if args.prior else None
    result = register_multiview(scans, cfg, prior)
    _write_json(result.to_dict(), args.out)
    return 0


def cmd_synth(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    meshes = collect_meshes(args.meshes or None)
    settings = RenderSettings(width=args.width, height=args.height)
    specs = generate_benchmark(meshes, args.pairs, cfg.swarm.seed, args.out, settings)
    _write_json({"pairs": len(specs), "manifest": str(Path(args.out) / "manifest.json")}, None)
    return 0


def cmd_bench(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ValidationError("no methods given", suggestions=[f"Use some of: {', '.join(METHODS)}"])
    records, bench_report = run_benchmark(args.manifest, methods, cfg)
    write_report_csv(bench_report, args.out, cfg.deterministic)
    if args.records:
        write_records_csv(records, args.records, cfg.deterministic)
    for method, summary in bench_report.summary().items():
        logger.info("%s: %.1f%% success, %.2f s mean", method, summary["success_pct"], summary["mean_time_s"])
    _write_json({m: s["success_pct"] for m, s in bench_report.summary().items()}, None)
    return 0


def cmd_dump_vem(args: argparse.Namespace, cfg: GlobalConfig) -> int:
    P1 = load_scan(args.scan1)
    P2 = load_scan(args.scan2)
    T = RigidTransform.from_dict(_read_json(args.transform)) if args.transform else RigidTransform.identity()
    breakdown = vem(T, P1, P2, cfg.swarm.f_gate_mm, cfg.swarm.bilinear_max_spread_mm, keep_points=True)
    write_vem_dump(breakdown, args.out)
    _write_json(breakdown.to_dict(), None)
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace, GlobalConfig], int]] = {
    "register-pair": cmd_register_pair,
    "register-multi": cmd_register_multi,
    "synth": cmd_synth,
    "bench": cmd_bench,
    "dump-vem": cmd_dump_vem,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument(
        "--deterministic",
        action="store_true",
        help="write NA instead of wall-clock times in bench CSVs; results already depend only on the seed",
    )
    common.add_argument("--jobs", type=int, help="worker threads (default: all cores)")
    common.add_argument("--log-level", choices=LOG_LEVELS, type=str.upper, help="log level")

    parser = argparse.ArgumentParser(prog="vemreg", description="Global registration of partial scans.")
    parser.add_argument("--version", action="version", version=f"vemreg {__version__} (defaults {config_digest()})")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("register-pair", parents=[common], help="register scan 2 to scan 1")
    p.add_argument("scan1")
    p.add_argument("scan2")
    p.add_argument("--out", help="transform JSON (default: stdout)")
    p.add_argument("--trace", help="per-iteration trace CSV")
    p.add_argument("--dump-vem", help="per-point CSV at the result")

    p = sub.add_parser("register-multi", parents=[common], help="register scans 2..M to scan 1")
    p.add_argument("scans", nargs="+")
    p.add_argument("--prior", help="transform set JSON offered as an extra candidate")
    p.add_argument("--out", help="transform set JSON (default: stdout)")

    p = sub.add_parser("synth", parents=[common], help="generate synthetic benchmark pairs")
    p.add_argument("--meshes", nargs="*", help="mesh files or directories (default: builtin meshes)")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int, default=RenderSettings.width)
    p.add_argument("--height", type=int, default=RenderSettings.height)

    p = sub.add_parser("bench", parents=[common], help="run methods over a pair manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="vem-pso,pca", help=f"comma-separated, from: {', '.join(METHODS)}")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--records", help="per-trial CSV")

    p = sub.add_parser("dump-vem", parents=[common], help="per-point visibility classification")
    p.add_argument("scan1")
    p.add_argument("scan2")
    p.add_argument("--transform", help="transform JSON (default: identity)")
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    env_level = os.getenv("VEMREG_LOG_LEVEL", "INFO").upper()
    configure_logging(env_level if env_level in LOG_LEVELS else "INFO")
    try:
        cfg = load_config(
            args.config,
            seed=args.seed,
            deterministic=True if args.deterministic else None,
            jobs=args.jobs,
            log_level=args.log_level,
        )
        configure_logging(cfg.log_level)
        return COMMANDS[args.command](args, cfg)
    except Exception as e:
        error = format_exception(e)
        logger.error("%s", error.message)
        if error.details:
            logger.error("details: %s", json.dumps(error.details, default=str))
        for suggestion in error.suggestions:
            logger.error("suggestion: %s", suggestion)
        if error.exit_code == 1:
            logger.debug("internal error", exc_info=e)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
