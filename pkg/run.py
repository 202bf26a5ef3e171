#!/usr/bin/env python3
"""
DiffusionPipe Planner - Command Line Entry Point
Plan pipeline-parallel training for a profiled diffusion model, or serve the planner API
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_PLAN = 2


def load_environment(quiet: bool = False):
    """Load environment variables from .env file"""
    # Look for .env file in current directory and parent directories
    env_paths = [
        Path.cwd() / ".env",
        Path.cwd().parent / ".env",
        Path(__file__).parent / ".env"
    ]

    for env_path in env_paths:
        if env_path.exists():
            load_dotenv(env_path)
            if not quiet:
                print(f"✅ Loaded environment from: {env_path}")
            return

    if not quiet:
        print("⚠️  No .env file found. Using default configuration.")
        print("   Create a .env file based on env.example for custom configuration.")


def _int_list(text: str) -> List[int]:
    try:
        values = [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DiffusionPipe Planner")
    commands = parser.add_subparsers(dest="command", required=True)

    plan = commands.add_parser("plan", help="Search the best pipeline plan for a profile")
    plan.add_argument("--profile", required=True, help="Path to the layer cost profile (JSON)")
    plan.add_argument("--world-size", type=int, required=True, help="Number of devices")
    plan.add_argument("--bw-ar", type=float, required=True, help="All-reduce bandwidth, bytes/s")
    plan.add_argument("--lat-ar", type=float, required=True, help="All-reduce latency, seconds")
    plan.add_argument("--bw-p2p", type=float, required=True, help="Point-to-point bandwidth, bytes/s")
    plan.add_argument("--lat-p2p", type=float, required=True, help="Point-to-point latency, seconds")
    plan.add_argument("--batch", type=int, required=True, help="Global training batch")
    plan.add_argument("--stages", type=_int_list, help="Stage counts to search, e.g. 1,2,4")
    plan.add_argument("--microbatches", type=_int_list, help="Micro-batch counts to search")
    plan.add_argument("--group-sizes", type=_int_list, help="Pipeline group sizes to search")
    plan.add_argument("--selfcond-prob", type=float, help="Self-conditioning probability (overrides the profile)")
    plan.add_argument("--emit-plan", help="Write the plan document to this path")
    plan.add_argument("--emit-trace", help="Write a Chrome trace of the selected schedule to this path")
    plan.add_argument("--bubble-min-ms", type=float, help="Smallest bubble worth filling (overrides BUBBLE_MIN_MS)")
    plan.add_argument("--unequal-replication", action="store_true", help="Allow a different replica count per stage")
    plan.add_argument("--workers", type=int, help="Processes for the grid search (overrides SEARCH_WORKERS)")

    serve = commands.add_parser("serve", help="Run the planner API")
    serve.add_argument("--host", help="Host to bind to (overrides HOST env var)")
    serve.add_argument("--port", type=int, help="Port to bind to (overrides PORT env var)")
    serve.add_argument("--debug", action="store_true", help="Enable debug mode (overrides DEBUG env var)")
    serve.add_argument("--reload", action="store_true", help="Enable auto-reload")
    serve.add_argument("--workers", type=int, help="Number of server workers")

    schema = commands.add_parser("schema", help="Write the JSON Schema of the profile document")
    schema.add_argument("--output", default="docs/profile.schema.json", help="Destination path")
    return parser


def print_report(report):
    cfg = report.plan.config
    print("🧭 DiffusionPipe plan")
    print("=" * 50)
    print(f"📐 Stages: {cfg.num_stages}  Micro-batches: {cfg.num_microbatches}  Group size: {cfg.group_size}")
    print(f"🧩 Mode: {report.plan.mode.value}")
    for stage in report.plan.stages:
        lo, hi = stage.layer_range
        print(f"   {stage.direction.value:>4} backbone {stage.backbone} layers [{lo}, {hi}) on devices {list(stage.devices)}")
    print(f"⏱️  Predicted iteration: {report.predicted_iter_time:.6f} s")
    print(f"🫧 Bubble ratio: {report.bubble_ratio_before:.2%} -> {report.bubble_ratio_after:.2%}")
    print(f"🚀 Throughput: {report.throughput:.2f} samples/s")
    print(f"🔍 Evaluated {len(report.evaluated)} point(s), {len(report.failures)} infeasible")
    print("=" * 50)


def run_plan(args) -> int:
    from app.config import settings
    from app.errors import NoFeasiblePlanError, PlannerError
    from app.models.profile import ClusterConfig, CommCosts
    from app.services.planner import default_space, emit_plan, search
    from app.services.profile import load_profile
    from app.services.trace import export_trace, write_trace
    from pydantic import ValidationError as PydanticValidationError

    try:
        profile = load_profile(args.profile)
        cluster = ClusterConfig(
            world_size=args.world_size,
            comm=CommCosts(
                bandwidth_ar=args.bw_ar, latency_ar=args.lat_ar,
                bandwidth_p2p=args.bw_p2p, latency_p2p=args.lat_p2p,
            ),
        )
        equal_replication = False if args.unequal_replication else settings.equal_replication
        space = default_space(
            profile, args.world_size, args.batch,
            stage_counts=args.stages, microbatch_counts=args.microbatches, group_sizes=args.group_sizes,
            equal_replication=equal_replication,
        )
        report = search(
            profile, cluster, space,
            selfcond_prob=args.selfcond_prob,
            bubble_min=None if args.bubble_min_ms is None else args.bubble_min_ms / 1000.0,
            equal_replication=equal_replication,
            workers=args.workers,
        )
        print_report(report)
        if args.emit_plan:
            emit_plan(report, args.emit_plan)
            print(f"📝 Plan written to {args.emit_plan}")
        if args.emit_trace:
            write_trace(export_trace(report.schedule, report.fill), args.emit_trace)
            print(f"📊 Trace written to {args.emit_trace}")
        return EXIT_OK

    except NoFeasiblePlanError as e:
        print(f"❌ {e}", file=sys.stderr)
        for failure in e.diagnostics:
            print(
                f"   S={failure['num_stages']} M={failure['num_microbatches']} D={failure['group_size']}: "
                f"{failure['reason']}",
                file=sys.stderr,
            )
        return EXIT_NO_PLAN
    except (PlannerError, PydanticValidationError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR


def run_schema(args) -> int:
    from app.errors import PlannerError
    from app.services.profile import write_profile_schema

    try:
        write_profile_schema(args.output)
    except PlannerError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR
    print(f"📝 Profile schema written to {args.output}")
    return EXIT_OK


def run_serve(args) -> int:
    import uvicorn
    from app.config import settings

    host = args.host or settings.host
    port = args.port or settings.port
    reload = args.reload or args.debug or settings.debug
    print("🚀 DiffusionPipe Planner API")
    print("=" * 50)
    print(f"📍 Host: {host}")
    print(f"🔌 Port: {port}")
    print(f"🔄 Auto-reload: {reload}")
    print(f"📚 API Documentation: http://{host}:{port}/docs")
    print(f"🏥 Health Check: http://{host}:{port}/health")
    print("=" * 50)
    try:
        uvicorn.run(
            "main:app",
            host=host,
            port=port,
            reload=reload,
            log_level=settings.log_level.lower(),
            workers=args.workers if args.workers and args.workers > 1 else None
        )
    except KeyboardInterrupt:
        print("\n🛑 Server stopped by user")
    except Exception as e:
        print(f"\n❌ Error starting server: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    load_environment(quiet=args.command in ("plan", "schema"))

    from app.config import settings
    logging.basicConfig(level=settings.log_level.upper())

    if args.command == "plan":
        return run_plan(args)
    if args.command == "schema":
        return run_schema(args)
    return run_serve(args)


if __name__ == "__main__":
    sys.exit(main())
