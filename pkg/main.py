"""RRT-eta command line entry point."""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO

from rrt_eta.bench.harness import (
    RunRecord,
    export_metrics,
    export_states,
    record_from_result,
    run_batch,
    summarize,
    verify_trajectory,
)
from rrt_eta.core.interval_monitor import MonitorState
from rrt_eta.core.rrt_eta_planner import RrtEtaPlanner
from rrt_eta.models.planner_config import DEFAULT_CONFIG_PATH, Heuristic, load_config
from rrt_eta.models.scenario import Scenario, load_scenario

# Set up logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNSOLVED = 2


def parse_seeds(text: str) -> List[int]:
    """``"0..9"`` (inclusive range) or ``"0,3,7"``."""
    if ".." in text:
        start, end = text.split("..", 1)
        first, last = int(start), int(end)
        if last < first:
            raise argparse.ArgumentTypeError(f"Empty seed range '{text}'")
        return list(range(first, last + 1))
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Invalid seed list '{text}'") from e


def parse_heuristics(text: str) -> List[Heuristic]:
    try:
        return [Heuristic(h.strip()) for h in text.split(",") if h.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="rrt-eta",
        description="Plan, verify and benchmark STL motion plans that maximize AGM robustness.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  rrt-eta plan unicycle_reach_avoid --heuristic agm_fpl --seed 3 --out runs/
  rrt-eta verify runs/unicycle_reach_avoid-agm_fpl-3.states.csv unicycle_reach_avoid
  rrt-eta bench unicycle_reach_avoid --seeds 0..9 --heuristics minmax,agm_stochastic,agm_fpl --workers 4
""",
    )
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        metavar="PATH",
        help=f"Planner defaults YAML (default: {DEFAULT_CONFIG_PATH} when present)",
    )
    parser.add_argument("--verbose", action="store_true", help="Show debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    plan_cmd = commands.add_parser("plan", help="Run the planner once on a scenario")
    plan_cmd.add_argument("scenario", help="Scenario file or bundled scenario name")
    plan_cmd.add_argument("--heuristic", type=Heuristic, choices=list(Heuristic), default=None)
    plan_cmd.add_argument("--seed", type=int, default=None, help="Random seed (default: first scenario seed)")
    plan_cmd.add_argument("--iters", type=int, default=None, help="Iteration budget")
    plan_cmd.add_argument("--out", type=Path, default=Path("runs"), help="Output directory (default: runs)")
    plan_cmd.add_argument("--metrics", choices=["csv", "json"], default="csv", help="Metrics file format")
    plan_cmd.add_argument("--monitor-debug", action="store_true",
                          help="Write per-node monitor updates of the final trajectory as JSON lines")
    plan_cmd.add_argument("--progress", action="store_true", help="Show a progress bar")

    verify_cmd = commands.add_parser("verify", help="Recheck a states file against a scenario")
    verify_cmd.add_argument("states", type=Path, help="States csv written by 'plan'")
    verify_cmd.add_argument("scenario", help="Scenario file or bundled scenario name")

    bench_cmd = commands.add_parser("bench", help="Seeded batch across heuristics")
    bench_cmd.add_argument("scenario", help="Scenario file or bundled scenario name")
    bench_cmd.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0..9 or 0,1,2 (default: scenario seeds)")
    bench_cmd.add_argument("--heuristics", type=parse_heuristics,
                           default=[Heuristic.MINMAX, Heuristic.AGM_STOCHASTIC, Heuristic.AGM_FPL],
                           help="Comma-separated heuristics (default: all)")
    bench_cmd.add_argument("--iters", type=int, default=None, help="Iteration budget per run")
    bench_cmd.add_argument("--workers", type=int, default=1, help="Parallel runs (default: 1)")
    bench_cmd.add_argument("--out", type=Path, default=Path("runs"), help="Output directory (default: runs)")
    bench_cmd.add_argument("--metrics", choices=["csv", "json"], default="csv", help="Metrics file format")
    return parser.parse_args(argv)


def _load(args: argparse.Namespace) -> Scenario:
    scenario = load_scenario(args.scenario)
    if args.config is not None or DEFAULT_CONFIG_PATH.exists():
        scenario.apply_base_config(load_config(args.config))
    return scenario


class JsonLinesSink:
    """Monitor debug sink writing one JSON object per line."""

    def __init__(self, stream: TextIO):
        self.stream = stream
        self.count = 0

    def __call__(self, record: Dict[str, Any]) -> None:
        self.stream.write(json.dumps(record) + "\n")
        self.count += 1


def write_monitor_debug(scenario: Scenario, states: Any, path: Path) -> int:
    """Replay ``states`` through a fresh monitor, logging every node update to ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        sink = JsonLinesSink(f)
        monitor = MonitorState(scenario.phi, 0, debug_sink=sink)
        for t, state in enumerate(states):
            monitor.step(state, t)
    return sink.count


def cmd_plan(args: argparse.Namespace) -> int:
    scenario = _load(args)
    seed = args.seed if args.seed is not None else scenario.seeds[0]
    heuristic = args.heuristic or scenario.heuristic
    config = scenario.planner_config(heuristic, seed, args.iters).with_overrides(show_progress=args.progress or None)
    planner = RrtEtaPlanner(scenario.phi, scenario.system, config)
    result = planner.run(scenario.q_init)

    record = record_from_result(f"{scenario.name}-{heuristic.value}-{seed}", seed, result)
    metrics_path = export_metrics([record], args.out / f"{record.run_id}.metrics.{args.metrics}", args.metrics)
    states_path = export_states(result, args.out / f"{record.run_id}.states.csv")
    logger.info(f"Metrics written to {metrics_path}, trajectory to {states_path}")
    if args.monitor_debug:
        debug_path = args.out / f"{record.run_id}.monitor.jsonl"
        count = write_monitor_debug(scenario, result.states, debug_path)
        logger.info(f"Monitor debug: {count} records written to {debug_path}")
    if planner.ik_cache is not None:
        logger.info(f"IK cache: {planner.ik_cache.get_statistics()}")
    return EXIT_OK if result.solved else EXIT_UNSOLVED


def cmd_verify(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    report = verify_trajectory(args.states, scenario)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_UNSOLVED


def _verify_solved(records: Sequence[RunRecord], scenario: Scenario) -> int:
    mismatches = 0
    for record in records:
        if record.solved and record.states is not None:
            report = verify_trajectory(record.states, scenario, solved=True, expected_eta=record.eta)
            if not report.ok:
                logger.warning(f"Run {record.run_id} failed verification: {report.message}")
                mismatches += 1
    return mismatches


async def cmd_bench(args: argparse.Namespace) -> int:
    scenario = _load(args)
    seeds = args.seeds or scenario.seeds
    records = await run_batch(scenario, args.heuristics, seeds, workers=args.workers, max_iters=args.iters)
    path = export_metrics(records, args.out / f"{scenario.name}.bench.{args.metrics}", args.metrics)
    logger.info(f"Metrics written to {path}")
    summary = summarize(records)
    for heuristic, stats in summary.items():
        logger.info(f"📊 {heuristic}: {stats}")
    mismatches = _verify_solved(records, scenario)
    if any(r.failed for r in records):
        return EXIT_ERROR
    return EXIT_UNSOLVED if mismatches else EXIT_OK


async def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    if args.command == "plan":
        return cmd_plan(args)
    if args.command == "verify":
        return cmd_verify(args)
    return await cmd_bench(args)


def sync_main():
    """Synchronous main entry point for the console script."""
    try:
        exit_code = asyncio.run(main())
        sys.exit(exit_code)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(EXIT_ERROR)
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        sys.exit(EXIT_ERROR)


if __name__ == "__main__":
    sync_main()
