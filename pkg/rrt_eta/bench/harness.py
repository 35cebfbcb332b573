"""Seeded batch runs across heuristics, metric export and trajectory verification."""

import asyncio
import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from rrt_eta.core.robustness_core import Semantics, Trace, agm_robustness, minmax_robustness, subformula_robustness
from rrt_eta.core.rrt_eta_planner import PlanResult, RrtEtaPlanner
from rrt_eta.core.stl_formula import format_formula
from rrt_eta.models.planner_config import Heuristic
from rrt_eta.models.scenario import Scenario

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["run_id", "heuristic", "seed", "iter", "wall_ms", "best_lo", "best_hi", "gap", "tree_size", "solved"]
_INT_COLUMNS = {"seed", "iter", "tree_size"}
_FLOAT_COLUMNS = {"wall_ms", "best_lo", "best_hi", "gap"}
VERIFY_TOL = 1e-9

States = Union[np.ndarray, Sequence[Sequence[float]]]


@dataclass
class RunRecord:
    """Outcome of one (heuristic, seed) planner run."""

    run_id: str
    heuristic: str
    seed: int
    status: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    first_solution_iter: Optional[int] = None
    eta: Optional[float] = None
    best_lo: Optional[float] = None
    best_hi: Optional[float] = None
    states: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    minmax_scale: float = 1.0
    error: Optional[str] = None
    wall_s: Optional[float] = None

    @property
    def solved(self) -> bool:
        return self.status == "solved"

    @property
    def failed(self) -> bool:
        return self.status == "failed"


def make_run_id(scenario_name: str, heuristic: str, seed: int) -> str:
    return f"{scenario_name}-{heuristic}-{seed}"


def record_from_result(run_id: str, seed: int, result: PlanResult) -> RunRecord:
    rows = [{"run_id": run_id, "heuristic": result.heuristic, "seed": seed, **row} for row in result.metrics]
    return RunRecord(
        run_id=run_id,
        heuristic=result.heuristic,
        seed=seed,
        status=result.status.value,
        rows=rows,
        first_solution_iter=result.first_solution_iter,
        eta=result.eta,
        best_lo=result.interval.lo,
        best_hi=result.interval.hi,
        states=result.states,
        controls=result.controls,
        minmax_scale=result.minmax_scale,
    )


def run_one(scenario: Scenario, heuristic: Union[Heuristic, str], seed: int,
            max_iters: Optional[int] = None) -> RunRecord:
    """Plan once; planner errors become a failed record instead of propagating."""
    heuristic = Heuristic(heuristic)
    run_id = make_run_id(scenario.name, heuristic.value, seed)
    started = time.perf_counter()
    try:
        config = scenario.planner_config(heuristic, seed, max_iters)
        result = RrtEtaPlanner(scenario.phi, scenario.system, config).run(scenario.q_init)
        record = record_from_result(run_id, seed, result)
    except Exception as e:
        logger.error(f"Run {run_id} failed: {e}", exc_info=True)
        record = RunRecord(run_id=run_id, heuristic=heuristic.value, seed=seed, status="failed", error=str(e))
    record.wall_s = round(time.perf_counter() - started, 3)
    return record


async def run_batch(
    scenario: Scenario,
    heuristics: Iterable[Union[Heuristic, str]],
    seeds: Iterable[int],
    workers: int = 1,
    max_iters: Optional[int] = None,
    show_progress: bool = True,
) -> List[RunRecord]:
    """Run every (heuristic, seed) pair, at most ``workers`` at a time.

    With ``workers > 1`` runs go to a process pool; otherwise they run inline.
    Records come back ordered by heuristic then seed regardless of completion order.
    """
    jobs: List[Tuple[Heuristic, int]] = [(Heuristic(h), int(s)) for h in heuristics for s in seeds]
    if not jobs:
        return []
    semaphore = asyncio.Semaphore(max(1, workers))
    loop = asyncio.get_running_loop()
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    results: Dict[str, RunRecord] = {}

    logger.info(f"Running {len(jobs)} run(s) of '{scenario.name}' with {max(1, workers)} worker(s)")
    progress = tqdm(total=len(jobs), desc=scenario.name, unit="run", disable=not show_progress)

    async def _run(heuristic: Heuristic, seed: int) -> None:
        run_id = make_run_id(scenario.name, heuristic.value, seed)
        async with semaphore:
            try:
                if executor is None:
                    record = run_one(scenario, heuristic, seed, max_iters)
                else:
                    record = await loop.run_in_executor(executor, run_one, scenario, heuristic, seed, max_iters)
            except Exception as e:
                logger.error(f"Worker for {run_id} crashed: {e}", exc_info=True)
                record = RunRecord(run_id=run_id, heuristic=heuristic.value, seed=seed, status="failed", error=str(e))
        results[record.run_id] = record
        progress.update(1)

    try:
        with logging_redirect_tqdm():
            await asyncio.gather(*[_run(h, s) for h, s in jobs])
    finally:
        progress.close()
        if executor is not None:
            executor.shutdown(wait=True)

    records = [results[make_run_id(scenario.name, h.value, s)] for h, s in jobs]
    solved = sum(r.solved for r in records)
    failed = sum(r.failed for r in records)
    logger.info(f"📊 Batch done: {solved}/{len(records)} solved, {failed} failed")
    return records


# Metrics files


def _metrics_format(path: Path, fmt: Optional[str]) -> str:
    chosen = (fmt or path.suffix.lstrip(".") or "csv").lower()
    if chosen not in ("csv", "json"):
        raise ValueError(f"Unsupported metrics format '{chosen}' (expected csv or json)")
    return chosen


def _minmax_scale(records: Sequence[RunRecord]) -> Optional[float]:
    scales = {r.minmax_scale for r in records if r.heuristic == Heuristic.MINMAX.value}
    return scales.pop() if len(scales) == 1 else None


def export_metrics(records: Sequence[RunRecord], path: Union[str, Path], fmt: Optional[str] = None) -> Path:
    """Write one row per iteration per run with columns in ``METRIC_COLUMNS`` order.

    Min-max runs record their normalization divisor in the header (a ``#`` comment
    line for csv, a ``minmax_scale`` key for json).
    """
    out = Path(path)
    chosen = _metrics_format(out, fmt)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = [row for record in records for row in record.rows]
    scale = _minmax_scale(records)

    if chosen == "json":
        payload: Dict[str, Any] = {"columns": METRIC_COLUMNS, "rows": [[row[c] for c in METRIC_COLUMNS] for row in rows]}
        if scale is not None:
            payload["minmax_scale"] = scale
        with open(out, "w") as f:
            json.dump(payload, f, indent=2)
        return out

    with open(out, "w", newline="") as f:
        if scale is not None:
            f.write(f"# minmax_scale={scale!r}\n")
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: (repr(row[c]) if c in _FLOAT_COLUMNS else row[c]) for c in METRIC_COLUMNS})
    return out


def _typed(column: str, value: Any) -> Any:
    if column in _INT_COLUMNS:
        return int(value)
    if column in _FLOAT_COLUMNS:
        return float(value)
    if column == "solved":
        return value if isinstance(value, bool) else str(value) == "True"
    return str(value)


def import_metrics(path: Union[str, Path], fmt: Optional[str] = None) -> List[Dict[str, Any]]:
    """Read rows written by ``export_metrics`` back with their original types."""
    source = Path(path)
    chosen = _metrics_format(source, fmt)
    if chosen == "json":
        with open(source) as f:
            payload = json.load(f)
        columns = payload["columns"]
        return [{c: _typed(c, v) for c, v in zip(columns, values)} for values in payload["rows"]]
    with open(source, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    reader = csv.DictReader(lines)
    return [{c: _typed(c, row[c]) for c in METRIC_COLUMNS} for row in reader]


# Trajectory files


def export_states(result: Union[PlanResult, RunRecord], path: Union[str, Path]) -> Path:
    """Write the trajectory as csv columns ``t, x0 .. x{n-1}`` with the run outcome in a comment line."""
    if result.states is None:
        raise ValueError("Result has no trajectory to export")
    states = np.asarray(result.states, dtype=float)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        f.write(f"# solved={result.solved} eta={result.eta!r}\n")
        writer = csv.writer(f)
        writer.writerow(["t"] + [f"x{i}" for i in range(states.shape[1])])
        for t, state in enumerate(states):
            writer.writerow([t] + [repr(float(v)) for v in state])
    return out


def read_states_header(path: Union[str, Path]) -> Dict[str, Any]:
    """Run outcome stored by ``export_states``: ``{"solved": bool, "eta": float | None}``."""
    with open(path) as f:
        first = f.readline().strip()
    if not first.startswith("#"):
        return {}
    fields = dict(item.split("=", 1) for item in first.lstrip("# ").split())
    eta = fields.get("eta", "None")
    return {"solved": fields.get("solved") == "True", "eta": None if eta == "None" else float(eta)}


def load_states(path: Union[str, Path]) -> np.ndarray:
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    rows = [[float(v) for v in row[1:]] for row in reader if row]
    return np.asarray(rows, dtype=float).reshape(len(rows), len(header) - 1)


# Verification


@dataclass
class VerificationReport:
    agm: float
    minmax: float
    subformulas: Dict[str, float]
    ok: bool
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {"agm": self.agm, "minmax": self.minmax, "subformulas": self.subformulas, "ok": self.ok,
                "message": self.message}


def verify_trajectory(
    states: Union[str, Path, States],
    scenario: Scenario,
    solved: Optional[bool] = None,
    expected_eta: Optional[float] = None,
) -> VerificationReport:
    """Recompute AGM and min-max robustness of a trajectory and check them against the run.

    When ``states`` is a file written by ``export_states`` the run's solved flag
    and eta come from its header unless given explicitly.

    Raises:
        IncompleteTraceError: Trajectory shorter than the formula horizon
    """
    if isinstance(states, (str, Path)):
        header = read_states_header(states)
        solved = header.get("solved") if solved is None else solved
        expected_eta = header.get("eta") if expected_eta is None else expected_eta
        samples = load_states(states)
    else:
        samples = np.asarray(states, dtype=float)

    trace = Trace(samples)
    agm = agm_robustness(trace, scenario.phi)
    minmax = minmax_robustness(trace, scenario.phi)
    per_node = subformula_robustness(trace, scenario.phi, Semantics.AGM)
    subformulas = {f"{node.node_id}: {format_formula(node)}": per_node[node.node_id] for node in scenario.phi.walk()}

    problems = []
    if solved is not None:
        if solved and not (agm > 0.0 and minmax > 0.0):
            problems.append(f"run reported solved but agm={agm:.6g}, minmax={minmax:.6g}")
        if not solved and agm > 0.0 and minmax > 0.0:
            problems.append("run reported unsolved but the trajectory satisfies the formula")
    if expected_eta is not None and abs(agm - expected_eta) > VERIFY_TOL:
        problems.append(f"agm={agm!r} differs from reported eta={expected_eta!r}")
    if (agm > 0.0) != (minmax > 0.0):
        problems.append(f"agm and minmax disagree in sign ({agm:.6g} vs {minmax:.6g})")

    report = VerificationReport(agm=agm, minmax=minmax, subformulas=subformulas, ok=not problems,
                                message="; ".join(problems))
    if report.ok:
        logger.info(f"✅ Verified: agm={agm:.6f}, minmax={minmax:.6f}")
    else:
        logger.warning(f"Verification mismatch: {report.message}")
    return report


def summarize(records: Sequence[RunRecord]) -> Dict[str, Any]:
    """Per-heuristic medians of final lower bound and iterations to first solution, solved counts and wall time.

    ``total_wall_s`` sums the per-run planning time; with several workers the
    batch finishes sooner than that.
    """
    summary: Dict[str, Any] = {}
    for heuristic in sorted({r.heuristic for r in records}):
        group = [r for r in records if r.heuristic == heuristic]
        finals = [r.best_lo for r in group if r.best_lo is not None]
        firsts = [r.first_solution_iter for r in group if r.first_solution_iter is not None]
        walls = [r.wall_s for r in group if r.wall_s is not None]
        summary[heuristic] = {
            "runs": len(group),
            "solved": sum(r.solved for r in group),
            "failed": sum(r.failed for r in group),
            "median_final_lo": float(np.median(finals)) if finals else None,
            "median_first_solution_iter": float(np.median(firsts)) if firsts else None,
            "total_wall_s": round(float(sum(walls)), 3) if walls else None,
            "max_wall_s": max(walls) if walls else None,
        }
    stochastic = summary.get(Heuristic.AGM_STOCHASTIC.value, {}).get("median_first_solution_iter")
    fpl = summary.get(Heuristic.AGM_FPL.value, {}).get("median_first_solution_iter")
    summary["stochastic_to_fpl_iteration_ratio"] = stochastic / fpl if stochastic and fpl else None
    return summary
