"""Scenario files: system, predicates, formula, initial state and planner overrides."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import yaml

from rrt_eta.core.dynamics import InfeasibleStateError, PlanarArm, SystemModel, build_system
from rrt_eta.core.stl_formula import Formula, Predicate, PredicateError, RegionHint, horizon, parse_formula
from rrt_eta.models.planner_config import ConfigError, Heuristic, PlannerConfig

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "bench" / "scenarios"
SCENARIO_SUFFIXES = (".json", ".yaml", ".yml")


class ScenarioError(ValueError):
    """Invalid scenario; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class Scenario:
    name: str
    system: SystemModel
    system_spec: Dict[str, Any]
    predicates: Dict[str, Predicate]
    formula_text: str
    phi: Formula
    q_init: np.ndarray
    config: PlannerConfig
    heuristic: Heuristic
    seeds: List[int] = field(default_factory=lambda: [0])
    duration: Optional[float] = None
    source: Optional[Path] = None
    planner_overrides: Dict[str, Any] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return horizon(self.phi)

    def apply_base_config(self, base: PlannerConfig) -> None:
        """Layer this scenario's planner section over ``base`` (e.g. settings from config.yaml)."""
        data = base.to_dict()
        overrides = dict(self.planner_overrides)
        composition = {**data["composition"], **overrides.pop("composition", {})}
        data.update(overrides)
        data["composition"] = composition
        data["heuristic"] = self.heuristic.value
        self.config = PlannerConfig(**data)

    def planner_config(self, heuristic: Optional[Heuristic] = None, seed: Optional[int] = None,
                       max_iters: Optional[int] = None) -> PlannerConfig:
        """Scenario planner settings with per-run overrides applied."""
        return self.config.with_overrides(
            heuristic=(heuristic or self.heuristic).value, rng_seed=seed, max_iters=max_iters)


def resolve_scenario_path(path: Union[str, Path]) -> Path:
    """A path as given if it exists, else a bundled scenario of that name."""
    candidate = Path(path)
    if candidate.exists():
        return candidate
    for suffix in ("",) + SCENARIO_SUFFIXES:
        bundled = SCENARIO_DIR / f"{candidate.name}{suffix}"
        if bundled.is_file():
            return bundled
    raise FileNotFoundError(f"Scenario not found: {path}")


def bundled_scenarios() -> List[str]:
    return sorted(p.stem for p in SCENARIO_DIR.iterdir() if p.suffix in SCENARIO_SUFFIXES)


def _read(path: Path) -> Dict[str, Any]:
    with open(path) as f:
        data = yaml.safe_load(f) if path.suffix in (".yaml", ".yml") else json.load(f)
    if not isinstance(data, dict):
        raise ScenarioError("<root>", "scenario must be a mapping")
    return data


def _require(data: Mapping[str, Any], key: str, prefix: str = "") -> Any:
    if key not in data:
        raise ScenarioError(f"{prefix}{key}", "missing required field")
    return data[key]


def _hint(spec: Mapping[str, Any], path: str) -> RegionHint:
    try:
        if "center" in spec:
            return RegionHint(axes=tuple(spec["axes"]), center=tuple(spec["center"]), radius=float(spec["radius"]))
        return RegionHint(axes=tuple(spec["axes"]), lower=tuple(spec["lower"]), upper=tuple(spec["upper"]))
    except (KeyError, TypeError) as e:
        raise ScenarioError(path, f"malformed region hint ({e})") from e
    except PredicateError as e:
        raise ScenarioError(path, str(e)) from e


def build_predicate(pid: str, spec: Mapping[str, Any], path: str = "predicates") -> Predicate:
    """Predicate from its scenario entry (``kind`` is affine, ball or box).

    Raises:
        ScenarioError: The entry is malformed; ``field`` points at the predicate or the offending key
    """
    where = f"{path}.{pid}"
    if not isinstance(spec, Mapping):
        raise ScenarioError(where, f"predicate entry must be a mapping, got {type(spec).__name__}")
    kind = spec.get("kind", "affine")
    try:
        hint = _hint(spec["region_hint"], f"{where}.region_hint") if "region_hint" in spec else None
        threshold = float(spec.get("threshold", 0.0))
        if kind == "affine":
            return Predicate.affine(pid, _require(spec, "coeffs", f"{where}."), offset=float(spec.get("offset", 0.0)),
                                    threshold=threshold, scale=float(spec.get("scale", 1.0)), region_hint=hint)
        if kind == "ball":
            scale = spec.get("scale")
            return Predicate.ball(pid, _require(spec, "axes", f"{where}."), _require(spec, "center", f"{where}."),
                                  float(_require(spec, "radius", f"{where}.")), threshold=threshold,
                                  scale=None if scale is None else float(scale), region_hint=hint,
                                  angular=spec.get("angular", ()))
        if kind == "box":
            return Predicate.box(pid, _require(spec, "axes", f"{where}."), _require(spec, "lower", f"{where}."),
                                 _require(spec, "upper", f"{where}."), threshold=threshold,
                                 scale=float(spec.get("scale", 1.0)), region_hint=hint)
    except ScenarioError:
        raise
    except PredicateError as e:
        raise ScenarioError(where, str(e)) from e
    except (TypeError, ValueError, AttributeError) as e:
        raise ScenarioError(where, f"malformed predicate ({e})") from e
    raise ScenarioError(f"{where}.kind", f"unknown predicate kind '{kind}' (expected affine, ball or box)")


def scenario_from_dict(data: Mapping[str, Any], source: Optional[Path] = None) -> Scenario:
    """Validate a scenario mapping and build its objects; errors name the offending field."""
    name = str(data.get("name", source.stem if source else "scenario"))

    system_spec = dict(_require(data, "system"))
    try:
        system = build_system(system_spec)
    except (ValueError, TypeError) as e:
        raise ScenarioError("system", str(e)) from e

    raw_predicates = _require(data, "predicates")
    if not isinstance(raw_predicates, dict):
        raise ScenarioError("predicates", "must be a mapping of id to predicate")
    predicate_table = {pid: build_predicate(pid, spec) for pid, spec in raw_predicates.items()}
    for pid, predicate in predicate_table.items():
        if predicate.state_dim > system.state_dim:
            raise ScenarioError(f"predicates.{pid}",
                                f"reads axis {predicate.state_dim - 1} of a {system.state_dim}-dim state")

    formula_text = str(_require(data, "formula"))
    phi = parse_formula(formula_text, predicate_table, dt=system.dt)

    q_raw = np.asarray(_require(data, "q_init"), dtype=float)
    if isinstance(system, PlanarArm) and q_raw.shape == (system.n_joints,):
        q_raw = system.augment(q_raw)
    try:
        q_init = system.require_in_bounds(q_raw)
    except InfeasibleStateError as e:
        raise ScenarioError("q_init", str(e)) from e

    duration = data.get("duration")
    if duration is not None and horizon(phi) * system.dt > float(duration) + 1e-9:
        raise ScenarioError("duration", f"formula horizon {horizon(phi)} steps exceeds {duration} s at dt={system.dt}")

    planner_data = dict(data.get("planner", {}))
    heuristic_value = data.get("heuristic", planner_data.get("heuristic", Heuristic.AGM_FPL.value))
    try:
        heuristic = Heuristic(heuristic_value)
        planner_data["heuristic"] = heuristic.value
        if "minmax_scale" in data:
            planner_data["minmax_scale"] = data["minmax_scale"]
        config = PlannerConfig(**planner_data)
    except ValueError as e:
        field_name = "heuristic" if not isinstance(e, ConfigError) else "planner"
        raise ScenarioError(field_name, str(e)) from e

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ScenarioError("seeds", "must be a list of integers")

    return Scenario(name=name, system=system, system_spec=system_spec, predicates=predicate_table,
                    formula_text=formula_text, phi=phi, q_init=q_init, config=config, heuristic=heuristic,
                    seeds=list(seeds), duration=None if duration is None else float(duration), source=source,
                    planner_overrides=planner_data)


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Load a scenario file (JSON or YAML) or a bundled scenario by name.

    Raises:
        FileNotFoundError: Neither a file nor a bundled scenario
        ScenarioError: Schema violation, with the dotted field path
        FormulaError: Formula text does not parse against the predicate table
    """
    resolved = resolve_scenario_path(path)
    scenario = scenario_from_dict(_read(resolved), resolved)
    logger.debug(f"Loaded scenario '{scenario.name}' from {resolved} (horizon {scenario.horizon} steps)")
    return scenario
