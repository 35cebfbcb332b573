"""RRT-eta tree search guided by AGM robustness intervals and DIAS steering."""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from rrt_eta.core.dias_guidance import DiasField
from rrt_eta.core.dynamics import (
    REFINE_GATE,
    ControlTrajectory,
    IkCache,
    PlanarArm,
    SystemModel,
    adaptive_sample,
    connection_segment,
    refine_connection,
    rollout,
    rollout_batch,
    shoot_connection,
)
from rrt_eta.core.interval_monitor import BatchIntervalMonitor, MonitorState
from rrt_eta.core.robustness_core import RobustnessInterval, Semantics, Trace, agm_robustness
from rrt_eta.core.stl_formula import Formula, active_predicates, horizon
from rrt_eta.models.planner_config import Heuristic, PlannerConfig

logger = logging.getLogger(__name__)

Monitor = Union[MonitorState, BatchIntervalMonitor]
StateDifference = Callable[[np.ndarray, np.ndarray], np.ndarray]

VERIFY_TOL = 1e-9


class PlannerInputError(ValueError):
    """Planner called with an initial state outside the state set or a malformed formula."""


class NoSolutionError(LookupError):
    """No tree node satisfies the formula yet."""


class MonitorConsistencyError(RuntimeError):
    """Offline robustness of an extracted solution disagrees with its monitor value."""


class PlanStatus(str, Enum):
    SOLVED = "solved"
    EXHAUSTED = "exhausted"


class UpdateOutcome(str, Enum):
    ADMITTED = "admitted"
    REWIRED = "rewired"
    REJECTED = "rejected"


@dataclass
class TreeNode:
    """Tree vertex. ``states`` is the segment from the parent (parent state excluded)."""

    id: int
    state: np.ndarray
    t: int
    parent: Optional[int]
    monitor: Monitor
    phi: Formula
    controls: np.ndarray
    states: np.ndarray
    children: List[int] = field(default_factory=list)

    @property
    def interval(self) -> RobustnessInterval:
        return self.monitor.root_interval


@dataclass
class SteerProposal:
    """Best constant control found from one neighbor toward a sample."""

    control: np.ndarray
    states: np.ndarray
    cost: float

    @property
    def q_s(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class PlanResult:
    status: PlanStatus
    controls: np.ndarray
    states: np.ndarray
    eta: Optional[float]
    interval: RobustnessInterval
    metrics: List[Dict[str, Any]]
    first_solution_iter: Optional[int] = None
    tree_size: int = 1
    heuristic: str = Heuristic.AGM_FPL.value
    minmax_scale: float = 1.0

    @property
    def solved(self) -> bool:
        return self.status == PlanStatus.SOLVED


def steering_cost(
    u: Any,
    q_s: Any,
    v_q: Any,
    d_chi: Any,
    q_r: Any,
    dt_r: int,
    lam: float,
    difference: Optional[StateDifference] = None,
) -> float:
    """``lam * ||q_s - (v_q + d_chi * dt_r)||^2 + (1 - lam) * ||q_s - q_r||^2``.

    ``u`` is part of the signature for callers scoring controls; the cost only
    depends on where the control lands.
    """
    diff = difference or (lambda a, b: np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    guided = np.asarray(v_q, dtype=float) + np.asarray(d_chi, dtype=float) * dt_r
    return float(lam * np.sum(diff(q_s, guided) ** 2) + (1.0 - lam) * np.sum(diff(q_s, q_r) ** 2))


def replay(monitor: Monitor, states: np.ndarray, t_from: int) -> Monitor:
    """Clone ``monitor`` and feed it ``states`` at steps ``t_from + 1 ...``."""
    copy = monitor.clone()
    for offset, state in enumerate(states, start=1):
        copy.step(state, t_from + offset)
    return copy


class RrtEtaPlanner:
    """Anytime tree search maximizing AGM robustness of an STL formula.

    Args:
        phi: Formula to satisfy, evaluated from step 0
        system: Dynamics model
        config: Planner settings; the heuristic selects interval semantics and DIAS composition
    """

    def __init__(self, phi: Formula, system: SystemModel, config: Optional[PlannerConfig] = None):
        self.phi = phi
        self.system = system
        self.config = config or PlannerConfig()
        self.horizon = horizon(phi)
        if self.horizon < 1:
            raise PlannerInputError(f"Formula horizon must be at least one step, got {self.horizon}")
        self.rng = np.random.default_rng(self.config.rng_seed)
        self.ik_cache = IkCache() if isinstance(system, PlanarArm) else None
        self.nodes: List[TreeNode] = []
        self.metrics: List[Dict[str, Any]] = []
        self.first_solution_iter: Optional[int] = None
        self._best_partial: Optional[int] = None
        self._best_solution: Optional[int] = None
        self._states: List[np.ndarray] = []
        self._times: List[int] = []

    @property
    def semantics(self) -> Semantics:
        return Semantics.MINMAX if self.config.heuristic == Heuristic.MINMAX else Semantics.AGM

    def _new_monitor(self) -> Monitor:
        if self.semantics == Semantics.MINMAX:
            return BatchIntervalMonitor(self.phi, 0, Semantics.MINMAX)
        return MonitorState(self.phi, 0)

    # Tree bookkeeping

    def initialize(self, q_init: Any) -> TreeNode:
        """Reset the tree to a single root holding ``q_init`` observed at step 0."""
        state = np.asarray(q_init, dtype=float)
        if state.shape != (self.system.state_dim,) or not self.system.in_bounds(state):
            raise PlannerInputError(f"Initial state {state} is not in the state set of '{self.system.name}'")
        monitor = self._new_monitor()
        monitor.step(state, 0)
        self.nodes = []
        self._states = []
        self._times = []
        self.metrics = []
        self.first_solution_iter = None
        self._best_partial = None
        self._best_solution = None
        root = self._add_node(state, 0, None, monitor, np.zeros((0, self.system.control_dim)),
                              np.zeros((0, self.system.state_dim)))
        return root

    def _add_node(self, state: np.ndarray, t: int, parent: Optional[int], monitor: Monitor,
                  controls: np.ndarray, states: np.ndarray) -> TreeNode:
        node = TreeNode(id=len(self.nodes), state=state, t=t, parent=parent, monitor=monitor, phi=self.phi,
                        controls=controls, states=states)
        self.nodes.append(node)
        self._states.append(state)
        self._times.append(t)
        if parent is not None:
            self.nodes[parent].children.append(node.id)
        self._track(node)
        return node

    def is_solution(self, node: TreeNode) -> bool:
        interval = node.interval
        return node.t >= self.horizon and interval.is_singleton and interval.lo > 0.0

    def _track(self, node: TreeNode) -> None:
        if self._best_partial is None or node.interval.lo > self.nodes[self._best_partial].interval.lo:
            self._best_partial = node.id
        if self.is_solution(node):
            if self._best_solution is None or node.interval.lo > self.nodes[self._best_solution].interval.lo:
                self._best_solution = node.id

    @property
    def best_node(self) -> Optional[TreeNode]:
        """Best solution node, else the node with the largest lower bound."""
        best = self._best_solution if self._best_solution is not None else self._best_partial
        return None if best is None else self.nodes[best]

    @property
    def solved(self) -> bool:
        return self._best_solution is not None

    def path(self, node_id: int) -> List[TreeNode]:
        """Nodes from the root to ``node_id``."""
        chain: List[TreeNode] = []
        current: Optional[int] = node_id
        while current is not None:
            node = self.nodes[current]
            chain.append(node)
            current = node.parent
        return chain[::-1]

    def path_states(self, node_id: int) -> Tuple[np.ndarray, np.ndarray]:
        """(controls, states) from the root to ``node_id``; states start with the root state at t=0."""
        chain = self.path(node_id)
        controls = [n.controls for n in chain[1:]]
        states = [chain[0].state[None, :]] + [n.states for n in chain[1:]]
        control_array = np.concatenate(controls) if controls else np.zeros((0, self.system.control_dim))
        return control_array, np.concatenate(states)

    def tree_problems(self) -> List[str]:
        """Structural violations: parent/child mismatch, time misalignment, cycles."""
        problems = []
        for node in self.nodes:
            if node.parent is None:
                if node.id != 0 or node.t != 0:
                    problems.append(f"node {node.id} has no parent")
                continue
            parent = self.nodes[node.parent]
            if node.id not in parent.children:
                problems.append(f"node {node.id} missing from children of {parent.id}")
            if node.t != parent.t + len(node.controls) or len(node.states) != len(node.controls):
                problems.append(f"node {node.id} segment does not align with parent {parent.id}")
            for child in node.children:
                if self.nodes[child].parent != node.id:
                    problems.append(f"node {child} listed under {node.id} but has parent {self.nodes[child].parent}")
            hops, current = 0, node.parent
            while current is not None and hops <= len(self.nodes):
                current, hops = self.nodes[current].parent, hops + 1
            if current is not None:
                problems.append(f"cycle through node {node.id}")
        return problems

    # Search primitives

    def sample(self) -> Tuple[int, np.ndarray]:
        """Sample (t_r, q_r): t_r uniform over 1..horizon, q_r biased into active regions."""
        t_r = int(self.rng.integers(1, self.horizon + 1))
        if self.rng.random() < self.config.p_bias:
            if isinstance(self.system, PlanarArm) and self.ik_cache is not None:
                state = adaptive_sample(self.phi, t_r, self.ik_cache, self.rng, self.system,
                                        self.config.ik_max_retries)
                if state is not None:
                    return t_r, state
            else:
                hints = sorted(((p.id, p.region_hint) for p, polarity in active_predicates(self.phi, t_r)
                                if polarity > 0 and p.region_hint is not None), key=lambda item: item[0])
                if hints:
                    _, hint = hints[int(self.rng.integers(len(hints)))]
                    assert hint is not None
                    return t_r, self.system.with_region(self.system.sample_state(self.rng), hint, self.rng)
        return t_r, self.system.sample_state(self.rng)

    def near(self, q_r: Any, t_r: int, max_gap: Optional[int] = None) -> List[TreeNode]:
        """The ``k_near`` nodes closest to ``q_r`` among nodes strictly earlier than ``t_r``."""
        times = np.asarray(self._times)
        mask = times < t_r
        if max_gap is not None:
            mask &= t_r - times <= max_gap
        candidates = np.flatnonzero(mask)
        if candidates.size == 0:
            return []
        diffs = np.stack([self._states[i] for i in candidates]) - np.asarray(q_r, dtype=float)
        for axis in self.system.angular_axes:
            diffs[:, axis] = (diffs[:, axis] + math.pi) % (2.0 * math.pi) - math.pi
        distances = np.linalg.norm(diffs * self.system.distance_weights, axis=1)
        order = np.argsort(distances, kind="stable")[: self.config.k_near]
        return [self.nodes[int(candidates[i])] for i in order]

    def _best_of(self, v: TreeNode, guidance: DiasField, controls: np.ndarray, q_r: np.ndarray, dt_r: int,
                 lam: float) -> Optional[SteerProposal]:
        states, feasible = rollout_batch(v.state, controls, dt_r, self.system)
        best: Optional[SteerProposal] = None
        for k in np.flatnonzero(feasible):
            d_chi = guidance(controls[k], self.rng)
            cost = steering_cost(controls[k], states[k, -1], v.state, d_chi, q_r, dt_r, lam,
                                 self.system.state_difference)
            if best is None or cost < best.cost:
                best = SteerProposal(controls[k].copy(), states[k], cost)
        return best

    def optimize_control(self, v: TreeNode, q_r: Any, dt_r: int, lam: float) -> Optional[SteerProposal]:
        """Random-shot search over constant controls, then coordinate-descent refinement.

        Returns None when every rollout leaves the state set.
        """
        if dt_r < 1:
            raise ValueError(f"dt_r must be >= 1, got {dt_r}")
        target = np.asarray(q_r, dtype=float)
        guidance = DiasField(v.state, v.phi, v.monitor, self.config.composition, self.system)
        shots = self.rng.uniform(self.system.control_lower, self.system.control_upper,
                                 size=(self.config.steer_samples, self.system.control_dim))
        best = self._best_of(v, guidance, shots, target, dt_r, lam)
        if best is None:
            return None

        step = 0.25 * (self.system.control_upper - self.system.control_lower)
        for _ in range(self.config.refine_iters):
            for j in range(self.system.control_dim):
                offsets = np.zeros((2, self.system.control_dim))
                offsets[:, j] = (step[j], -step[j])
                candidates = np.clip(best.control + offsets, self.system.control_lower, self.system.control_upper)
                proposal = self._best_of(v, guidance, candidates, target, dt_r, lam)
                if proposal is not None and proposal.cost < best.cost:
                    best = proposal
            step = step / 2.0
        return best

    def update_eta(self, parent: TreeNode, segment: ControlTrajectory,
                   target: Optional[TreeNode] = None) -> UpdateOutcome:
        """Admit a new node (``target`` None) or try to reparent ``target`` under ``parent``."""
        monitor = replay(parent.monitor, segment.states, parent.t)
        interval = monitor.root_interval
        if target is None:
            if interval.hi < 0.0:
                return UpdateOutcome.REJECTED
            final = segment.states[-1]
            self._add_node(final, parent.t + len(segment), parent.id, monitor, segment.controls, segment.states)
            return UpdateOutcome.ADMITTED

        if target.phi is not parent.phi or parent.t + len(segment) != target.t or target.parent is None:
            return UpdateOutcome.REJECTED
        if interval.hi < 0.0 or interval.lo < target.interval.lo:
            return UpdateOutcome.REJECTED

        updates: Dict[int, Tuple[np.ndarray, np.ndarray, Monitor]] = {
            target.id: (segment.controls, segment.states, monitor)}
        stack = [(target.id, segment.states[-1], monitor)]
        while stack:
            node_id, state, node_monitor = stack.pop()
            for child_id in self.nodes[node_id].children:
                child = self.nodes[child_id]
                states = rollout(state, child.controls, self.system)
                if states is None:
                    return UpdateOutcome.REJECTED
                child_monitor = replay(node_monitor, states, self.nodes[node_id].t)
                child_interval = child_monitor.root_interval
                if child_interval.hi < 0.0 or child_interval.lo < child.interval.lo:
                    return UpdateOutcome.REJECTED
                updates[child_id] = (child.controls, states, child_monitor)
                stack.append((child_id, states[-1], child_monitor))

        old_parent = self.nodes[target.parent]
        old_parent.children.remove(target.id)
        parent.children.append(target.id)
        target.parent = parent.id
        for node_id, (controls, states, node_monitor) in updates.items():
            node = self.nodes[node_id]
            node.controls, node.states, node.monitor = controls, states, node_monitor
            node.state = states[-1]
            self._states[node_id] = node.state
            self._track(node)
        return UpdateOutcome.REWIRED

    def rewire(self, new_node: TreeNode) -> int:
        """Try to reparent later nearby nodes under ``new_node``; returns the number rewired.

        Every candidate gets a cheap shooting pass; at most ``rewire_refine_limit``
        of the closest misses are polished with the local optimizer.
        """
        if self.config.k_rewire == 0:
            return 0
        times = np.asarray(self._times)
        gap = times - new_node.t
        candidates = [int(i) for i in np.flatnonzero((gap >= 1) & (gap <= self.config.max_step_gap))]
        candidates.sort(key=lambda i: (self.system.distance(self._states[i], new_node.state), i))
        shots = []
        for node_id in candidates[: self.config.k_rewire]:
            target = self.nodes[node_id]
            controls, error = shoot_connection(new_node.state, target.state, self.system, self.rng,
                                               steps=target.t - new_node.t, shots=self.config.exact_shots)
            shots.append((error, node_id, controls))
        shots.sort(key=lambda item: (item[0], item[1]))

        rewired = 0
        refinements = 0
        for error, node_id, controls in shots:
            target = self.nodes[node_id]
            if self.config.epsilon_connect < error < REFINE_GATE and refinements < self.config.rewire_refine_limit:
                refinements += 1
                controls, error = refine_connection(new_node.state, target.state, controls, error, self.system)
            segment = connection_segment(new_node.state, controls, error, self.system, self.config.epsilon_connect)
            if segment is None:
                continue
            if self.update_eta(new_node, segment, target) == UpdateOutcome.REWIRED:
                rewired += 1
        return rewired

    # Main loop

    def iterate(self) -> UpdateOutcome:
        """One sample / near / steer / admit / rewire round."""
        lam = float(self.rng.uniform())
        t_r, q_r = self.sample()
        best: Optional[Tuple[TreeNode, SteerProposal]] = None
        for v in self.near(q_r, t_r, self.config.max_step_gap):
            proposal = self.optimize_control(v, q_r, t_r - v.t, lam)
            if proposal is not None and (best is None or proposal.cost < best[1].cost):
                best = (v, proposal)
        if best is None:
            return UpdateOutcome.REJECTED
        parent, proposal = best
        segment = ControlTrajectory(np.tile(proposal.control, (len(proposal.states), 1)), proposal.states)
        outcome = self.update_eta(parent, segment)
        if outcome == UpdateOutcome.ADMITTED:
            self.rewire(self.nodes[-1])
        return outcome

    def _report(self, value: float) -> float:
        if self.semantics == Semantics.MINMAX:
            return value / self.config.minmax_scale
        return value

    def _record(self, iteration: int, started: float) -> None:
        node = self.best_node
        assert node is not None
        lo, hi = self._report(node.interval.lo), self._report(node.interval.hi)
        self.metrics.append({
            "iter": iteration,
            "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
            "best_lo": lo,
            "best_hi": hi,
            "gap": hi - lo,
            "tree_size": len(self.nodes),
            "solved": self.solved,
        })

    def run(self, q_init: Any) -> PlanResult:
        """Run the full iteration budget from ``q_init`` and package the best result."""
        self.initialize(q_init)
        started = time.perf_counter()
        logger.info(f"Planning {self.system.name} for {self.config.max_iters} iterations "
                    f"(heuristic={self.config.heuristic.value}, horizon={self.horizon}, seed={self.config.rng_seed})")
        with logging_redirect_tqdm():
            for iteration in tqdm(range(1, self.config.max_iters + 1), desc="RRT-eta", unit="it",
                                  disable=not self.config.show_progress):
                self.iterate()
                if self.solved and self.first_solution_iter is None:
                    self.first_solution_iter = iteration
                    logger.info(f"✅ First solution at iteration {iteration} "
                                f"(eta={self.nodes[self._best_solution or 0].interval.lo:.4f})")
                self._record(iteration, started)
        return self.result()

    def extract_solution(self) -> Tuple[np.ndarray, np.ndarray, float]:
        """(controls, states, eta) of the best solution; eta is recomputed offline on the states.

        Raises:
            NoSolutionError: No node satisfies the formula
            MonitorConsistencyError: Under AGM semantics the offline value misses the monitor singleton
        """
        if self._best_solution is None:
            raise NoSolutionError("No node satisfies the formula")
        node = self.nodes[self._best_solution]
        controls, states = self.path_states(node.id)
        eta = agm_robustness(Trace(states), self.phi)
        if self.semantics == Semantics.AGM and abs(eta - node.interval.lo) > VERIFY_TOL:
            raise MonitorConsistencyError(
                f"Offline robustness {eta} differs from the monitor value {node.interval.lo} at node {node.id}")
        return controls, states, eta

    def result(self) -> PlanResult:
        node = self.best_node
        assert node is not None
        common = dict(metrics=list(self.metrics), first_solution_iter=self.first_solution_iter,
                      tree_size=len(self.nodes), heuristic=self.config.heuristic.value,
                      minmax_scale=self.config.minmax_scale)
        if self.solved:
            controls, states, eta = self.extract_solution()
            logger.info(f"📊 Solved: eta={eta:.4f}, tree size {len(self.nodes)}")
            return PlanResult(PlanStatus.SOLVED, controls, states, eta, node.interval, **common)  # type: ignore[arg-type]
        controls, states = self.path_states(node.id)
        logger.info(f"🛑 Exhausted: best bounds [{node.interval.lo:.4f}, {node.interval.hi:.4f}], "
                    f"tree size {len(self.nodes)}")
        return PlanResult(PlanStatus.EXHAUSTED, controls, states, None, node.interval, **common)  # type: ignore[arg-type]


def plan(q_init: Any, phi: Formula, system: SystemModel, cfg: Optional[PlannerConfig] = None) -> PlanResult:
    """Plan from ``q_init`` for ``phi`` under ``system`` with the given settings."""
    return RrtEtaPlanner(phi, system, cfg).run(q_init)


def extract_solution(planner: RrtEtaPlanner) -> Tuple[np.ndarray, np.ndarray, float]:
    return planner.extract_solution()
