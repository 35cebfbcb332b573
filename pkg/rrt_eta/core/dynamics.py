"""Discrete-time system models, steering primitives and IK-cached workspace sampling."""

import logging
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from rrt_eta.core.robustness_core import predicate_robustness
from rrt_eta.core.stl_formula import Formula, RegionHint, active_predicates, wrap_angle

logger = logging.getLogger(__name__)

BOUNDS_TOL = 1e-9
IK_TOL = 1e-4
IK_MAX_ITERS = 200
IK_DAMPING = 0.05
IK_MAX_RETRIES = 50
STEER_SHOTS = 64
STEER_MAX_STEPS = 5
EPSILON_CONNECT = 0.05
# local refinement only runs when random shooting already landed this close
REFINE_GATE = 1.0
REFINE_FD_STEP = 1e-6


class ControlBoundsError(ValueError):
    """Control input lies outside the admissible control set."""


class InfeasibleStateError(ValueError):
    """State lies outside the admissible state set."""


@dataclass
class ControlTrajectory:
    """Controls ``u_0..u_{T-1}`` and the states they reach (the start state excluded)."""

    controls: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return int(self.controls.shape[0])

    @property
    def final_state(self) -> Optional[np.ndarray]:
        return self.states[-1] if len(self) else None


class SystemModel(ABC):
    """Dynamics contract ``q' = f(q, u)`` with box state and control sets."""

    name = "system"

    def __init__(
        self,
        state_lower: Sequence[float],
        state_upper: Sequence[float],
        control_lower: Sequence[float],
        control_upper: Sequence[float],
        dt: float,
        angular_axes: Tuple[int, ...] = (),
        distance_weights: Optional[Sequence[float]] = None,
    ):
        self.state_lower = np.asarray(state_lower, dtype=float)
        self.state_upper = np.asarray(state_upper, dtype=float)
        self.control_lower = np.asarray(control_lower, dtype=float)
        self.control_upper = np.asarray(control_upper, dtype=float)
        self.dt = float(dt)
        self.angular_axes = tuple(angular_axes)
        if distance_weights is None:
            self.distance_weights = np.ones(self.state_dim)
        else:
            self.distance_weights = np.asarray(distance_weights, dtype=float)
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if np.any(self.state_lower > self.state_upper) or np.any(self.control_lower > self.control_upper):
            raise ValueError(f"{self.name}: empty state or control bounds")

    @property
    def state_dim(self) -> int:
        return int(self.state_lower.shape[0])

    @property
    def control_dim(self) -> int:
        return int(self.control_lower.shape[0])

    @property
    def lipschitz(self) -> Optional[float]:
        return None

    @abstractmethod
    def step(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """One step of the dynamics."""

    @abstractmethod
    def jacobian(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """State Jacobian of ``step`` (n x n)."""

    def check_control(self, u: Any) -> np.ndarray:
        control = np.asarray(u, dtype=float)
        if control.shape != (self.control_dim,):
            raise ControlBoundsError(f"{self.name}: control must have shape ({self.control_dim},), got {control.shape}")
        if np.any(control < self.control_lower - BOUNDS_TOL) or np.any(control > self.control_upper + BOUNDS_TOL):
            raise ControlBoundsError(f"{self.name}: control {control} outside [{self.control_lower}, {self.control_upper}]")
        return control

    def check_controls(self, controls: Any) -> np.ndarray:
        """Batch form of ``check_control`` for a (k, m) array of controls."""
        batch = np.asarray(controls, dtype=float)
        if batch.ndim != 2 or batch.shape[1] != self.control_dim:
            raise ControlBoundsError(f"{self.name}: controls must have shape (k, {self.control_dim}), got {batch.shape}")
        if np.any(batch < self.control_lower - BOUNDS_TOL) or np.any(batch > self.control_upper + BOUNDS_TOL):
            raise ControlBoundsError(f"{self.name}: controls outside [{self.control_lower}, {self.control_upper}]")
        return batch

    def clip_control(self, u: Any) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.control_lower, self.control_upper)

    def step_batch(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """Row-wise ``step`` over (k, n) states and (k, m) controls."""
        return np.stack([self.step(q, u) for q, u in zip(states, controls)])

    def in_bounds(self, q: Any) -> bool:
        state = np.asarray(q, dtype=float)
        return bool(np.all(state >= self.state_lower - BOUNDS_TOL) and np.all(state <= self.state_upper + BOUNDS_TOL))

    def in_bounds_batch(self, states: np.ndarray) -> np.ndarray:
        """Row mask of ``in_bounds``."""
        return np.all((states >= self.state_lower - BOUNDS_TOL) & (states <= self.state_upper + BOUNDS_TOL), axis=-1)

    def require_in_bounds(self, q: Any) -> np.ndarray:
        state = np.asarray(q, dtype=float)
        if state.shape != (self.state_dim,):
            raise InfeasibleStateError(f"{self.name}: state must have shape ({self.state_dim},), got {state.shape}")
        if not self.in_bounds(state):
            raise InfeasibleStateError(f"{self.name}: state {state} outside the state bounds")
        return state

    def state_difference(self, q1: Any, q2: Any) -> np.ndarray:
        """``q1 - q2`` with angular axes wrapped to (-pi, pi]."""
        diff = np.asarray(q1, dtype=float) - np.asarray(q2, dtype=float)
        for axis in self.angular_axes:
            diff[axis] = wrap_angle(float(diff[axis]))
        return diff

    def distance(self, q1: Any, q2: Any) -> float:
        return float(np.linalg.norm(self.distance_weights * self.state_difference(q1, q2)))

    def sample_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.state_lower, self.state_upper)

    def sample_control(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.control_lower, self.control_upper)

    def with_region(self, base: np.ndarray, hint: RegionHint, rng: np.random.Generator) -> np.ndarray:
        """``base`` with the hint's axes replaced by a point sampled inside the hint."""
        state = np.array(base, dtype=float)
        state[list(hint.axes)] = hint.sample(rng)
        return state

    def connect_seed(self, q_start: np.ndarray, q_final: np.ndarray, steps: int) -> Optional[np.ndarray]:
        """Closed-form control sequence towards ``q_final``, when the system has one."""
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {"system": self.name, "dt": self.dt}


def step_unicycle(s: Any, u: Any, dt: float) -> np.ndarray:
    """Unicycle update: position integrates the current velocities, controls set the next ones."""
    x, y, theta, v, omega = np.asarray(s, dtype=float)
    u1, u2 = np.asarray(u, dtype=float)
    return np.array([
        x + v * math.cos(theta) * dt,
        y + v * math.sin(theta) * dt,
        wrap_angle(theta + omega * dt),
        u1,
        u2,
    ])


class Unicycle(SystemModel):
    """State (x, y, theta, v, omega); controls are next-step (v, omega) commands."""

    name = "unicycle"

    def __init__(self, dt: float = 1.0, x_range: Sequence[float] = (0.0, 4.0), y_range: Sequence[float] = (0.0, 4.0),
                 v_max: float = 0.3, omega_max: float = 1.0, distance_weights: Optional[Sequence[float]] = None):
        self.v_max = float(v_max)
        self.omega_max = float(omega_max)
        super().__init__(
            state_lower=[x_range[0], y_range[0], -math.pi, -v_max, -omega_max],
            state_upper=[x_range[1], y_range[1], math.pi, v_max, omega_max],
            control_lower=[-v_max, -omega_max],
            control_upper=[v_max, omega_max],
            dt=dt,
            angular_axes=(2,),
            distance_weights=distance_weights if distance_weights is not None else (1.0, 1.0, 0.3, 0.5, 0.2),
        )

    def step(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        return step_unicycle(q, self.check_control(u), self.dt)

    def step_batch(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        batch = self.check_controls(controls)
        x, y, theta, v, omega = np.asarray(states, dtype=float).T
        heading = theta + omega * self.dt
        heading = np.arctan2(np.sin(heading), np.cos(heading))
        heading[heading == -math.pi] = math.pi
        return np.column_stack([x + v * np.cos(theta) * self.dt, y + v * np.sin(theta) * self.dt, heading,
                                batch[:, 0], batch[:, 1]])

    def jacobian(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        _, _, theta, v, _ = np.asarray(q, dtype=float)
        dt = self.dt
        jac = np.zeros((5, 5))
        jac[0, 0] = jac[1, 1] = jac[2, 2] = 1.0
        jac[0, 2] = -v * math.sin(theta) * dt
        jac[0, 3] = math.cos(theta) * dt
        jac[1, 2] = v * math.cos(theta) * dt
        jac[1, 3] = math.sin(theta) * dt
        jac[2, 4] = dt
        return jac

    def to_dict(self) -> Dict[str, Any]:
        return {
            "system": self.name,
            "dt": self.dt,
            "bounds": {"x": [float(self.state_lower[0]), float(self.state_upper[0])],
                       "y": [float(self.state_lower[1]), float(self.state_upper[1])],
                       "v_max": self.v_max, "omega_max": self.omega_max},
        }


def step_double_integrator(s: Any, u: Any, dt: float) -> np.ndarray:
    """Euler double integrator: position integrates velocity, velocity integrates acceleration."""
    state = np.asarray(s, dtype=float)
    d = state.shape[0] // 2
    pos, vel = state[:d], state[d:]
    accel = np.asarray(u, dtype=float)
    return np.concatenate([pos + vel * dt, vel + accel * dt])


class DoubleIntegrator(SystemModel):
    """Point mass in ``dim`` dimensions; state (pos, vel), control acceleration."""

    name = "double_integrator"

    def __init__(self, dt: float = 0.5, dim: int = 2, position_range: Sequence[float] = (0.0, 10.0),
                 v_max: float = 2.0, a_max: float = 1.0):
        self.dim = int(dim)
        self.v_max = float(v_max)
        self.a_max = float(a_max)
        self.position_range = (float(position_range[0]), float(position_range[1]))
        super().__init__(
            state_lower=[position_range[0]] * dim + [-v_max] * dim,
            state_upper=[position_range[1]] * dim + [v_max] * dim,
            control_lower=[-a_max] * dim,
            control_upper=[a_max] * dim,
            dt=dt,
        )
        eye = np.eye(self.dim)
        zero = np.zeros((self.dim, self.dim))
        self.A = np.block([[eye, dt * eye], [zero, eye]])
        self.B = np.vstack([zero, dt * eye])

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(np.hstack([self.A, self.B]), 2))

    def step(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        return step_double_integrator(q, self.check_control(u), self.dt)

    def step_batch(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=float) @ self.A.T + self.check_controls(controls) @ self.B.T

    def jacobian(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A.copy()

    def connect_seed(self, q_start: np.ndarray, q_final: np.ndarray, steps: int) -> Optional[np.ndarray]:
        """Least-squares control sequence reaching ``q_final`` in ``steps`` steps (exact for steps >= 2)."""
        if steps < 1:
            return None
        blocks = [np.linalg.matrix_power(self.A, steps - 1 - k) @ self.B for k in range(steps)]
        reach = np.hstack(blocks)
        residual = np.asarray(q_final, dtype=float) - np.linalg.matrix_power(self.A, steps) @ np.asarray(q_start)
        solution, *_ = np.linalg.lstsq(reach, residual, rcond=None)
        return solution.reshape(steps, self.dim)

    def to_dict(self) -> Dict[str, Any]:
        return {"system": self.name, "dt": self.dt, "dim": self.dim,
                "bounds": {"position": list(self.position_range), "v_max": self.v_max, "a_max": self.a_max}}


# Planar arm


def fk_planar_arm(q: Any, link_lengths: Sequence[float]) -> np.ndarray:
    """End-effector pose (x, y, psi) of a planar serial arm; psi is wrapped to (-pi, pi]."""
    joints = np.asarray(q, dtype=float)
    links = np.asarray(link_lengths, dtype=float)
    if joints.shape[0] != links.shape[0]:
        raise ValueError(f"Expected {links.shape[0]} joint angles, got {joints.shape[0]}")
    angles = np.cumsum(joints)
    return np.array([float(np.dot(links, np.cos(angles))), float(np.dot(links, np.sin(angles))),
                     wrap_angle(float(angles[-1]))])


def planar_arm_jacobian(q: Any, link_lengths: Sequence[float]) -> np.ndarray:
    """3 x n Jacobian of (x, y, psi) with respect to the joints."""
    joints = np.asarray(q, dtype=float)
    links = np.asarray(link_lengths, dtype=float)
    angles = np.cumsum(joints)
    xs = links * np.cos(angles)
    ys = links * np.sin(angles)
    jac = np.ones((3, joints.shape[0]))
    # column j collects links j..n-1
    jac[0] = -np.cumsum(ys[::-1])[::-1]
    jac[1] = np.cumsum(xs[::-1])[::-1]
    return jac


def _pose_error(target: np.ndarray, pose: np.ndarray) -> np.ndarray:
    error = target - pose[: target.shape[0]]
    if target.shape[0] > 2:
        error[2] = wrap_angle(float(error[2]))
    return error


def solve_ik(
    target: Any,
    seed: Any,
    link_lengths: Sequence[float],
    joint_limits: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
    tol: float = IK_TOL,
    max_iters: int = IK_MAX_ITERS,
    damping: float = IK_DAMPING,
) -> Optional[np.ndarray]:
    """Damped-least-squares IK for a position (x, y) or pose (x, y, psi) target.

    Returns:
        Joint vector within the limits whose FK is within ``tol`` of the target, or None
    """
    goal = np.asarray(target, dtype=float)
    links = np.asarray(link_lengths, dtype=float)
    reach = float(np.sum(links))
    inner = max(0.0, 2.0 * float(np.max(links)) - reach)
    radius = float(np.linalg.norm(goal[:2]))
    if radius > reach + tol or radius < inner - tol:
        return None

    q = np.array(seed, dtype=float)
    lower = upper = None
    if joint_limits is not None:
        lower, upper = np.asarray(joint_limits[0], dtype=float), np.asarray(joint_limits[1], dtype=float)
        q = np.clip(q, lower, upper)
    rows = goal.shape[0]
    for _ in range(max_iters + 1):
        error = _pose_error(goal, fk_planar_arm(q, links))
        if float(np.linalg.norm(error)) <= tol:
            return q
        jac = planar_arm_jacobian(q, links)[:rows]
        step = jac.T @ np.linalg.solve(jac @ jac.T + damping ** 2 * np.eye(rows), error)
        q = q + step
        if lower is not None and upper is not None:
            q = np.clip(q, lower, upper)
    return None


class IkCache:
    """Discretized workspace pose -> joint solution map with hit/miss counters.

    Lookups and writes share one lock, so the counters stay exact under threads.
    A duplicate solve after a stale miss is harmless, and an entry is only
    stored once verified.
    """

    def __init__(self, position_resolution: float = 0.01, orientation_resolution: float = math.radians(5.0)):
        self.position_resolution = float(position_resolution)
        self.orientation_resolution = float(orientation_resolution)
        self.hits = 0
        self.misses = 0
        self._entries: Dict[Tuple[int, ...], np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def key(self, pose: Any) -> Tuple[int, ...]:
        values = np.asarray(pose, dtype=float)
        key = [int(math.floor(v / self.position_resolution)) for v in values[:2]]
        if values.shape[0] > 2:
            key.append(int(math.floor(wrap_angle(float(values[2])) / self.orientation_resolution)))
        return tuple(key)

    def cell_center(self, key: Tuple[int, ...]) -> np.ndarray:
        center = [(k + 0.5) * self.position_resolution for k in key[:2]]
        if len(key) > 2:
            center.append((key[2] + 0.5) * self.orientation_resolution)
        return np.array(center)

    def get(self, key: Tuple[int, ...]) -> Optional[np.ndarray]:
        with self._lock:
            solution = self._entries.get(key)
            if solution is None:
                self.misses += 1
                return None
            self.hits += 1
            return solution.copy()

    def put(self, key: Tuple[int, ...], q: np.ndarray) -> None:
        with self._lock:
            self._entries.setdefault(key, np.array(q, dtype=float))

    @property
    def hit_rate(self) -> float:
        with self._lock:
            hits, lookups = self.hits, self.hits + self.misses
        return hits / lookups if lookups else 0.0

    def consistency_violations(self, link_lengths: Sequence[float], tol: float = IK_TOL) -> int:
        """Entries whose FK misses their cell center by more than ``tol``."""
        violations = 0
        for key, q in list(self._entries.items()):
            target = self.cell_center(key)
            if float(np.linalg.norm(_pose_error(target, fk_planar_arm(q, link_lengths)))) > tol:
                violations += 1
        return violations

    def get_statistics(self) -> Dict[str, Any]:
        return {"entries": len(self), "hits": self.hits, "misses": self.misses, "hit_rate": self.hit_rate}


class PlanarArm(SystemModel):
    """Kinematic planar arm on the augmented state (joints, x, y, psi).

    Controls are joint velocities; the workspace pose is refreshed by FK after
    every step, so it always equals FK of the joints.
    """

    name = "planar_arm"

    def __init__(self, links: Sequence[float] = (1.0, 0.8, 0.6), dt: float = 0.5,
                 joint_limits: Optional[Tuple[Sequence[float], Sequence[float]]] = None, qdot_max: float = 1.0):
        self.links = tuple(float(v) for v in links)
        n = len(self.links)
        reach = float(sum(self.links))
        if joint_limits is None:
            joint_limits = ([-math.pi] * n, [math.pi] * n)
        self.joint_limits = (np.asarray(joint_limits[0], dtype=float), np.asarray(joint_limits[1], dtype=float))
        self.qdot_max = float(qdot_max)
        super().__init__(
            state_lower=list(self.joint_limits[0]) + [-reach, -reach, -math.pi],
            state_upper=list(self.joint_limits[1]) + [reach, reach, math.pi],
            control_lower=[-qdot_max] * n,
            control_upper=[qdot_max] * n,
            dt=dt,
            angular_axes=(n + 2,),
            distance_weights=[1.0] * n + [0.5, 0.5, 0.0],
        )

    @property
    def n_joints(self) -> int:
        return len(self.links)

    def augment(self, joints: Any) -> np.ndarray:
        q = np.asarray(joints, dtype=float)
        return np.concatenate([q, fk_planar_arm(q, self.links)])

    def step(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        joints = np.asarray(q, dtype=float)[: self.n_joints] + self.check_control(u) * self.dt
        return self.augment(joints)

    def jacobian(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        n = self.n_joints
        joints = np.asarray(q, dtype=float)[:n] + np.asarray(u, dtype=float) * self.dt
        jac = np.zeros((n + 3, n + 3))
        jac[:n, :n] = np.eye(n)
        jac[n:, :n] = planar_arm_jacobian(joints, self.links)
        return jac

    def sample_state(self, rng: np.random.Generator) -> np.ndarray:
        return self.augment(rng.uniform(self.joint_limits[0], self.joint_limits[1]))

    def with_region(self, base: np.ndarray, hint: RegionHint, rng: np.random.Generator) -> np.ndarray:
        state = super().with_region(base, hint, rng)
        if min(hint.axes) < self.n_joints:
            return self.augment(state[: self.n_joints])
        return state

    def connect_seed(self, q_start: np.ndarray, q_final: np.ndarray, steps: int) -> Optional[np.ndarray]:
        n = self.n_joints
        delta = np.asarray(q_final, dtype=float)[:n] - np.asarray(q_start, dtype=float)[:n]
        return np.tile(delta / (steps * self.dt), (steps, 1))

    def to_dict(self) -> Dict[str, Any]:
        return {"system": self.name, "dt": self.dt, "links": list(self.links), "qdot_max": self.qdot_max,
                "joint_limits": [list(self.joint_limits[0]), list(self.joint_limits[1])]}


def _ik_target(system: PlanarArm, hint: RegionHint, rng: np.random.Generator) -> np.ndarray:
    """Workspace target (x, y[, psi]) from a hint on augmented workspace axes."""
    n = system.n_joints
    reach = float(sum(system.links))
    point = hint.sample(rng)
    target = list(rng.uniform(-reach, reach, size=2))
    orientation: Optional[float] = None
    for axis, value in zip(hint.axes, point):
        if axis == n + 2:
            orientation = float(value)
        else:
            target[axis - n] = float(value)
    if orientation is not None:
        target.append(orientation)
    return np.array(target)


def adaptive_sample(
    phi: Formula,
    t: int,
    cache: IkCache,
    rng: np.random.Generator,
    system: PlanarArm,
    max_retries: int = IK_MAX_RETRIES,
) -> Optional[np.ndarray]:
    """Augmented-state sample biased into an active workspace region through the IK cache.

    Without an active workspace predicate the joints are sampled uniformly.
    Samples must satisfy the active configuration predicates. Returns None after
    ``max_retries`` failed attempts so the caller can fall back to uniform sampling.
    """
    n = system.n_joints
    active = active_predicates(phi, t)
    workspace = sorted((p for p, polarity in active
                        if polarity > 0 and p.is_workspace(n) and p.region_hint is not None), key=lambda p: p.id)
    configuration = [p for p, _ in active if not p.is_workspace(n)]

    for _ in range(max_retries):
        if not workspace:
            state = system.sample_state(rng)
        else:
            hint = workspace[int(rng.integers(len(workspace)))].region_hint
            assert hint is not None
            key = cache.key(_ik_target(system, hint, rng))
            target = cache.cell_center(key)
            joints = cache.get(key)
            if joints is None:
                seed = rng.uniform(system.joint_limits[0], system.joint_limits[1])
                joints = solve_ik(target, seed, system.links, system.joint_limits)
                if joints is None:
                    continue
                cache.put(key, joints)
            state = system.augment(joints)
        if all(predicate_robustness(state, p) >= 0.0 for p in configuration):
            return state
    logger.debug(f"adaptive_sample gave up after {max_retries} attempts at t={t}")
    return None


# Steering


def rollout(q: Any, controls: Any, system: SystemModel) -> Optional[np.ndarray]:
    """States reached by applying ``controls`` in order (start excluded); None if any leaves the state set."""
    state = np.asarray(q, dtype=float)
    sequence = np.atleast_2d(np.asarray(controls, dtype=float))
    states: List[np.ndarray] = []
    for u in sequence:
        state = system.step(state, u)
        if not system.in_bounds(state):
            return None
        states.append(state)
    if not states:
        return np.zeros((0, system.state_dim))
    return np.stack(states)


def rollout_batch(q: Any, controls: Any, steps: int, system: SystemModel) -> Tuple[np.ndarray, np.ndarray]:
    """Hold each of the (k, m) ``controls`` constant for ``steps`` steps from ``q``.

    Returns the (k, steps, n) states and a (k,) mask of rollouts that stayed in the
    state set; states of infeasible rollouts are not meaningful.
    """
    batch = np.atleast_2d(np.asarray(controls, dtype=float))
    current = np.tile(np.asarray(q, dtype=float), (batch.shape[0], 1))
    feasible = np.ones(batch.shape[0], dtype=bool)
    states = np.empty((batch.shape[0], steps, system.state_dim))
    for k in range(steps):
        current = system.step_batch(current, batch)
        feasible &= system.in_bounds_batch(current)
        states[:, k] = current
    return states, feasible


def steer(q: Any, u: Any, dt_steps: int, system: SystemModel) -> Optional[np.ndarray]:
    """Apply constant ``u`` for ``dt_steps`` steps; None if the state leaves the state set."""
    if dt_steps == 0:
        return np.asarray(q, dtype=float)
    states = rollout(q, np.tile(np.asarray(u, dtype=float), (dt_steps, 1)), system)
    return None if states is None else states[-1]


def _terminal_error(q_start: np.ndarray, q_final: np.ndarray, controls: np.ndarray, system: SystemModel) -> float:
    states = rollout(q_start, controls, system)
    if states is None:
        return math.inf
    return float(np.linalg.norm(system.state_difference(states[-1], q_final)))


def _terminal_residuals(q_start: np.ndarray, q_final: np.ndarray, candidates: np.ndarray,
                        system: SystemModel) -> Tuple[np.ndarray, np.ndarray]:
    """Wrapped final-state residuals of (k, steps, m) control sequences and a mask of those that stayed in bounds."""
    current = np.tile(q_start, (candidates.shape[0], 1))
    feasible = np.ones(candidates.shape[0], dtype=bool)
    for k in range(candidates.shape[1]):
        current = system.step_batch(current, candidates[:, k])
        feasible &= system.in_bounds_batch(current)
    diff = current - q_final
    for axis in system.angular_axes:
        diff[:, axis] = (diff[:, axis] + math.pi) % (2.0 * math.pi) - math.pi
    return diff, feasible


def _terminal_errors(q_start: np.ndarray, q_final: np.ndarray, candidates: np.ndarray,
                     system: SystemModel) -> np.ndarray:
    """Terminal error of every (steps, m) control sequence in ``candidates``; inf when it leaves the state set."""
    diff, feasible = _terminal_residuals(q_start, q_final, candidates, system)
    errors = np.linalg.norm(diff, axis=1)
    errors[~feasible] = math.inf
    return errors


def shoot_connection(
    q_start: Any,
    q_final: Any,
    system: SystemModel,
    rng: np.random.Generator,
    steps: int,
    shots: int = STEER_SHOTS,
) -> Tuple[np.ndarray, float]:
    """Best of ``shots`` random control sequences (plus the system's closed-form seed) toward ``q_final``.

    Returns the (steps, m) controls and their terminal error.
    """
    start = np.asarray(q_start, dtype=float)
    final = np.asarray(q_final, dtype=float)
    candidates = rng.uniform(system.control_lower, system.control_upper, size=(shots, steps, system.control_dim))
    seed = system.connect_seed(start, final, steps)
    if seed is not None:
        candidates = np.concatenate([np.clip(seed, system.control_lower, system.control_upper)[None], candidates])
    errors = _terminal_errors(start, final, candidates, system)
    best_index = int(np.argmin(errors))
    return candidates[best_index], float(errors[best_index])


def _refine(q_start: np.ndarray, q_final: np.ndarray, controls: np.ndarray, system: SystemModel) -> np.ndarray:
    steps = controls.shape[0]
    lower = np.tile(system.control_lower, steps)
    upper = np.tile(system.control_upper, steps)
    size = lower.shape[0]
    offsets = np.vstack([np.zeros(size), REFINE_FD_STEP * np.eye(size), -REFINE_FD_STEP * np.eye(size)])

    def objective(flat: np.ndarray) -> Tuple[float, np.ndarray]:
        # central differences for every coordinate in one batched rollout
        points = np.clip(flat + offsets, lower, upper)
        diff, _ = _terminal_residuals(q_start, q_final, points.reshape(-1, steps, system.control_dim), system)
        costs = np.sum(diff ** 2, axis=1)
        spans = np.diag(points[1: size + 1]) - np.diag(points[size + 1:])
        grad = np.divide(costs[1: size + 1] - costs[size + 1:], spans, out=np.zeros(size), where=spans > 0.0)
        return float(costs[0]), grad

    result = minimize(objective, np.clip(controls.ravel(), lower, upper), jac=True, method="L-BFGS-B",
                      bounds=list(zip(lower, upper)), options={"maxiter": 30})
    return np.clip(result.x, lower, upper).reshape(steps, -1)


def refine_connection(q_start: Any, q_final: Any, controls: np.ndarray, error: float,
                      system: SystemModel) -> Tuple[np.ndarray, float]:
    """Bounded L-BFGS-B polish of a shooting result; keeps the input when it does not improve."""
    start = np.asarray(q_start, dtype=float)
    final = np.asarray(q_final, dtype=float)
    refined = _refine(start, final, controls, system)
    refined_error = _terminal_error(start, final, refined, system)
    if refined_error < error:
        return refined, refined_error
    return controls, error


def steer_exact(
    q_start: Any,
    q_final: Any,
    system: SystemModel,
    rng: Optional[np.random.Generator] = None,
    steps: Optional[int] = None,
    shots: int = STEER_SHOTS,
    max_steps: int = STEER_MAX_STEPS,
    epsilon: float = EPSILON_CONNECT,
) -> Optional[ControlTrajectory]:
    """Try to connect ``q_start`` to ``q_final`` by random shooting plus bounded local refinement.

    Args:
        q_start: Start state
        q_final: State to reach
        system: Dynamics
        rng: Random generator for the shooting candidates
        steps: Exact number of steps to use; tries 1..max_steps when None
        shots: Random control sequences per horizon
        max_steps: Longest horizon tried when ``steps`` is None
        epsilon: Terminal error tolerance in state units

    Returns:
        ControlTrajectory whose last state is within ``epsilon`` of ``q_final``, or None
    """
    generator = rng if rng is not None else np.random.default_rng(0)
    start = np.asarray(q_start, dtype=float)
    final = np.asarray(q_final, dtype=float)
    if steps in (None, 0) and float(np.linalg.norm(system.state_difference(final, start))) <= epsilon:
        return ControlTrajectory(np.zeros((0, system.control_dim)), np.zeros((0, system.state_dim)))
    if steps == 0:
        return None

    horizons = [steps] if steps is not None else list(range(1, max_steps + 1))
    for horizon_steps in horizons:
        best, best_error = shoot_connection(start, final, system, generator, horizon_steps, shots)
        if epsilon < best_error < REFINE_GATE:
            best, best_error = refine_connection(start, final, best, best_error, system)
        segment = connection_segment(start, best, best_error, system, epsilon)
        if segment is not None:
            return segment
    return None


def connection_segment(q_start: Any, controls: np.ndarray, error: float, system: SystemModel,
                       epsilon: float = EPSILON_CONNECT) -> Optional[ControlTrajectory]:
    """The trajectory of ``controls`` when their terminal error is within ``epsilon``."""
    if error > epsilon:
        return None
    states = rollout(q_start, controls, system)
    return None if states is None else ControlTrajectory(controls, states)


def build_system(spec: Mapping[str, Any]) -> SystemModel:
    """Instantiate a system from a scenario ``system`` block."""
    kind = spec.get("system", spec.get("type"))
    bounds = dict(spec.get("bounds", {}))
    dt = float(spec.get("dt", 1.0))
    if kind == Unicycle.name:
        return Unicycle(dt=dt, x_range=bounds.get("x", (0.0, 4.0)), y_range=bounds.get("y", (0.0, 4.0)),
                        v_max=bounds.get("v_max", 0.3), omega_max=bounds.get("omega_max", 1.0))
    if kind == DoubleIntegrator.name:
        return DoubleIntegrator(dt=dt, dim=int(spec.get("dim", 2)), position_range=bounds.get("position", (0.0, 10.0)),
                                v_max=bounds.get("v_max", 2.0), a_max=bounds.get("a_max", 1.0))
    if kind == PlanarArm.name:
        limits = spec.get("joint_limits")
        return PlanarArm(links=spec.get("links", (1.0, 0.8, 0.6)), dt=dt,
                         joint_limits=(limits[0], limits[1]) if limits else None,
                         qdot_max=float(spec.get("qdot_max", 1.0)))
    raise ValueError(f"Unknown system '{kind}' (expected unicycle, double_integrator or planar_arm)")
