"""DIAS vectors (direction of increasing AGM satisfaction) and their composition."""

import logging
import math
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from rrt_eta.core.robustness_core import RobustnessInterval, Semantics, aggregator
from rrt_eta.core.stl_formula import BOOLEAN_KINDS, TEMPORAL_KINDS, Formula, NodeKind, Predicate, PredicateKind
from rrt_eta.models.planner_config import CompositionConfig, CompositionMode

if TYPE_CHECKING:
    from rrt_eta.core.dynamics import SystemModel
    from rrt_eta.core.interval_monitor import BatchIntervalMonitor, MonitorState

logger = logging.getLogger(__name__)

EPS_F = 1e-6
ORTHOGONALITY_TOL = 1e-6
FD_STEP = 1e-5

DiasVector = np.ndarray
DiasPair = Tuple[np.ndarray, RobustnessInterval]


def robustness_gradient(q: np.ndarray, mu: Predicate) -> np.ndarray:
    """Gradient of the unclamped normalized predicate robustness at ``q``.

    Affine and ball predicates are differentiated analytically; box predicates
    use central finite differences.
    """
    state = np.asarray(q, dtype=float)
    scale = 2.0 * mu.scale
    if mu.kind in (PredicateKind.AFFINE, PredicateKind.BALL):
        return mu.gradient(state) / scale
    grad = np.zeros_like(state)
    for i in range(state.shape[0]):
        step = np.zeros_like(state)
        step[i] = FD_STEP
        grad[i] = (mu.margin(state + step) - mu.margin(state - step)) / (2.0 * FD_STEP)
    return grad / scale


def dias_predicate(q: np.ndarray, u: np.ndarray, mu: Predicate, system: "SystemModel") -> DiasVector:
    """Jacobian-mapped robustness gradient, gated on the control actually increasing robustness."""
    state = _checked_state(q, system)
    motion = system.state_difference(system.step(state, u), state)
    return _gated(robustness_gradient(state, mu), motion, system.jacobian(state, u))


def _checked_state(q: np.ndarray, system: "SystemModel") -> np.ndarray:
    state = np.asarray(q, dtype=float)
    if state.shape[0] != system.state_dim:
        raise ValueError(f"State has dim {state.shape[0]}, system '{system.name}' expects {system.state_dim}")
    return state


def _gated(grad: np.ndarray, motion: np.ndarray, jacobian: np.ndarray) -> DiasVector:
    if float(np.dot(grad, motion)) <= 0.0:
        return np.zeros_like(grad)
    return jacobian.T @ grad


def is_orthogonal(v1: np.ndarray, v2: np.ndarray) -> bool:
    """``|cos angle| <= 1e-6``; zero vectors are orthogonal to everything."""
    n1 = float(np.linalg.norm(v1))
    n2 = float(np.linalg.norm(v2))
    if n1 == 0.0 or n2 == 0.0:
        return True
    return abs(float(np.dot(v1, v2))) / (n1 * n2) <= ORTHOGONALITY_TOL


def choose(i1: RobustnessInterval, i2: RobustnessInterval, rng: np.random.Generator) -> Tuple[int, int]:
    """Stochastic choice ``(c, not c)``: a strictly dominated interval is chosen first.

    Otherwise a Bernoulli draw with ``p = 0.5 + (sum1 - sum2) / 8`` (clamped to
    [0, 1]) decides; a draw of 0 chooses index 1.
    """
    if i1.lo < i2.lo and i1.hi < i2.hi:
        return (1, 2)
    if i1.lo > i2.lo and i1.hi > i2.hi:
        return (2, 1)
    p = min(1.0, max(0.0, 0.5 + ((i1.lo + i1.hi) - (i2.lo + i2.hi)) / 8.0))
    draw = int(rng.random() < p)
    return (1 + draw, 2 - draw)


def blend(chosen: np.ndarray, other: np.ndarray) -> np.ndarray:
    if is_orthogonal(chosen, other):
        return chosen + other
    return chosen


def compose_stochastic(pairs: Sequence[DiasPair], rng: np.random.Generator, conjunctive: bool = True) -> DiasVector:
    """Choose-and-blend composition, folded pairwise left to right for more than two children.

    The running pair's interval is the AGM interval of the children folded so far.
    """
    if len(pairs) < 2:
        raise ValueError("compose_stochastic needs at least two (vector, interval) pairs")
    agg = aggregator(Semantics.AGM, conjunctive)
    vector, interval = pairs[0]
    lows = [interval.lo]
    highs = [interval.hi]
    for next_vector, next_interval in pairs[1:]:
        c, _ = choose(interval, next_interval, rng)
        if c == 1:
            vector = blend(vector, next_vector)
        else:
            vector = blend(next_vector, vector)
        lows.append(next_interval.lo)
        highs.append(next_interval.hi)
        interval = RobustnessInterval(agg(lows), agg(highs))
    return vector


def fulfillment(interval: RobustnessInterval) -> float:
    """Map a robustness interval to a fulfillment value in [EPS_F, 1]."""
    return min(1.0, max(EPS_F, (interval.lo + interval.hi + 2.0) / 4.0))


def _clamped(f: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    return np.clip(np.asarray(f, dtype=float), EPS_F, 1.0)


def power_mean(f: Union[Sequence[float], np.ndarray], p: float) -> float:
    values = _clamped(f)
    if p == 0:
        return float(np.exp(np.mean(np.log(values))))
    return float(np.mean(values ** p) ** (1.0 / p))


def power_mean_gradient(f: Union[Sequence[float], np.ndarray], p: float) -> np.ndarray:
    """Partial derivatives ``(1/n) f_i^(p-1) mu_p^(1-p)``."""
    values = _clamped(f)
    mu = power_mean(values, p)
    return values ** (p - 1.0) * mu ** (1.0 - p) / values.shape[0]


def fpl_terms(f: Union[Sequence[float], np.ndarray], p: float) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized ``f_i^p * dmu/df_i`` weights and the ``1 - max_j |f_i - f_j|`` exploration damping."""
    values = _clamped(f)
    base = values ** p * power_mean_gradient(values, p)
    spread = np.abs(values[:, None] - values[None, :])
    np.fill_diagonal(spread, -np.inf)
    max_gap = np.max(spread, axis=1) if values.shape[0] > 1 else np.zeros(1)
    return base / np.sum(base), 1.0 - max_gap


def fpl_weights(f: Union[Sequence[float], np.ndarray], p: float, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Normalized ``f_i^p * dmu/df_i`` weights plus the exploration term ``alpha_i``.

    ``alpha_i`` is added after normalization and the result is not renormalized,
    so weights may be negative when ``beta`` is large.
    """
    weights, damping = fpl_terms(f, p)
    r = rng.uniform(-1.0, 1.0, size=weights.shape[0])
    return weights + beta * r * damping


def mutually_orthogonal(vectors: Sequence[np.ndarray]) -> bool:
    """``is_orthogonal`` for every pair, from one Gram matrix."""
    stack = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(stack, axis=1)
    scale = np.outer(norms, norms)
    pairs = ~np.eye(stack.shape[0], dtype=bool) & (scale > 0.0)
    return bool(np.all(np.abs(stack @ stack.T)[pairs] <= ORTHOGONALITY_TOL * scale[pairs]))


def _fpl_combine(vectors: Sequence[np.ndarray], terms: Tuple[np.ndarray, np.ndarray], beta: float,
                 rng: np.random.Generator) -> DiasVector:
    weights, damping = terms
    r = rng.uniform(-1.0, 1.0, size=weights.shape[0])
    if mutually_orthogonal(vectors):
        return np.sum(vectors, axis=0)
    return np.sum([w * v for w, v in zip(weights + beta * r * damping, vectors)], axis=0)


def compose_fpl(pairs: Sequence[DiasPair], conjunctive: bool, cfg: CompositionConfig,
                rng: np.random.Generator) -> DiasVector:
    """Power-mean weighted composition; mutually orthogonal vectors are simply summed."""
    if len(pairs) < 2:
        raise ValueError("compose_fpl needs at least two (vector, interval) pairs")
    f = np.array([fulfillment(interval) for _, interval in pairs])
    p = cfg.p_and if conjunctive else cfg.p_or
    return _fpl_combine([v for v, _ in pairs], fpl_terms(f, p), cfg.beta, rng)


def min_fulfillment_bound(y: float, n: int, p: float) -> float:
    """Smallest component fulfillment compatible with ``power_mean(f, p) == y`` over n components."""
    if p == 0:
        return float(y ** n)
    radicand = n * (y ** p - 1.0) + 1.0
    if radicand <= 0.0 or not math.isfinite(radicand):
        return 0.0
    return float(radicand ** (1.0 / p))


class DiasField:
    """DIAS of ``phi`` at a fixed state, evaluated for many candidate controls.

    Predicate gradients, the monitor intervals of Boolean children and the FPL
    fulfillment weights depend only on the state and the monitor, so they are
    computed once here; each call steps the dynamics once and composes.
    """

    def __init__(
        self,
        q: np.ndarray,
        phi: Formula,
        monitor: "Union[MonitorState, BatchIntervalMonitor]",
        cfg: CompositionConfig,
        system: "SystemModel",
    ):
        self.state = _checked_state(q, system)
        self.phi = phi
        self.cfg = cfg
        self.system = system
        self.gradients: Dict[int, np.ndarray] = {}
        self.intervals: Dict[int, RobustnessInterval] = {}
        self.fpl: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        for node in phi.walk():
            if node.kind == NodeKind.PRED:
                assert node.predicate is not None
                self.gradients[node.node_id] = robustness_gradient(self.state, node.predicate)
            elif node.kind in BOOLEAN_KINDS:
                for child in node.children:
                    self.intervals[child.node_id] = monitor.node_interval(child.node_id)
                if cfg.mode == CompositionMode.FPL:
                    f = np.array([fulfillment(self.intervals[c.node_id]) for c in node.children])
                    self.fpl[node.node_id] = fpl_terms(f, cfg.p_and if node.kind == NodeKind.AND else cfg.p_or)

    def __call__(self, u: np.ndarray, rng: np.random.Generator) -> DiasVector:
        state = self.state
        motion = self.system.state_difference(self.system.step(state, u), state)
        jacobian = self.system.jacobian(state, u)

        def visit(node: Formula) -> np.ndarray:
            if node.kind == NodeKind.PRED:
                return _gated(self.gradients[node.node_id], motion, jacobian)
            if node.kind in TEMPORAL_KINDS:
                return visit(node.child)
            if node.kind in BOOLEAN_KINDS:
                if node.node_id in self.fpl:
                    return _fpl_combine([visit(c) for c in node.children], self.fpl[node.node_id],
                                        self.cfg.beta, rng)
                pairs = [(visit(c), self.intervals[c.node_id]) for c in node.children]
                return compose_stochastic(pairs, rng, node.kind == NodeKind.AND)
            return np.zeros_like(state)

        return visit(self.phi)


def dias(
    q: np.ndarray,
    u: np.ndarray,
    phi: Formula,
    monitor: "Union[MonitorState, BatchIntervalMonitor]",
    cfg: CompositionConfig,
    system: "SystemModel",
    rng: Optional[np.random.Generator] = None,
) -> DiasVector:
    """DIAS of ``phi`` at ``q`` under control ``u``, composing children with the configured mode."""
    generator = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    return DiasField(q, phi, monitor, cfg, system)(u, generator)
