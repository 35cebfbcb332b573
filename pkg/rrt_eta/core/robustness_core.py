"""Offline robustness: AGM and min-max aggregators, full-trace and batch-interval evaluation."""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from rrt_eta.core.stl_formula import BOOLEAN_KINDS, Formula, NodeKind, Predicate, horizon

logger = logging.getLogger(__name__)

DOMAIN_TOL = 1e-9


class RobustnessDomainError(ValueError):
    """Aggregator input is empty or outside [-1, 1]."""


class IncompleteTraceError(ValueError):
    """Trace is shorter than the formula horizon requires."""


class Semantics(str, Enum):
    AGM = "agm"
    MINMAX = "minmax"


@dataclass(frozen=True)
class RobustnessInterval:
    """Closed interval [lo, hi] inside [-1, 1] bounding the robustness of every completion."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (-1.0 - DOMAIN_TOL <= self.lo <= self.hi + DOMAIN_TOL and self.hi <= 1.0 + DOMAIN_TOL):
            raise RobustnessDomainError(f"Invalid robustness interval [{self.lo}, {self.hi}]")

    @classmethod
    def full(cls) -> "RobustnessInterval":
        return cls(-1.0, 1.0)

    @classmethod
    def singleton(cls, value: float) -> "RobustnessInterval":
        return cls(value, value)

    @property
    def is_singleton(self) -> bool:
        return self.lo == self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, value: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= value <= self.hi + tol

    def within(self, other: "RobustnessInterval", tol: float = 0.0) -> bool:
        """True when self is a subset of ``other``."""
        return other.lo - tol <= self.lo and self.hi <= other.hi + tol

    def as_tuple(self) -> Tuple[float, float]:
        return (self.lo, self.hi)


FULL_INTERVAL = RobustnessInterval.full()


class Trace:
    """Finite signal segment: ``samples[i]`` is the state at absolute step ``t0 + i``."""

    def __init__(self, samples: Any, t0: int = 0):
        array = np.atleast_2d(np.asarray(samples, dtype=float))
        if array.size == 0:
            raise ValueError("Trace must contain at least one sample")
        self.samples = array
        self.t0 = int(t0)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def end(self) -> int:
        """Last observed absolute step."""
        return self.t0 + len(self) - 1

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    def state_at(self, t: int) -> np.ndarray:
        return self.samples[t - self.t0]


# Aggregators


def _checked(values: Iterable[float]) -> np.ndarray:
    array = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).ravel()
    if array.size == 0:
        raise RobustnessDomainError("Cannot aggregate an empty sequence")
    if np.any(np.isnan(array)) or np.any(array < -1.0 - DOMAIN_TOL) or np.any(array > 1.0 + DOMAIN_TOL):
        raise RobustnessDomainError(f"Robustness values must lie in [-1, 1], got {array}")
    return np.clip(array, -1.0, 1.0)


def agm_or(values: Iterable[float]) -> float:
    """AGM disjunction: geometric branch when every value is violated, else mean of positive parts."""
    r = _checked(values)
    if np.all(r < 0.0):
        return float(-np.expm1(np.mean(np.log1p(-r))))
    return float(np.mean(np.maximum(r, 0.0)))


def agm_and(values: Iterable[float]) -> float:
    """AGM conjunction: geometric branch when every value is satisfied, else mean of negative parts."""
    r = _checked(values)
    if np.all(r > 0.0):
        return float(np.expm1(np.mean(np.log1p(r))))
    return float(np.mean(np.minimum(r, 0.0)))


def minmax_or(values: Iterable[float]) -> float:
    return float(np.max(_checked(values)))


def minmax_and(values: Iterable[float]) -> float:
    return float(np.min(_checked(values)))


Aggregator = Callable[[Iterable[float]], float]

_AGGREGATORS: Dict[Semantics, Dict[bool, Aggregator]] = {
    Semantics.AGM: {True: agm_and, False: agm_or},
    Semantics.MINMAX: {True: minmax_and, False: minmax_or},
}


def aggregator(semantics: Semantics, conjunctive: bool) -> Aggregator:
    """Conjunction (and G) or disjunction (and F) aggregator of a semantics."""
    return _AGGREGATORS[Semantics(semantics)][conjunctive]


def is_conjunctive(node: Formula) -> bool:
    return node.kind in (NodeKind.AND, NodeKind.GLOBALLY)


def agm_extend(eta: float, n_prior: int, value: float, k: int, conjunctive: bool) -> float:
    """AGM of ``n_prior`` values aggregating to ``eta`` plus ``k`` copies of ``value``, in O(1).

    Exact for both branches: a disjunctive aggregate is negative only when every
    prior is negative (and dually for conjunction), which decides the branch.
    """
    if k < 0 or n_prior < 0:
        raise RobustnessDomainError(f"Counts must be nonnegative, got n_prior={n_prior}, k={k}")
    if k == 0:
        return eta
    if n_prior == 0:
        return value
    total = n_prior + k
    if conjunctive:
        if eta > 0.0 and value > 0.0:
            mean_log = (n_prior * math.log1p(eta) + k * math.log1p(value)) / total
            return math.expm1(mean_log)
        if eta > 0.0:
            return k * value / total
        return (n_prior * eta + k * min(value, 0.0)) / total
    if eta < 0.0 and value < 0.0:
        mean_log = (n_prior * math.log1p(-eta) + k * math.log1p(-value)) / total
        return -math.expm1(mean_log)
    if eta < 0.0:
        return k * value / total
    return (n_prior * eta + k * max(value, 0.0)) / total


# Predicates and full traces


def predicate_robustness(s: Any, mu: Predicate) -> float:
    """Normalized predicate robustness ``clamp((h(s) - threshold) / (2 * scale), -1, 1)``."""
    value = mu.margin(s) / (2.0 * mu.scale)
    return float(min(1.0, max(-1.0, value)))


def _require_complete(trace: Trace, phi: Formula, t: int) -> None:
    needed = horizon(phi)
    if t < trace.t0 or t + needed > trace.end:
        raise IncompleteTraceError(
            f"Trace covers steps {trace.t0}..{trace.end} but evaluation from {t} needs {t}..{t + needed}")


class _OfflineEvaluator:
    """Suffix-semantics evaluation with a (node, step) memo."""

    def __init__(self, trace: Trace, semantics: Semantics):
        self.trace = trace
        self.semantics = Semantics(semantics)
        self._memo: Dict[Tuple[int, int], float] = {}

    def value(self, node: Formula, t: int) -> float:
        key = (node.node_id, t)
        cached = self._memo.get(key)
        if cached is not None:
            return cached
        if node.kind == NodeKind.TRUE:
            result = 1.0
        elif node.kind == NodeKind.FALSE:
            result = -1.0
        elif node.kind == NodeKind.PRED:
            assert node.predicate is not None
            result = predicate_robustness(self.trace.state_at(t), node.predicate)
        elif node.kind in BOOLEAN_KINDS:
            agg = aggregator(self.semantics, is_conjunctive(node))
            result = agg([self.value(c, t) for c in node.children])
        else:
            agg = aggregator(self.semantics, is_conjunctive(node))
            result = agg([self.value(node.child, t + tau) for tau in range(node.a, node.b + 1)])
        self._memo[key] = result
        return result


def evaluate(trace: Trace, phi: Formula, semantics: Semantics = Semantics.AGM, t: Optional[int] = None) -> float:
    """Robustness of ``phi`` on ``trace`` from absolute step ``t`` (default ``trace.t0``)."""
    start = trace.t0 if t is None else t
    _require_complete(trace, phi, start)
    return _OfflineEvaluator(trace, semantics).value(phi, start)


def agm_robustness(trace: Trace, phi: Formula) -> float:
    return evaluate(trace, phi, Semantics.AGM)


def minmax_robustness(trace: Trace, phi: Formula) -> float:
    return evaluate(trace, phi, Semantics.MINMAX)


def subformula_robustness(trace: Trace, phi: Formula, semantics: Semantics = Semantics.AGM) -> Dict[int, float]:
    """Robustness of every subformula evaluated from the start of the trace, keyed by node_id."""
    _require_complete(trace, phi, trace.t0)
    evaluator = _OfflineEvaluator(trace, semantics)
    return {node.node_id: evaluator.value(node, trace.t0) for node in phi.walk()}


# Partial traces


@dataclass
class EvalStats:
    """Counts AST-node visits made by the batch interval evaluator."""

    visits: int = 0


class _IntervalEvaluator:
    def __init__(self, prefix: Trace, t_prime: int, semantics: Semantics, stats: EvalStats):
        self.prefix = prefix
        self.t_prime = t_prime
        self.semantics = Semantics(semantics)
        self.stats = stats

    def interval(self, node: Formula, t: int) -> RobustnessInterval:
        self.stats.visits += 1
        if node.kind == NodeKind.TRUE:
            return RobustnessInterval.singleton(1.0)
        if node.kind == NodeKind.FALSE:
            return RobustnessInterval.singleton(-1.0)
        if node.kind == NodeKind.PRED:
            assert node.predicate is not None
            if t > self.t_prime:
                return FULL_INTERVAL
            return RobustnessInterval.singleton(predicate_robustness(self.prefix.state_at(t), node.predicate))
        agg = aggregator(self.semantics, is_conjunctive(node))
        if node.kind in BOOLEAN_KINDS:
            parts = [self.interval(c, t) for c in node.children]
            return RobustnessInterval(agg([p.lo for p in parts]), agg([p.hi for p in parts]))
        if self.t_prime < t + node.a:
            return FULL_INTERVAL
        lows = []
        highs = []
        for tau in range(node.a, node.b + 1):
            if t + tau > self.t_prime:
                lows.append(-1.0)
                highs.append(1.0)
            else:
                part = self.interval(node.child, t + tau)
                lows.append(part.lo)
                highs.append(part.hi)
        return RobustnessInterval(agg(lows), agg(highs))


def interval_robustness(
    prefix: Trace,
    phi: Formula,
    t_prime: Optional[int] = None,
    semantics: Semantics = Semantics.AGM,
    stats: Optional[EvalStats] = None,
) -> RobustnessInterval:
    """Robustness interval of a partial trace, recomputed from scratch.

    Observations cover ``prefix.t0 .. t_prime``; window slots past ``t_prime``
    are padded with -1 on the lower track and +1 on the upper track.

    Args:
        prefix: Observed states, ``prefix.t0`` is the evaluation start
        phi: Formula to evaluate
        t_prime: Last observed step (default: ``prefix.end``)
        semantics: AGM or min-max aggregation
        stats: Optional visit counter, incremented once per AST-node visit

    Returns:
        RobustnessInterval containing the robustness of every completion
    """
    last = prefix.end if t_prime is None else int(t_prime)
    if last < prefix.t0 or last > prefix.end:
        raise IncompleteTraceError(f"t_prime={last} outside observed steps {prefix.t0}..{prefix.end}")
    return _IntervalEvaluator(prefix, last, semantics, stats or EvalStats()).interval(phi, prefix.t0)
