"""Incremental AGM robustness-interval monitor for partial trajectories.

Every AST node keeps evaluation instances keyed by their absolute start step.
An instance started at step ``u`` is shared by every parent instance that reads
the node at ``u``, so one ``step`` call visits each AST node exactly once:
pre-order to decide which new instances start at this step, post-order to fold
the new observation into the live instances.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from rrt_eta.core.robustness_core import (
    FULL_INTERVAL,
    EvalStats,
    RobustnessDomainError,
    RobustnessInterval,
    Semantics,
    Trace,
    agm_extend,
    aggregator,
    interval_robustness,
    is_conjunctive,
    predicate_robustness,
)
from rrt_eta.core.stl_formula import BOOLEAN_KINDS, TEMPORAL_KINDS, Formula, NodeKind

logger = logging.getLogger(__name__)

DebugSink = Callable[[Dict[str, Any]], None]
SlotReader = Callable[[int], Tuple[Optional[RobustnessInterval], bool]]


class MonitorTimeError(ValueError):
    """Observation time step is not the next expected step."""


def mdf_agm_or(eta: float, n: int, eta_new: float) -> float:
    """Fold ``eta_new`` into the AGM disjunction ``eta`` of ``n - 1`` prior values."""
    if n < 1:
        raise RobustnessDomainError(f"Aggregation count must be >= 1, got {n}")
    return agm_extend(eta, n - 1, eta_new, 1, conjunctive=False)


def mdf_agm_and(eta: float, n: int, eta_new: float) -> float:
    """Fold ``eta_new`` into the AGM conjunction ``eta`` of ``n - 1`` prior values."""
    if n < 1:
        raise RobustnessDomainError(f"Aggregation count must be >= 1, got {n}")
    return agm_extend(eta, n - 1, eta_new, 1, conjunctive=True)


@dataclass
class NodeRecord:
    """One evaluation instance of an AST node. ``lo``/``hi`` are None while Empty."""

    start: int
    lo: Optional[float] = None
    hi: Optional[float] = None
    done: bool = False
    count: int = 0

    @property
    def interval(self) -> Optional[RobustnessInterval]:
        if self.lo is None or self.hi is None:
            return None
        return RobustnessInterval(self.lo, self.hi)

    def copy(self) -> "NodeRecord":
        return replace(self)


@dataclass
class BooleanRecord(NodeRecord):
    child_lo: List[float] = field(default_factory=list)
    child_hi: List[float] = field(default_factory=list)
    child_done: List[bool] = field(default_factory=list)

    def copy(self) -> "BooleanRecord":
        return replace(self, child_lo=list(self.child_lo), child_hi=list(self.child_hi),
                       child_done=list(self.child_done))


@dataclass
class TemporalRecord(NodeRecord):
    """Window state: done slots folded into ``fold_*`` over ``folded`` values, open slots pending."""

    folded: int = 0
    fold_lo: float = 0.0
    fold_hi: float = 0.0
    open_slots: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    def copy(self) -> "TemporalRecord":
        return replace(self, open_slots=dict(self.open_slots))

    def absorb(self, t_prime: int, a: int, b: int, window_n: int, conjunctive: bool, read_slot: SlotReader) -> None:
        if self.done:
            return
        if t_prime < self.start + a:
            self.lo = self.hi = None
            return
        if t_prime <= self.start + b and t_prime not in self.open_slots:
            self.open_slots[t_prime] = (-1.0, 1.0)
            self.count += 1

        open_lo: List[float] = []
        open_hi: List[float] = []
        for slot in sorted(self.open_slots):
            interval, slot_done = read_slot(slot)
            if interval is None:
                lo, hi = self.open_slots[slot]
            else:
                lo, hi = interval.lo, interval.hi
            if slot_done:
                self.fold_lo = agm_extend(self.fold_lo, self.folded, lo, 1, conjunctive)
                self.fold_hi = agm_extend(self.fold_hi, self.folded, hi, 1, conjunctive)
                self.folded += 1
                del self.open_slots[slot]
            else:
                self.open_slots[slot] = (lo, hi)
                open_lo.append(lo)
                open_hi.append(hi)

        pads = max(window_n - self.count, 0)
        lo, hi, n = self.fold_lo, self.fold_hi, self.folded
        for v_lo, v_hi in zip(open_lo, open_hi):
            lo = agm_extend(lo, n, v_lo, 1, conjunctive)
            hi = agm_extend(hi, n, v_hi, 1, conjunctive)
            n += 1
        self.lo = agm_extend(lo, n, -1.0, pads, conjunctive)
        self.hi = agm_extend(hi, n, 1.0, pads, conjunctive)
        if (not self.open_slots and pads == 0) or self.lo == self.hi:
            self.done = True


def irtm_temporal(
    record: TemporalRecord,
    child_interval: RobustnessInterval,
    t_s: int,
    t_prime: int,
    a: int,
    b: int,
    window_n: int,
    kind: NodeKind,
) -> Optional[RobustnessInterval]:
    """Advance one temporal-operator instance by one observation.

    ``child_interval`` is the interval of the child instance opened at
    ``t_prime``; earlier open slots keep their last known intervals. Returns
    None (Empty) before the window opens.
    """
    if kind not in TEMPORAL_KINDS:
        raise ValueError(f"irtm_temporal needs a temporal kind, got {kind}")
    if record.start != t_s:
        raise MonitorTimeError(f"Record started at {record.start}, not {t_s}")

    def read_slot(slot: int) -> Tuple[Optional[RobustnessInterval], bool]:
        if slot == t_prime:
            return child_interval, child_interval.is_singleton
        lo, hi = record.open_slots[slot]
        return RobustnessInterval(lo, hi), lo == hi

    record.absorb(t_prime, a, b, window_n, kind == NodeKind.GLOBALLY, read_slot)
    return record.interval


class MonitorState:
    """Per-node instance memo for one formula, stepped one observation at a time."""

    def __init__(self, phi: Formula, t_start: int = 0, debug_sink: Optional[DebugSink] = None):
        self.phi = phi
        self.t_start = int(t_start)
        self.steps_seen: Optional[int] = None
        self.debug_sink = debug_sink
        self.last_visits = 0
        self.total_visits = 0
        self._nodes: List[Formula] = list(phi.walk())
        self._instances: List[Dict[int, NodeRecord]] = [{} for _ in self._nodes]
        self._latest: List[Optional[RobustnessInterval]] = [None for _ in self._nodes]
        self._root: Optional[RobustnessInterval] = None
        self._root_done = False

    # Queries

    @property
    def root_interval(self) -> RobustnessInterval:
        return self._root if self._root is not None else FULL_INTERVAL

    @property
    def is_done(self) -> bool:
        return self._root_done

    @property
    def next_step(self) -> int:
        return self.t_start if self.steps_seen is None else self.steps_seen + 1

    def node_interval(self, node_id: int) -> RobustnessInterval:
        """Interval of the node's most recently started instance (Empty reads as [-1, 1])."""
        latest = self._latest[node_id]
        return latest if latest is not None else FULL_INTERVAL

    def live_instances(self) -> int:
        return sum(len(records) for records in self._instances)

    # Stepping

    def step(self, s: Any, t_prime: int) -> RobustnessInterval:
        """Absorb the observation ``s`` at absolute step ``t_prime``."""
        if t_prime != self.next_step:
            raise MonitorTimeError(f"Expected step {self.next_step}, got {t_prime}")
        self.steps_seen = t_prime
        self.last_visits = 0
        if self._root_done:
            return self.root_interval
        state = np.asarray(s, dtype=float)
        self._visit(self.phi, t_prime == self.t_start, state, t_prime)
        root_record = self._instances[0].get(self.t_start)
        if root_record is not None:
            self._root = root_record.interval
            self._root_done = root_record.done
        self.total_visits += self.last_visits
        return self.root_interval

    def _visit(self, node: Formula, spawn: bool, s: np.ndarray, t_prime: int) -> None:
        self.last_visits += 1
        records = self._instances[node.node_id]
        for start in [u for u, r in records.items() if r.done]:
            del records[start]
        if spawn and t_prime not in records:
            records[t_prime] = self._new_record(node, t_prime)

        if node.kind in TEMPORAL_KINDS:
            child_spawn = any(
                not r.done and r.start + node.a <= t_prime <= r.start + node.b for r in records.values())
        else:
            child_spawn = spawn
        for child in node.children:
            self._visit(child, child_spawn, s, t_prime)

        for record in records.values():
            self._update(node, record, s, t_prime)
        latest = records.get(max(records)) if records else None
        if latest is not None:
            self._latest[node.node_id] = latest.interval
        if self.debug_sink is not None and latest is not None:
            interval = latest.interval or FULL_INTERVAL
            self.debug_sink({"t": t_prime, "node_id": node.node_id, "lo": interval.lo, "hi": interval.hi,
                             "N": latest.count})

    @staticmethod
    def _new_record(node: Formula, start: int) -> NodeRecord:
        if node.kind in TEMPORAL_KINDS:
            return TemporalRecord(start=start)
        if node.kind in BOOLEAN_KINDS:
            n = len(node.children)
            return BooleanRecord(start=start, child_lo=[-1.0] * n, child_hi=[1.0] * n, child_done=[False] * n)
        return NodeRecord(start=start)

    def _read(self, node: Formula, start: int) -> Tuple[Optional[RobustnessInterval], bool]:
        record = self._instances[node.node_id].get(start)
        if record is None:
            return None, False
        return record.interval, record.done

    def _update(self, node: Formula, record: NodeRecord, s: np.ndarray, t_prime: int) -> None:
        if record.done:
            return
        if node.kind == NodeKind.PRED:
            assert node.predicate is not None
            record.lo = record.hi = predicate_robustness(s, node.predicate)
            record.count, record.done = 1, True
        elif node.kind in (NodeKind.TRUE, NodeKind.FALSE):
            record.lo = record.hi = 1.0 if node.kind == NodeKind.TRUE else -1.0
            record.count, record.done = 1, True
        elif isinstance(record, BooleanRecord):
            for i, child in enumerate(node.children):
                if record.child_done[i]:
                    continue
                interval, child_done = self._read(child, record.start)
                interval = interval or FULL_INTERVAL
                record.child_lo[i], record.child_hi[i] = interval.lo, interval.hi
                record.child_done[i] = child_done
            agg = aggregator(Semantics.AGM, is_conjunctive(node))
            record.lo, record.hi = agg(record.child_lo), agg(record.child_hi)
            record.count = 1
            record.done = record.lo == record.hi
        elif isinstance(record, TemporalRecord):
            child = node.child
            record.absorb(t_prime, node.a, node.b, node.window_length, is_conjunctive(node),
                          lambda slot: self._read(child, slot))

    def clone(self) -> "MonitorState":
        copy = MonitorState.__new__(MonitorState)
        copy.phi = self.phi
        copy.t_start = self.t_start
        copy.steps_seen = self.steps_seen
        copy.debug_sink = self.debug_sink
        copy.last_visits = self.last_visits
        copy.total_visits = self.total_visits
        copy._nodes = self._nodes
        copy._instances = [{u: r.copy() for u, r in records.items()} for records in self._instances]
        copy._latest = list(self._latest)
        copy._root = self._root
        copy._root_done = self._root_done
        return copy


class BatchIntervalMonitor:
    """Monitor with the MonitorState interface that recomputes intervals from the stored prefix.

    Used for min-max intervals (no incremental update exists for them) and as a
    recomputation oracle for the incremental monitor.
    """

    def __init__(self, phi: Formula, t_start: int = 0, semantics: Semantics = Semantics.MINMAX):
        self.phi = phi
        self.t_start = int(t_start)
        self.semantics = Semantics(semantics)
        self.steps_seen: Optional[int] = None
        self.stats = EvalStats()
        self._states: List[np.ndarray] = []
        self._root: Optional[RobustnessInterval] = None
        self._parents: Dict[int, Optional[Formula]] = {phi.node_id: None}
        self._by_id: Dict[int, Formula] = {}
        for node in phi.walk():
            self._by_id[node.node_id] = node
            for child in node.children:
                self._parents[child.node_id] = node

    @property
    def root_interval(self) -> RobustnessInterval:
        return self._root if self._root is not None else FULL_INTERVAL

    @property
    def is_done(self) -> bool:
        return self._root is not None and self._root.is_singleton

    @property
    def next_step(self) -> int:
        return self.t_start if self.steps_seen is None else self.steps_seen + 1

    def step(self, s: Any, t_prime: int) -> RobustnessInterval:
        if t_prime != self.next_step:
            raise MonitorTimeError(f"Expected step {self.next_step}, got {t_prime}")
        self.steps_seen = t_prime
        if self.is_done:
            return self.root_interval
        self._states.append(np.asarray(s, dtype=float))
        self._root = interval_robustness(self._trace(self.t_start), self.phi, t_prime, self.semantics, self.stats)
        return self._root

    def _trace(self, start: int) -> Trace:
        return Trace(np.stack(self._states[start - self.t_start:]), start)

    def _latest_start(self, node: Formula) -> Optional[int]:
        parent = self._parents[node.node_id]
        if parent is None:
            return self.t_start
        parent_start = self._latest_start(parent)
        if parent_start is None or self.steps_seen is None:
            return None
        if parent.kind not in TEMPORAL_KINDS:
            return parent_start
        if self.steps_seen < parent_start + parent.a:
            return None
        return min(self.steps_seen, parent_start + parent.b)

    def node_interval(self, node_id: int) -> RobustnessInterval:
        node = self._by_id[node_id]
        start = self._latest_start(node)
        if start is None or self.steps_seen is None or start > self.steps_seen:
            return FULL_INTERVAL
        return interval_robustness(self._trace(start), node, self.steps_seen, self.semantics, self.stats)

    def clone(self) -> "BatchIntervalMonitor":
        copy = BatchIntervalMonitor.__new__(BatchIntervalMonitor)
        copy.__dict__.update(self.__dict__)
        copy.stats = EvalStats(self.stats.visits)
        copy._states = list(self._states)
        return copy


def monitor_init(phi: Formula, t_s: int = 0, debug_sink: Optional[DebugSink] = None) -> MonitorState:
    """Fresh monitor: every node Empty, root reported as [-1, 1]."""
    return MonitorState(phi, t_s, debug_sink)


def monitor_step(state: MonitorState, phi: Formula, s: Any, t_prime: int) -> Tuple[MonitorState, RobustnessInterval]:
    """Absorb one observation; returns the (mutated) state and the root interval."""
    if phi != state.phi:
        raise ValueError("Monitor state was initialized for a different formula")
    return state, state.step(s, t_prime)


def monitor_clone(state: MonitorState) -> MonitorState:
    return state.clone()
