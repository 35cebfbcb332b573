"""STL formulae: predicates, the positive-normal-form AST, parsing and queries."""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterator, List, Mapping, Optional, Set, Tuple

import numpy as np
from pyparsing import (
    Forward,
    Keyword,
    OpAssoc,
    ParseException,
    ParserElement,
    Regex,
    Suppress,
    Word,
    alphanums,
    alphas,
    infix_notation,
    one_of,
)

logger = logging.getLogger(__name__)

ParserElement.enable_packrat()


class FormulaError(ValueError):
    """Base class for malformed formulae and predicates."""


class FormulaSyntaxError(FormulaError):
    """Formula text does not match the grammar."""

    def __init__(self, message: str, position: int, line: int = 1, column: int = 1):
        super().__init__(f"{message} (at char {position}, line {line}, col {column})")
        self.position = position
        self.line = line
        self.column = column


class UnknownPredicateError(FormulaError):
    """Formula references a predicate id missing from the predicate table."""

    def __init__(self, predicate_id: str, position: int = 0):
        super().__init__(f"Unknown predicate '{predicate_id}' (at char {position})")
        self.predicate_id = predicate_id
        self.position = position


class IntervalBoundsError(FormulaError):
    """Temporal window bounds are negative or out of order."""


class PredicateError(FormulaError):
    """Predicate definition violates its invariants."""


class DimensionMismatchError(ValueError):
    """State vector does not have the dimension a predicate expects."""


class NodeKind(str, Enum):
    TRUE = "true"
    FALSE = "false"
    PRED = "pred"
    AND = "and"
    OR = "or"
    GLOBALLY = "G"
    FINALLY = "F"


class PredicateKind(str, Enum):
    AFFINE = "affine"
    BALL = "ball"
    BOX = "box"


TEMPORAL_KINDS = (NodeKind.GLOBALLY, NodeKind.FINALLY)
BOOLEAN_KINDS = (NodeKind.AND, NodeKind.OR)


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class RegionHint:
    """Axis-aligned box or ball on a subset of state axes, used to bias sampling."""

    axes: Tuple[int, ...]
    lower: Tuple[float, ...] = ()
    upper: Tuple[float, ...] = ()
    center: Tuple[float, ...] = ()
    radius: float = 0.0

    def __post_init__(self) -> None:
        if not self.axes:
            raise PredicateError("region_hint needs at least one axis")
        if self.is_ball:
            if len(self.center) != len(self.axes):
                raise PredicateError("region_hint center must match its axes")
            if self.radius <= 0:
                raise PredicateError(f"region_hint radius must be positive, got {self.radius}")
        else:
            if len(self.lower) != len(self.axes) or len(self.upper) != len(self.axes):
                raise PredicateError("region_hint bounds must match its axes")
            if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
                raise PredicateError(f"region_hint is empty: lower={self.lower} upper={self.upper}")

    @property
    def is_ball(self) -> bool:
        return len(self.center) > 0

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw a point uniformly inside the region (coordinates on ``axes`` only)."""
        if self.is_ball:
            dim = len(self.axes)
            direction = rng.standard_normal(dim)
            norm = float(np.linalg.norm(direction)) or 1.0
            radius = self.radius * rng.uniform() ** (1.0 / dim)
            return np.asarray(self.center) + direction / norm * radius
        return rng.uniform(np.asarray(self.lower), np.asarray(self.upper))

    def contains(self, point: np.ndarray) -> bool:
        values = np.asarray(point, dtype=float)
        if self.is_ball:
            return bool(np.linalg.norm(values - np.asarray(self.center)) <= self.radius)
        return bool(np.all(values >= np.asarray(self.lower)) and np.all(values <= np.asarray(self.upper)))

    def to_dict(self) -> Dict[str, Any]:
        if self.is_ball:
            return {"axes": list(self.axes), "center": list(self.center), "radius": self.radius}
        return {"axes": list(self.axes), "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class Predicate:
    """Atomic proposition ``h(s) > threshold`` normalized by ``scale``.

    ``sign`` is -1 for a negated predicate: negation flips both h and the
    threshold, so the geometry fields always describe the un-negated region.
    """

    id: str
    kind: PredicateKind = PredicateKind.AFFINE
    coeffs: Tuple[float, ...] = ()
    offset: float = 0.0
    axes: Tuple[int, ...] = ()
    center: Tuple[float, ...] = ()
    radius: float = 0.0
    lower: Tuple[float, ...] = ()
    upper: Tuple[float, ...] = ()
    angular: Tuple[int, ...] = ()
    threshold: float = 0.0
    scale: float = 1.0
    sign: int = 1
    region_hint: Optional[RegionHint] = None

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise PredicateError(f"Predicate '{self.id}': scale must be positive, got {self.scale}")
        if self.sign not in (1, -1):
            raise PredicateError(f"Predicate '{self.id}': sign must be +1 or -1")
        if self.kind == PredicateKind.AFFINE:
            if not self.coeffs:
                raise PredicateError(f"Predicate '{self.id}': affine predicate needs coeffs")
        elif self.kind == PredicateKind.BALL:
            if len(self.center) != len(self.axes) or not self.axes:
                raise PredicateError(f"Predicate '{self.id}': ball center must match axes")
            if self.radius <= 0:
                raise PredicateError(f"Predicate '{self.id}': ball radius must be positive")
        elif self.kind == PredicateKind.BOX:
            if not self.axes or len(self.lower) != len(self.axes) or len(self.upper) != len(self.axes):
                raise PredicateError(f"Predicate '{self.id}': box bounds must match axes")
            if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
                raise PredicateError(f"Predicate '{self.id}': box is empty")

    # Constructors

    @classmethod
    def affine(cls, pid: str, coeffs: Any, offset: float = 0.0, threshold: float = 0.0, scale: float = 1.0,
               region_hint: Optional[RegionHint] = None) -> "Predicate":
        return cls(id=pid, kind=PredicateKind.AFFINE, coeffs=tuple(float(c) for c in coeffs), offset=float(offset),
                   threshold=float(threshold), scale=float(scale), region_hint=region_hint)

    @classmethod
    def ball(cls, pid: str, axes: Any, center: Any, radius: float, threshold: float = 0.0,
             scale: Optional[float] = None, region_hint: Optional[RegionHint] = None,
             angular: Any = ()) -> "Predicate":
        """Ball predicate ``radius - ||s[axes] - center||``; the default scale maps the center to 1."""
        axes_t = tuple(int(a) for a in axes)
        center_t = tuple(float(c) for c in center)
        hint = region_hint or RegionHint(axes=axes_t, center=center_t, radius=float(radius))
        return cls(id=pid, kind=PredicateKind.BALL, axes=axes_t, center=center_t, radius=float(radius),
                   threshold=float(threshold), scale=float(scale if scale is not None else radius / 2.0),
                   region_hint=hint, angular=tuple(int(a) for a in angular))

    @classmethod
    def box(cls, pid: str, axes: Any, lower: Any, upper: Any, threshold: float = 0.0, scale: float = 1.0,
            region_hint: Optional[RegionHint] = None) -> "Predicate":
        """Box predicate: signed distance to the nearest face, positive inside."""
        axes_t = tuple(int(a) for a in axes)
        lower_t = tuple(float(v) for v in lower)
        upper_t = tuple(float(v) for v in upper)
        hint = region_hint or RegionHint(axes=axes_t, lower=lower_t, upper=upper_t)
        return cls(id=pid, kind=PredicateKind.BOX, axes=axes_t, lower=lower_t, upper=upper_t,
                   threshold=float(threshold), scale=float(scale), region_hint=hint)

    # Evaluation

    @property
    def state_dim(self) -> int:
        """Smallest state dimension this predicate can be evaluated on."""
        if self.kind == PredicateKind.AFFINE:
            return len(self.coeffs)
        return max(self.axes) + 1

    def _check_dim(self, s: np.ndarray) -> None:
        if self.kind == PredicateKind.AFFINE and s.shape[0] != len(self.coeffs):
            raise DimensionMismatchError(
                f"Predicate '{self.id}' expects a {len(self.coeffs)}-dim state, got {s.shape[0]}")
        if self.kind != PredicateKind.AFFINE and s.shape[0] < self.state_dim:
            raise DimensionMismatchError(
                f"Predicate '{self.id}' reads axis {self.state_dim - 1} of a {s.shape[0]}-dim state")

    def _offsets(self, s: np.ndarray) -> np.ndarray:
        diff = s[list(self.axes)] - np.asarray(self.center)
        for i, axis in enumerate(self.axes):
            if axis in self.angular:
                diff[i] = wrap_angle(float(diff[i]))
        return diff

    def _base_value(self, s: np.ndarray) -> float:
        if self.kind == PredicateKind.AFFINE:
            return float(np.dot(self.coeffs, s) + self.offset)
        if self.kind == PredicateKind.BALL:
            return self.radius - float(np.linalg.norm(self._offsets(s)))
        values = s[list(self.axes)]
        return float(min(np.min(values - np.asarray(self.lower)), np.min(np.asarray(self.upper) - values)))

    def h(self, s: Any) -> float:
        state = np.asarray(s, dtype=float)
        self._check_dim(state)
        return self.sign * self._base_value(state)

    def margin(self, s: Any) -> float:
        """Unnormalized satisfaction margin ``h(s) - threshold``."""
        return self.h(s) - self.threshold

    def gradient(self, s: Any) -> np.ndarray:
        """Analytic gradient of ``h`` with respect to the full state vector."""
        state = np.asarray(s, dtype=float)
        self._check_dim(state)
        grad = np.zeros_like(state)
        if self.kind == PredicateKind.AFFINE:
            grad[:] = self.coeffs
        elif self.kind == PredicateKind.BALL:
            diff = self._offsets(state)
            norm = float(np.linalg.norm(diff))
            if norm > 0.0:
                grad[list(self.axes)] = -diff / norm
        else:
            values = state[list(self.axes)]
            to_lower = values - np.asarray(self.lower)
            to_upper = np.asarray(self.upper) - values
            if np.min(to_lower) <= np.min(to_upper):
                grad[self.axes[int(np.argmin(to_lower))]] = 1.0
            else:
                grad[self.axes[int(np.argmin(to_upper))]] = -1.0
        return self.sign * grad

    def negated(self) -> "Predicate":
        return replace(self, sign=-self.sign, threshold=-self.threshold)

    def is_workspace(self, n_joints: int) -> bool:
        """True when the predicate only reads augmented workspace axes (index >= n_joints)."""
        if self.kind == PredicateKind.AFFINE:
            used = [i for i, c in enumerate(self.coeffs) if c != 0.0]
            return bool(used) and min(used) >= n_joints
        return min(self.axes) >= n_joints


@dataclass(frozen=True)
class Formula:
    """Immutable STL AST node. ``node_id`` is the pre-order index within the root formula."""

    kind: NodeKind
    node_id: int = 0
    children: Tuple["Formula", ...] = ()
    predicate: Optional[Predicate] = None
    a: int = 0
    b: int = 0
    _size: int = field(default=0, compare=False, repr=False)

    @property
    def child(self) -> "Formula":
        return self.children[0]

    @property
    def is_temporal(self) -> bool:
        return self.kind in TEMPORAL_KINDS

    @property
    def window_length(self) -> int:
        return self.b - self.a + 1

    def walk(self) -> Iterator["Formula"]:
        """Pre-order traversal (node_id order)."""
        yield self
        for c in self.children:
            yield from c.walk()

    def __str__(self) -> str:
        return format_formula(self)


def _validate(node: Formula) -> None:
    if node.kind in BOOLEAN_KINDS and len(node.children) < 2:
        raise FormulaError(f"{node.kind.value} needs at least two children, got {len(node.children)}")
    if node.kind in TEMPORAL_KINDS:
        if len(node.children) != 1:
            raise FormulaError(f"{node.kind.value} takes exactly one child")
        if node.a < 0 or node.b < node.a:
            raise IntervalBoundsError(f"Invalid window [{node.a},{node.b}] on {node.kind.value}")
    if node.kind == NodeKind.PRED and node.predicate is None:
        raise FormulaError("pred node without a predicate")


def _renumber(node: Formula, start: int = 0) -> Formula:
    children: List[Formula] = []
    next_id = start + 1
    for c in node.children:
        numbered = _renumber(c, next_id)
        children.append(numbered)
        next_id += numbered._size
    return replace(node, node_id=start, children=tuple(children), _size=next_id - start)


def _build(node: Formula) -> Formula:
    _validate(node)
    return _renumber(node)


def true_() -> Formula:
    return _build(Formula(NodeKind.TRUE))


def false_() -> Formula:
    return _build(Formula(NodeKind.FALSE))


def pred(predicate: Predicate) -> Formula:
    return _build(Formula(NodeKind.PRED, predicate=predicate))


def conj(*children: Formula) -> Formula:
    return _build(Formula(NodeKind.AND, children=tuple(children)))


def disj(*children: Formula) -> Formula:
    return _build(Formula(NodeKind.OR, children=tuple(children)))


def globally(a: int, b: int, child: Formula) -> Formula:
    return _build(Formula(NodeKind.GLOBALLY, children=(child,), a=int(a), b=int(b)))


def eventually(a: int, b: int, child: Formula) -> Formula:
    return _build(Formula(NodeKind.FINALLY, children=(child,), a=int(a), b=int(b)))


_DUAL = {
    NodeKind.TRUE: NodeKind.FALSE,
    NodeKind.FALSE: NodeKind.TRUE,
    NodeKind.AND: NodeKind.OR,
    NodeKind.OR: NodeKind.AND,
    NodeKind.GLOBALLY: NodeKind.FINALLY,
    NodeKind.FINALLY: NodeKind.GLOBALLY,
}


def _negate_raw(node: Formula) -> Formula:
    if node.kind == NodeKind.PRED:
        assert node.predicate is not None
        return replace(node, predicate=node.predicate.negated())
    return replace(node, kind=_DUAL[node.kind], children=tuple(_negate_raw(c) for c in node.children))


def negate(phi: Formula) -> Formula:
    """Negation pushed to the predicates (De Morgan, G/F duality); result stays negation-free."""
    return _renumber(_negate_raw(phi))


def formula_size(phi: Formula) -> int:
    """Number of AST nodes |phi|."""
    return phi._size or sum(1 for _ in phi.walk())


def horizon(phi: Formula) -> int:
    """Steps needed to fully evaluate ``phi``."""
    if phi.kind in TEMPORAL_KINDS:
        return phi.b + horizon(phi.child)
    if phi.kind in BOOLEAN_KINDS:
        return max(horizon(c) for c in phi.children)
    return 0


def predicates(phi: Formula) -> Dict[str, Predicate]:
    """Predicates referenced by ``phi`` keyed by id (negated copies included as found)."""
    return {n.predicate.id: n.predicate for n in phi.walk() if n.predicate is not None}


def active_predicates(phi: Formula, t: int) -> Set[Tuple[Predicate, int]]:
    """Predicates whose value at step ``t`` can affect the robustness of ``phi``.

    Returns (predicate, polarity) pairs where polarity is the predicate's sign.
    Out-of-range ``t`` yields an empty set.
    """
    found: Set[Tuple[Predicate, int]] = set()
    if t < 0 or t > horizon(phi):
        return found
    seen: Set[Tuple[int, int]] = set()

    def visit(node: Formula, offset: int) -> None:
        if offset < 0 or (node.node_id, offset) in seen:
            return
        seen.add((node.node_id, offset))
        if node.kind == NodeKind.PRED:
            if offset == 0:
                assert node.predicate is not None
                found.add((node.predicate, node.predicate.sign))
        elif node.kind in TEMPORAL_KINDS:
            for tau in range(node.a, min(node.b, offset) + 1):
                visit(node.child, offset - tau)
        else:
            for c in node.children:
                visit(c, offset)

    visit(phi, t)
    return found


# Printing


def _format_bound(value: int) -> str:
    return str(int(value))


def format_formula(phi: Formula) -> str:
    """Deterministic text form; ``parse_formula(format_formula(phi))`` rebuilds ``phi``."""
    if phi.kind == NodeKind.TRUE:
        return "true"
    if phi.kind == NodeKind.FALSE:
        return "false"
    if phi.kind == NodeKind.PRED:
        assert phi.predicate is not None
        return phi.predicate.id if phi.predicate.sign > 0 else f"!{phi.predicate.id}"
    if phi.kind in TEMPORAL_KINDS:
        return f"{phi.kind.value}[{_format_bound(phi.a)},{_format_bound(phi.b)}]({format_formula(phi.child)})"
    op = " & " if phi.kind == NodeKind.AND else " | "
    parts = []
    for c in phi.children:
        text = format_formula(c)
        parts.append(f"({text})" if c.kind in BOOLEAN_KINDS else text)
    return op.join(parts)


# Parsing


@dataclass
class _Raw:
    tag: str
    args: Tuple[Any, ...]
    loc: int = 0


def _grammar() -> ParserElement:
    ident = Word(alphas + "_", alphanums + "_")
    ident.set_parse_action(lambda s, loc, t: _Raw("ident", (t[0],), loc))
    number = Regex(r"\d+(?:\.\d*)?")
    constant = Keyword("true") | Keyword("false")
    constant.set_parse_action(lambda s, loc, t: _Raw(t[0], (), loc))

    expr = Forward()
    temporal = (
        one_of("G F")
        + Suppress("[")
        + number
        + Suppress(",")
        + number
        + Suppress("]")
        + Suppress("(")
        + expr
        + Suppress(")")
    )
    temporal.set_parse_action(lambda s, loc, t: _Raw(t[0], (t[1], t[2], t[3]), loc))

    operand = temporal | constant | ident
    expr <<= infix_notation(
        operand,
        [
            (Suppress("!"), 1, OpAssoc.RIGHT, lambda s, loc, t: _Raw("not", (t[0][0],), loc)),
            (Suppress("&"), 2, OpAssoc.LEFT, lambda s, loc, t: _Raw("and", tuple(t[0]), loc)),
            (Suppress("|"), 2, OpAssoc.LEFT, lambda s, loc, t: _Raw("or", tuple(t[0]), loc)),
        ],
    )
    return expr


_GRAMMAR = _grammar()


def _to_steps(text: str, dt: float) -> Tuple[float, int]:
    if "." in text:
        seconds = float(text)
        return seconds, int(round(seconds / dt))
    return float(int(text)), int(text)


def _lower(raw: _Raw, table: Mapping[str, Predicate], dt: float) -> Formula:
    if raw.tag == "ident":
        name = raw.args[0]
        if name not in table:
            raise UnknownPredicateError(name, raw.loc)
        return Formula(NodeKind.PRED, predicate=table[name])
    if raw.tag == "true":
        return Formula(NodeKind.TRUE)
    if raw.tag == "false":
        return Formula(NodeKind.FALSE)
    if raw.tag == "not":
        return _negate_raw(_lower(raw.args[0], table, dt))
    if raw.tag in ("and", "or"):
        kind = NodeKind.AND if raw.tag == "and" else NodeKind.OR
        return Formula(kind, children=tuple(_lower(c, table, dt) for c in raw.args))
    a_text, b_text, child = raw.args
    a_src, a = _to_steps(a_text, dt)
    b_src, b = _to_steps(b_text, dt)
    if a_src >= b_src:
        raise IntervalBoundsError(f"Temporal window [{a_text},{b_text}] at char {raw.loc} needs a < b")
    kind = NodeKind.GLOBALLY if raw.tag == "G" else NodeKind.FINALLY
    node = Formula(kind, children=(_lower(child, table, dt),), a=a, b=b)
    _validate(node)
    return node


def parse_formula(text: str, predicate_table: Mapping[str, Predicate], dt: float = 1.0) -> Formula:
    """Parse formula text into a positive-normal-form AST.

    Args:
        text: Formula source, e.g. ``"F[0,15](R1) & G[0,20](!obstacle)"``
        predicate_table: Predicates by id
        dt: Seconds per step, used for bounds written with a decimal point

    Returns:
        Negation-free Formula with pre-order node ids

    Raises:
        FormulaSyntaxError: text does not match the grammar
        UnknownPredicateError: an identifier is not in ``predicate_table``
        IntervalBoundsError: a temporal window has a >= b
    """
    try:
        result = _GRAMMAR.parse_string(text, parse_all=True)
    except ParseException as e:
        raise FormulaSyntaxError(e.msg, e.loc, e.lineno, e.col) from e
    formula = _renumber(_lower(result[0], predicate_table, dt))
    logger.debug(f"Parsed formula {format_formula(formula)} (|phi|={formula_size(formula)})")
    return formula
