"""Tests for STL formula construction, parsing, printing and queries."""

import math

import numpy as np
import pytest
from hypothesis import given, settings

from rrt_eta.core.stl_formula import (
    DimensionMismatchError,
    FormulaError,
    FormulaSyntaxError,
    IntervalBoundsError,
    NodeKind,
    Predicate,
    PredicateError,
    RegionHint,
    UnknownPredicateError,
    active_predicates,
    conj,
    disj,
    eventually,
    format_formula,
    formula_size,
    globally,
    horizon,
    negate,
    parse_formula,
    pred,
    predicates,
    wrap_angle,
)
from tests.unit.formula_factory import PREDICATES, formulas


@pytest.fixture
def unicycle_table():
    """Region predicates of the unicycle reach-avoid task."""
    return {
        "R1": Predicate.box("R1", [0, 1], [2.0, 1.0], [3.0, 2.0], scale=0.25),
        "R2": Predicate.box("R2", [0, 1], [0.5, 2.5], [1.5, 3.0], scale=0.125),
        "obstacle": Predicate.box("obstacle", [0, 1], [0.5, 1.0], [1.5, 2.0], scale=0.25),
    }


@pytest.fixture
def unicycle_phi(unicycle_table):
    return parse_formula("F[0,15](R1) & F[15,40](R2) & G[0,20](!obstacle)", unicycle_table)


class TestPredicates:
    """Predicate construction and evaluation."""

    def test_affine_h_and_margin(self):
        mu = Predicate.affine("mu", [2.0, -1.0], offset=0.5, threshold=1.0)
        s = np.array([1.0, 0.5])
        assert mu.h(s) == pytest.approx(2.0)
        assert mu.margin(s) == pytest.approx(1.0)
        np.testing.assert_allclose(mu.gradient(s), [2.0, -1.0])

    def test_negated_flips_h_and_threshold(self):
        mu = Predicate.affine("mu", [1.0], threshold=0.25)
        neg = mu.negated()
        s = np.array([0.75])
        assert neg.h(s) == pytest.approx(-mu.h(s))
        assert neg.threshold == pytest.approx(-0.25)
        assert neg.margin(s) == pytest.approx(-mu.margin(s))
        assert neg.negated() == mu

    def test_ball_margin_is_radius_at_center(self):
        mu = Predicate.ball("goal", [0, 1], [3.5, 3.5], 1.0)
        assert mu.margin(np.array([3.5, 3.5])) == pytest.approx(1.0)
        assert mu.margin(np.array([5.5, 3.5])) == pytest.approx(-1.0)
        assert mu.scale == pytest.approx(0.5)

    def test_ball_gradient_points_to_center(self):
        mu = Predicate.ball("goal", [0, 1], [0.0, 0.0], 1.0)
        np.testing.assert_allclose(mu.gradient(np.array([2.0, 0.0])), [-1.0, 0.0])

    def test_box_signed_distance(self):
        box = Predicate.box("R", [0, 1], [0.0, 0.0], [2.0, 1.0])
        assert box.h(np.array([1.0, 0.5])) == pytest.approx(0.5)
        assert box.h(np.array([1.9, 0.5])) == pytest.approx(0.1)
        assert box.h(np.array([3.0, 0.5])) == pytest.approx(-1.0)

    def test_box_defaults_region_hint_to_itself(self):
        box = Predicate.box("R", [0, 1], [0.0, 0.0], [2.0, 1.0])
        assert box.region_hint == RegionHint(axes=(0, 1), lower=(0.0, 0.0), upper=(2.0, 1.0))

    def test_ball_on_angular_axis_wraps(self):
        heading = Predicate.ball("heading", [0], [math.pi - 0.1], 0.3, angular=[0])
        assert heading.margin(np.array([-math.pi + 0.1])) == pytest.approx(0.1)

    def test_scale_must_be_positive(self):
        with pytest.raises(PredicateError):
            Predicate.affine("mu", [1.0], scale=0.0)

    def test_empty_region_hint_rejected(self):
        with pytest.raises(PredicateError):
            RegionHint(axes=(0,), lower=(1.0,), upper=(0.0,))
        with pytest.raises(PredicateError):
            RegionHint(axes=(0, 1), center=(0.0, 0.0), radius=0.0)

    def test_dimension_mismatch(self):
        mu = Predicate.affine("mu", [1.0, 1.0])
        with pytest.raises(DimensionMismatchError):
            mu.h(np.array([1.0, 2.0, 3.0]))
        box = Predicate.box("R", [4], [0.0], [1.0])
        with pytest.raises(DimensionMismatchError):
            box.h(np.zeros(3))

    def test_region_hint_samples_inside(self):
        rng = np.random.default_rng(0)
        for hint in (RegionHint(axes=(0, 1), lower=(0.0, 1.0), upper=(1.0, 3.0)),
                     RegionHint(axes=(2, 3), center=(1.0, -1.0), radius=0.5)):
            for _ in range(50):
                assert hint.contains(hint.sample(rng))

    def test_is_workspace(self):
        assert Predicate.box("A", [3, 4], [0.0, 0.0], [1.0, 1.0]).is_workspace(3)
        assert not Predicate.box("J", [0], [-1.0], [1.0]).is_workspace(3)
        assert Predicate.affine("x", [0.0, 0.0, 0.0, 1.0, 0.0]).is_workspace(3)

    def test_wrap_angle(self):
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert wrap_angle(-3 * math.pi / 2) == pytest.approx(math.pi / 2)
        assert wrap_angle(0.3) == pytest.approx(0.3)


class TestParseFormula:
    """Grammar, negation elimination and error reporting."""

    def test_globally_of_predicate(self):
        avoid = Predicate.affine("avoid", [1.0])
        phi = parse_formula("G[0,20](avoid)", {"avoid": avoid})
        assert phi.kind == NodeKind.GLOBALLY
        assert (phi.a, phi.b) == (0, 20)
        assert phi.child.kind == NodeKind.PRED
        assert phi.child.predicate == avoid

    def test_finally_of_disjunction(self):
        table = {"muA": Predicate.affine("muA", [1.0]), "muB": Predicate.affine("muB", [-1.0])}
        phi = parse_formula("F[2,7](muA | muB)", table)
        assert phi.kind == NodeKind.FINALLY
        assert (phi.a, phi.b) == (2, 7)
        assert phi.child.kind == NodeKind.OR
        assert [c.predicate.id for c in phi.child.children] == ["muA", "muB"]

    def test_negated_eventually_becomes_globally(self):
        p = Predicate.affine("p", [1.0], threshold=0.5)
        phi = parse_formula("!(F[0,5](p))", {"p": p})
        assert phi.kind == NodeKind.GLOBALLY
        assert (phi.a, phi.b) == (0, 5)
        assert phi.child.predicate.sign == -1
        assert phi.child.predicate.threshold == pytest.approx(-0.5)

    def test_de_morgan(self):
        phi = parse_formula("!(p & (q | r))", PREDICATES)
        assert phi.kind == NodeKind.OR
        assert phi.children[0].predicate == PREDICATES["p"].negated()
        assert phi.children[1].kind == NodeKind.AND

    def test_precedence(self):
        phi = parse_formula("p | q & !r", PREDICATES)
        assert phi.kind == NodeKind.OR
        assert phi.children[1].kind == NodeKind.AND
        assert phi.children[1].children[1].predicate.sign == -1

    def test_node_ids_are_preorder(self, unicycle_phi):
        assert [n.node_id for n in unicycle_phi.walk()] == list(range(formula_size(unicycle_phi)))
        assert formula_size(unicycle_phi) == 7

    def test_constants(self):
        phi = parse_formula("true & F[0,1](false)", {})
        assert phi.children[0].kind == NodeKind.TRUE
        assert phi.children[1].child.kind == NodeKind.FALSE

    def test_identifier_starting_with_operator_letter(self):
        table = {"Goal": Predicate.affine("Goal", [1.0]), "Fence": Predicate.affine("Fence", [1.0])}
        phi = parse_formula("Goal & Fence", table)
        assert [c.predicate.id for c in phi.children] == ["Goal", "Fence"]

    def test_decimal_bounds_are_seconds(self):
        phi = parse_formula("F[0.5,2.0](p)", PREDICATES, dt=0.5)
        assert (phi.a, phi.b) == (1, 4)

    def test_syntax_error_reports_position(self):
        with pytest.raises(FormulaSyntaxError) as excinfo:
            parse_formula("G[0,5](p", PREDICATES)
        assert excinfo.value.position >= 0

    def test_unknown_predicate_named(self):
        with pytest.raises(UnknownPredicateError) as excinfo:
            parse_formula("F[0,3](p) & zeta", PREDICATES)
        assert excinfo.value.predicate_id == "zeta"
        assert "zeta" in str(excinfo.value)

    @pytest.mark.parametrize("text", ["F[5,2](p)", "G[3,3](p)"])
    def test_window_must_be_increasing(self, text):
        with pytest.raises(IntervalBoundsError):
            parse_formula(text, PREDICATES)

    def test_errors_share_base_class(self):
        for text in ("G[0,5](p", "zeta", "F[2,1](p)"):
            with pytest.raises(FormulaError):
                parse_formula(text, PREDICATES)


class TestBuildersAndQueries:
    """Builders, horizon, negation and active predicates."""

    def test_boolean_nodes_need_two_children(self):
        with pytest.raises(FormulaError):
            conj(pred(PREDICATES["p"]))

    def test_builder_rejects_reversed_window(self):
        with pytest.raises(IntervalBoundsError):
            globally(3, 1, pred(PREDICATES["p"]))

    def test_degenerate_window_allowed_in_ast(self):
        phi = eventually(0, 0, pred(PREDICATES["p"]))
        assert phi.window_length == 1
        assert horizon(phi) == 0

    def test_horizon_of_predicate(self):
        assert horizon(pred(PREDICATES["p"])) == 0

    def test_horizon_of_unicycle_task(self, unicycle_phi):
        assert horizon(unicycle_phi) == 40

    def test_horizon_of_nested(self):
        phi = globally(0, 10, eventually(0, 5, pred(PREDICATES["p"])))
        assert horizon(phi) == 15

    def test_negate_is_involution(self):
        phi = conj(globally(0, 3, pred(PREDICATES["p"])), disj(pred(PREDICATES["q"]), pred(PREDICATES["r"])))
        assert negate(negate(phi)) == phi
        assert negate(phi).kind == NodeKind.OR

    def test_predicates_lookup(self, unicycle_phi):
        table = predicates(unicycle_phi)
        assert set(table) == {"R1", "R2", "obstacle"}
        assert table["obstacle"].sign == -1

    def test_active_predicates_early(self, unicycle_phi):
        active = {(p.id, polarity) for p, polarity in active_predicates(unicycle_phi, 10)}
        assert active == {("R1", 1), ("obstacle", -1)}

    def test_active_predicates_late(self, unicycle_phi):
        active = {(p.id, polarity) for p, polarity in active_predicates(unicycle_phi, 30)}
        assert active == {("R2", 1)}

    def test_active_predicates_bare_predicate(self):
        active = active_predicates(pred(PREDICATES["p"]), 0)
        assert {p.id for p, _ in active} == {"p"}

    def test_active_predicates_out_of_range(self, unicycle_phi):
        assert active_predicates(unicycle_phi, 41) == set()
        assert active_predicates(unicycle_phi, -1) == set()

    def test_active_predicates_nested_offsets(self):
        phi = eventually(2, 3, globally(1, 2, pred(PREDICATES["p"])))
        assert active_predicates(phi, 2) == set()
        assert {p.id for p, _ in active_predicates(phi, 3)} == {"p"}
        assert {p.id for p, _ in active_predicates(phi, 5)} == {"p"}


class TestFormatFormula:
    """Deterministic printing."""

    def test_unicycle_text(self, unicycle_phi):
        assert format_formula(unicycle_phi) == "F[0,15](R1) & F[15,40](R2) & G[0,20](!obstacle)"

    def test_nested_boolean_parenthesized(self):
        phi = conj(disj(pred(PREDICATES["p"]), pred(PREDICATES["q"])), pred(PREDICATES["r"]))
        assert str(phi) == "(p | q) & r"

    @given(formulas)
    @settings(max_examples=200, deadline=None)
    def test_parse_print_round_trip(self, phi):
        assert parse_formula(format_formula(phi), PREDICATES) == phi

    @given(formulas)
    @settings(max_examples=100, deadline=None)
    def test_active_predicates_come_from_formula(self, phi):
        referenced = {(n.predicate.id, n.predicate.sign) for n in phi.walk() if n.predicate is not None}
        for t in range(horizon(phi) + 1):
            assert {(p.id, polarity) for p, polarity in active_predicates(phi, t)} <= referenced
