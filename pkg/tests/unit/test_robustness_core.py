"""Tests for AGM / min-max aggregation and offline and interval robustness."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rrt_eta.core.robustness_core import (
    IncompleteTraceError,
    RobustnessDomainError,
    RobustnessInterval,
    Semantics,
    Trace,
    agm_and,
    agm_extend,
    agm_or,
    agm_robustness,
    evaluate,
    interval_robustness,
    minmax_and,
    minmax_or,
    minmax_robustness,
    predicate_robustness,
    subformula_robustness,
)
from rrt_eta.core.stl_formula import Predicate, conj, eventually, globally, horizon, pred
from tests.unit.formula_factory import PREDICATES, random_formula, random_states, robustness_values

value_lists = st.lists(robustness_values, min_size=1, max_size=8)


class TestAggregators:
    """AGM and min-max aggregators on plain values."""

    def test_or_mixed_signs(self):
        assert agm_or([-0.5, 0.5]) == pytest.approx(0.25)

    def test_and_mixed_signs(self):
        assert agm_and([0.5, -0.5]) == pytest.approx(-0.25)

    def test_and_all_satisfied_is_geometric(self):
        assert agm_and([0.1, 0.9]) == pytest.approx(math.sqrt(1.1 * 1.9) - 1.0)

    def test_or_all_violated_is_geometric(self):
        assert agm_or([-0.1, -0.9]) == pytest.approx(1.0 - math.sqrt(1.1 * 1.9))

    def test_minmax(self):
        assert minmax_and([0.3, -0.2, 0.9]) == -0.2
        assert minmax_or([0.3, -0.2, 0.9]) == 0.9

    def test_extremes(self):
        assert agm_and([1.0, 1.0]) == pytest.approx(1.0)
        assert agm_or([-1.0, -1.0]) == pytest.approx(-1.0)
        assert agm_and([-1.0, 1.0]) == pytest.approx(-0.5)

    @pytest.mark.parametrize("values", [[], [1.5], [0.2, -1.2], [float("nan")]])
    def test_domain_errors(self, values):
        with pytest.raises(RobustnessDomainError):
            agm_and(values)

    @given(value_lists)
    def test_results_stay_in_range(self, values):
        for agg in (agm_and, agm_or):
            assert -1.0 <= agg(values) <= 1.0

    @given(robustness_values, st.integers(1, 8))
    def test_idempotent(self, value, n):
        assert agm_and([value] * n) == pytest.approx(value, abs=1e-12)
        assert agm_or([value] * n) == pytest.approx(value, abs=1e-12)

    @given(value_lists, st.randoms(use_true_random=False))
    def test_permutation_invariant(self, values, random):
        shuffled = list(values)
        random.shuffle(shuffled)
        assert agm_and(shuffled) == pytest.approx(agm_and(values), abs=1e-12)
        assert agm_or(shuffled) == pytest.approx(agm_or(values), abs=1e-12)

    @given(value_lists, st.data())
    def test_monotone(self, values, data):
        index = data.draw(st.integers(0, len(values) - 1))
        raised = list(values)
        raised[index] = data.draw(st.floats(min_value=values[index], max_value=1.0))
        assert agm_and(raised) >= agm_and(values) - 1e-12
        assert agm_or(raised) >= agm_or(values) - 1e-12

    @given(value_lists)
    def test_sign_agrees_with_minmax(self, values):
        assert (agm_and(values) > 0) == (minmax_and(values) > 0)
        assert (agm_and(values) < 0) == (minmax_and(values) < 0)
        assert (agm_or(values) > 0) == (minmax_or(values) > 0)
        assert (agm_or(values) < 0) == (minmax_or(values) < 0)

    @given(value_lists, robustness_values, st.integers(0, 5), st.booleans())
    def test_extend_matches_batch(self, prior, value, k, conjunctive):
        agg = agm_and if conjunctive else agm_or
        extended = agm_extend(agg(prior), len(prior), value, k, conjunctive)
        assert extended == pytest.approx(agg(prior + [value] * k), abs=1e-9)

    def test_extend_from_nothing(self):
        assert agm_extend(0.0, 0, -0.4, 3, conjunctive=True) == -0.4

    def test_extend_rejects_negative_counts(self):
        with pytest.raises(RobustnessDomainError):
            agm_extend(0.1, 2, 0.2, -1, conjunctive=False)


class TestRobustnessInterval:
    def test_rejects_inverted_bounds(self):
        with pytest.raises(RobustnessDomainError):
            RobustnessInterval(0.5, 0.2)

    def test_rejects_out_of_domain(self):
        with pytest.raises(RobustnessDomainError):
            RobustnessInterval(-0.5, 1.5)

    def test_queries(self):
        interval = RobustnessInterval(-0.2, 0.6)
        assert interval.width == pytest.approx(0.8)
        assert interval.midpoint == pytest.approx(0.2)
        assert interval.contains(0.0)
        assert RobustnessInterval.singleton(0.1).within(interval)
        assert not interval.within(RobustnessInterval.singleton(0.1))
        assert RobustnessInterval.singleton(0.3).is_singleton


class TestOfflineRobustness:
    """Full-trace evaluation."""

    def test_predicate_normalization(self):
        mu = Predicate.affine("x", [1.0], scale=0.5)
        assert predicate_robustness([0.25], mu) == pytest.approx(0.25)
        assert predicate_robustness([5.0], mu) == 1.0
        assert predicate_robustness([-5.0], mu) == -1.0

    def test_box_center_maps_to_one(self):
        box = Predicate.box("R1", [0, 1], [2.0, 1.0], [3.0, 2.0], scale=0.25)
        assert predicate_robustness([2.5, 1.5], box) == pytest.approx(1.0)

    def test_ball_center_maps_to_one(self):
        ball = Predicate.ball("goal", [0, 1], [5.0, 5.0], 1.0)
        assert predicate_robustness([5.0, 5.0], ball) == pytest.approx(1.0)

    def test_eventually_and_globally(self):
        x = Predicate.affine("x", [1.0], scale=0.5)
        trace = Trace([[-0.5], [0.25], [0.5]])
        assert evaluate(trace, eventually(0, 2, pred(x))) == pytest.approx(agm_or([-0.5, 0.25, 0.5]))
        assert evaluate(trace, globally(0, 2, pred(x))) == pytest.approx(agm_and([-0.5, 0.25, 0.5]))
        assert minmax_robustness(trace, eventually(0, 2, pred(x))) == pytest.approx(0.5)

    def test_evaluation_from_later_step(self):
        x = Predicate.affine("x", [1.0], scale=0.5)
        trace = Trace([[-0.5], [0.25], [0.5]])
        assert evaluate(trace, eventually(0, 1, pred(x)), t=1) == pytest.approx(agm_or([0.25, 0.5]))

    def test_incomplete_trace(self):
        phi = globally(0, 5, pred(PREDICATES["p"]))
        with pytest.raises(IncompleteTraceError):
            agm_robustness(Trace(np.zeros((3, 2))), phi)

    def test_subformula_robustness_keys(self):
        phi = conj(pred(PREDICATES["p"]), eventually(0, 1, pred(PREDICATES["q"])))
        values = subformula_robustness(Trace([[0.9, 0.2], [0.9, 0.8]]), phi)
        assert set(values) == {n.node_id for n in phi.walk()}
        assert values[0] == pytest.approx(agm_robustness(Trace([[0.9, 0.2], [0.9, 0.8]]), phi))

    def test_empty_trace_rejected(self):
        with pytest.raises(ValueError):
            Trace(np.zeros((0, 2)))


class TestIntervalRobustness:
    """Batch intervals over partial traces."""

    def test_nothing_observed_in_window(self):
        phi = eventually(2, 4, pred(PREDICATES["p"]))
        interval = interval_robustness(Trace([[0.9, 0.9]]), phi)
        assert interval.as_tuple() == (-1.0, 1.0)

    def test_complete_trace_gives_singleton(self):
        rng = np.random.default_rng(3)
        phi = globally(0, 3, pred(PREDICATES["r"]))
        states = random_states(rng, 4)
        interval = interval_robustness(Trace(states), phi)
        assert interval.is_singleton
        assert interval.lo == pytest.approx(agm_robustness(Trace(states), phi))

    def test_t_prime_outside_prefix(self):
        with pytest.raises(IncompleteTraceError):
            interval_robustness(Trace(np.zeros((2, 2))), pred(PREDICATES["p"]), t_prime=5)

    @pytest.mark.parametrize("semantics", [Semantics.AGM, Semantics.MINMAX])
    def test_sound_and_shrinking(self, semantics):
        rng = np.random.default_rng(11)
        for _ in range(60):
            phi = random_formula(rng)
            states = random_states(rng, horizon(phi) + 1)
            final = evaluate(Trace(states), phi, semantics)
            previous = RobustnessInterval.full()
            for t_prime in range(horizon(phi) + 1):
                interval = interval_robustness(Trace(states[: t_prime + 1]), phi, semantics=semantics)
                assert interval.contains(final, tol=1e-9)
                assert interval.within(previous, tol=1e-9)
                previous = interval
            assert previous.lo == pytest.approx(final, abs=1e-9)
            assert previous.hi == pytest.approx(final, abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_agm_and_minmax_intervals_agree_on_sign(self, seed):
        rng = np.random.default_rng(seed)
        phi = random_formula(rng)
        states = random_states(rng, horizon(phi) + 1)
        agm = agm_robustness(Trace(states), phi)
        minmax = minmax_robustness(Trace(states), phi)
        assume(abs(minmax) > 1e-12)
        assert (agm > 0) == (minmax > 0)
