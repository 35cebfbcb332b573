"""Tests for system models, arm kinematics, the IK cache and steering."""

import math
import threading

import numpy as np
import pytest
from scipy import stats

from rrt_eta.core.dynamics import (
    ControlBoundsError,
    DoubleIntegrator,
    IkCache,
    InfeasibleStateError,
    PlanarArm,
    Unicycle,
    adaptive_sample,
    build_system,
    connection_segment,
    fk_planar_arm,
    planar_arm_jacobian,
    refine_connection,
    rollout,
    rollout_batch,
    shoot_connection,
    step_double_integrator,
    step_unicycle,
    solve_ik,
    steer,
    steer_exact,
)
from rrt_eta.core.stl_formula import Predicate, eventually, globally, pred


def finite_difference_jacobian(system, q, u, h=1e-6):
    jac = np.zeros((system.state_dim, system.state_dim))
    for i in range(system.state_dim):
        step = np.zeros(system.state_dim)
        step[i] = h
        jac[:, i] = system.state_difference(system.step(q + step, u), system.step(q - step, u)) / (2 * h)
    return jac


@pytest.fixture
def arm():
    return PlanarArm()


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


class TestUnicycle:
    def test_step(self):
        unicycle = Unicycle(dt=1.0)
        nxt = unicycle.step(np.array([1.0, 1.0, math.pi / 2, 0.2, 0.1]), np.array([0.3, -0.5]))
        np.testing.assert_allclose(nxt, [1.0, 1.2, math.pi / 2 + 0.1, 0.3, -0.5], atol=1e-12)

    def test_functional_step_matches_model(self):
        unicycle = Unicycle(dt=0.5)
        q, u = np.array([2.0, 1.0, 0.3, 0.1, -0.2]), np.array([0.2, 0.4])
        np.testing.assert_allclose(step_unicycle(q, u, 0.5), unicycle.step(q, u))

    def test_heading_wraps(self):
        unicycle = Unicycle()
        nxt = unicycle.step(np.array([1.0, 1.0, math.pi - 0.1, 0.0, 0.5]), np.zeros(2))
        assert nxt[2] == pytest.approx(-math.pi + 0.4)

    def test_control_bounds(self):
        unicycle = Unicycle()
        with pytest.raises(ControlBoundsError):
            unicycle.step(np.array([1.0, 1.0, 0.0, 0.0, 0.0]), np.array([0.5, 0.0]))
        with pytest.raises(ControlBoundsError):
            unicycle.step(np.array([1.0, 1.0, 0.0, 0.0, 0.0]), np.array([0.1]))

    def test_jacobian_matches_finite_differences(self):
        unicycle = Unicycle()
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = unicycle.sample_state(rng)
            q[2] = rng.uniform(-2.5, 2.5)
            u = unicycle.sample_control(rng)
            np.testing.assert_allclose(unicycle.jacobian(q, u), finite_difference_jacobian(unicycle, q, u), atol=1e-6)

    def test_distance_wraps_heading(self):
        unicycle = Unicycle()
        a = np.array([1.0, 1.0, math.pi - 0.05, 0.0, 0.0])
        b = np.array([1.0, 1.0, -math.pi + 0.05, 0.0, 0.0])
        assert unicycle.distance(a, b) == pytest.approx(0.3 * 0.1)

    def test_require_in_bounds(self):
        unicycle = Unicycle()
        with pytest.raises(InfeasibleStateError):
            unicycle.require_in_bounds([5.0, 1.0, 0.0, 0.0, 0.0])
        with pytest.raises(InfeasibleStateError):
            unicycle.require_in_bounds([1.0, 1.0, 0.0])


class TestDoubleIntegrator:
    def test_step(self):
        system = DoubleIntegrator(dt=0.5)
        nxt = system.step(np.array([1.0, 2.0, 1.0, -1.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(nxt, [1.5, 1.5, 1.5, -1.0])
        np.testing.assert_allclose(step_double_integrator([1.0, 2.0, 1.0, -1.0], [1.0, 0.0], 0.5), nxt)

    def test_jacobian_matches_finite_differences(self):
        system = DoubleIntegrator()
        rng = np.random.default_rng(1)
        q, u = system.sample_state(rng), system.sample_control(rng)
        np.testing.assert_allclose(system.jacobian(q, u), finite_difference_jacobian(system, q, u), atol=1e-6)

    def test_lipschitz_bound(self):
        system = DoubleIntegrator()
        rng = np.random.default_rng(2)
        for _ in range(200):
            q1, q2 = system.sample_state(rng), system.sample_state(rng)
            u1, u2 = system.sample_control(rng), system.sample_control(rng)
            lhs = np.linalg.norm(system.step(q1, u1) - system.step(q2, u2))
            rhs = system.lipschitz * np.linalg.norm(np.concatenate([q1 - q2, u1 - u2]))
            assert lhs <= rhs + 1e-12

    def test_sample_state_is_uniform(self):
        system = DoubleIntegrator()
        rng = np.random.default_rng(3)
        samples = np.array([system.sample_state(rng) for _ in range(2000)])
        assert stats.kstest(samples[:, 0], "uniform", args=(0.0, 10.0)).pvalue > 0.001
        assert stats.kstest(samples[:, 3], "uniform", args=(-2.0, 4.0)).pvalue > 0.001

    def test_connect_seed_is_exact_for_two_steps(self):
        system = DoubleIntegrator()
        start = np.array([1.0, 1.0, 0.0, 0.0])
        goal = np.array([1.125, 1.0, 0.5, 0.0])
        controls = system.connect_seed(start, goal, 2)
        states = rollout(start, controls, system)
        np.testing.assert_allclose(states[-1], goal, atol=1e-9)


# ---------------------------------------------------------------------------
# Planar arm
# ---------------------------------------------------------------------------


class TestPlanarArm:
    def test_forward_kinematics(self):
        np.testing.assert_allclose(fk_planar_arm([math.pi / 2, 0.0], [1.0, 1.0]), [0.0, 2.0, math.pi / 2], atol=1e-12)
        np.testing.assert_allclose(fk_planar_arm([0.0, math.pi / 2], [1.0, 1.0]), [1.0, 1.0, math.pi / 2], atol=1e-12)

    def test_fk_joint_count_checked(self):
        with pytest.raises(ValueError):
            fk_planar_arm([0.0, 0.0], [1.0, 1.0, 1.0])

    def test_kinematic_jacobian(self):
        links = [1.0, 0.8, 0.6]
        q = np.array([0.3, -0.7, 1.1])
        numeric = np.zeros((3, 3))
        for i in range(3):
            step = np.zeros(3)
            step[i] = 1e-6
            numeric[:, i] = (fk_planar_arm(q + step, links) - fk_planar_arm(q - step, links)) / 2e-6
        np.testing.assert_allclose(planar_arm_jacobian(q, links), numeric, atol=1e-6)

    def test_step_keeps_workspace_consistent(self, arm):
        q = arm.augment([0.0, 0.5, 0.5])
        nxt = arm.step(q, np.array([0.2, -0.4, 1.0]))
        np.testing.assert_allclose(nxt[3:], fk_planar_arm(nxt[:3], arm.links))
        np.testing.assert_allclose(nxt[:3], [0.1, 0.3, 1.0])

    def test_jacobian_matches_finite_differences(self, arm):
        q = arm.augment([0.2, -0.3, 0.8])
        u = np.array([0.1, 0.2, -0.3])
        np.testing.assert_allclose(arm.jacobian(q, u), finite_difference_jacobian(arm, q, u), atol=1e-5)

    def test_with_region_on_joints_reaugments(self, arm):
        rng = np.random.default_rng(0)
        hint = Predicate.box("J", [0], [0.4], [0.6]).region_hint
        state = arm.with_region(arm.sample_state(rng), hint, rng)
        np.testing.assert_allclose(state[3:], fk_planar_arm(state[:3], arm.links))


class TestInverseKinematics:
    def test_converges_to_position(self):
        links = [1.0, 0.8, 0.6]
        rng = np.random.default_rng(4)
        for _ in range(20):
            target = fk_planar_arm(rng.uniform(-1.0, 1.0, size=3), links)[:2]
            q = solve_ik(target, np.zeros(3) + 0.1, links)
            assert q is not None
            np.testing.assert_allclose(fk_planar_arm(q, links)[:2], target, atol=1e-4)

    def test_converges_to_pose(self):
        links = [1.0, 0.8, 0.6]
        target = fk_planar_arm([0.4, 0.6, -0.3], links)
        q = solve_ik(target, [0.2, 0.2, 0.2], links)
        assert q is not None
        assert np.linalg.norm(fk_planar_arm(q, links) - target) <= 1e-4

    def test_unreachable(self):
        assert solve_ik([3.0, 0.0], np.zeros(3), [1.0, 0.8, 0.6]) is None
        assert solve_ik([0.1, 0.0], np.zeros(2), [1.0, 0.3]) is None

    def test_joint_limits_respected(self):
        limits = ([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
        links = [1.0, 0.8, 0.6]
        q = solve_ik(fk_planar_arm([0.2, 0.3, -0.1], links)[:2], np.zeros(3), links, joint_limits=limits)
        assert q is not None
        assert np.all(q >= -0.5) and np.all(q <= 0.5)


class TestIkCache:
    def test_key_and_center(self):
        cache = IkCache()
        key = cache.key([1.234, -0.005, math.radians(12.0)])
        assert key == (123, -1, 2)
        np.testing.assert_allclose(cache.cell_center(key), [1.235, -0.005, math.radians(12.5)])

    def test_hit_miss_counting(self):
        cache = IkCache()
        assert cache.get((1, 2)) is None
        cache.put((1, 2), np.array([0.1, 0.2, 0.3]))
        np.testing.assert_allclose(cache.get((1, 2)), [0.1, 0.2, 0.3])
        assert cache.get_statistics() == {"entries": 1, "hits": 1, "misses": 1, "hit_rate": 0.5}

    def test_first_write_wins(self):
        cache = IkCache()
        cache.put((0, 0), np.zeros(3))
        cache.put((0, 0), np.ones(3))
        np.testing.assert_allclose(cache.get((0, 0)), np.zeros(3))

    def test_concurrent_writes(self):
        cache = IkCache()

        def writer(offset):
            for i in range(200):
                cache.put((i, offset % 2), np.full(3, offset))

        threads = [threading.Thread(target=writer, args=(k,)) for k in range(4)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert len(cache) == 400

    def test_concurrent_lookups_count_exactly(self):
        cache = IkCache()
        cache.put((0, 0), np.zeros(3))
        barrier = threading.Barrier(8)

        def reader(offset):
            barrier.wait()
            for i in range(500):
                cache.get((0, 0))
                cache.get((offset, i + 1))

        threads = [threading.Thread(target=reader, args=(k,)) for k in range(8)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        assert cache.hits == 8 * 500
        assert cache.misses == 8 * 500
        assert cache.hit_rate == 0.5

    def test_adaptive_sampling_reuses_solutions(self, arm):
        target = Predicate.box("A", [3, 4], [1.2, 0.8], [1.26, 0.86], scale=0.02)
        phi = eventually(0, 5, pred(target))
        cache = IkCache()
        rng = np.random.default_rng(5)
        samples = [adaptive_sample(phi, 2, cache, rng, arm) for _ in range(500)]
        assert all(s is not None for s in samples)
        assert cache.hit_rate >= 0.8
        assert cache.consistency_violations(arm.links) == 0
        for s in samples:
            np.testing.assert_allclose(s[3:], fk_planar_arm(s[:3], arm.links))
            assert 1.2 - 0.01 <= s[3] <= 1.26 + 0.01

    def test_adaptive_sampling_without_workspace_region(self, arm):
        phi = globally(0, 5, pred(Predicate.box("J", [0], [-1.0], [1.0])))
        rng = np.random.default_rng(6)
        cache = IkCache()
        state = adaptive_sample(phi, 1, cache, rng, arm)
        assert state is not None
        assert -1.0 <= state[0] <= 1.0
        assert len(cache) == 0

    def test_adaptive_sampling_gives_up(self, arm):
        unreachable = Predicate.box("far", [3, 4], [2.35, 2.35], [2.39, 2.39])
        phi = eventually(0, 3, pred(unreachable))
        assert adaptive_sample(phi, 1, IkCache(), np.random.default_rng(0), arm, max_retries=5) is None


# ---------------------------------------------------------------------------
# Steering
# ---------------------------------------------------------------------------


class TestSteering:
    def test_steer_constant_control(self):
        system = DoubleIntegrator()
        final = steer(np.array([1.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0]), 2, system)
        np.testing.assert_allclose(final, [1.25, 1.0, 1.0, 0.0])

    def test_steer_zero_steps(self):
        q = np.array([1.0, 1.0, 0.0, 0.0])
        np.testing.assert_allclose(steer(q, np.zeros(2), 0, DoubleIntegrator()), q)

    def test_rollout_leaving_bounds(self):
        system = DoubleIntegrator()
        assert rollout(np.array([9.9, 5.0, 2.0, 0.0]), np.zeros((3, 2)), system) is None

    def test_exact_connection_double_integrator(self):
        system = DoubleIntegrator()
        start = np.array([1.0, 1.0, 0.0, 0.0])
        goal = np.array([1.125, 1.0, 0.5, 0.0])
        segment = steer_exact(start, goal, system, np.random.default_rng(0), steps=2)
        assert segment is not None
        assert len(segment) == 2
        assert np.linalg.norm(segment.final_state - goal) <= 0.05

    def test_exact_connection_searches_horizons(self):
        system = DoubleIntegrator()
        start = np.array([1.0, 1.0, 0.0, 0.0])
        goal = np.array([1.125, 1.0, 0.5, 0.0])
        segment = steer_exact(start, goal, system, np.random.default_rng(0))
        assert segment is not None
        assert 1 <= len(segment) <= 5

    def test_lateral_offset_is_infeasible_in_one_step(self):
        unicycle = Unicycle()
        start = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
        goal = np.array([1.0, 1.1, 0.0, 0.0, 0.0])
        assert steer_exact(start, goal, unicycle, np.random.default_rng(0), max_steps=1) is None

    def test_same_state_needs_no_controls(self):
        q = np.array([1.0, 1.0, 0.0, 0.0])
        segment = steer_exact(q, q, DoubleIntegrator())
        assert segment is not None
        assert len(segment) == 0
        assert segment.final_state is None

    def test_arm_connection(self, arm):
        start = arm.augment([0.0, 0.5, 0.5])
        goal = arm.augment([0.3, 0.4, 0.9])
        segment = steer_exact(start, goal, arm, np.random.default_rng(0), steps=2)
        assert segment is not None
        np.testing.assert_allclose(segment.final_state[:3], [0.3, 0.4, 0.9], atol=1e-9)

    @pytest.mark.parametrize("system", [Unicycle(), DoubleIntegrator(), PlanarArm()], ids=lambda s: s.name)
    def test_batch_rollout_matches_rollout(self, system):
        rng = np.random.default_rng(11)
        q = system.sample_state(rng)
        if isinstance(system, PlanarArm):
            q = system.augment(q[: system.n_joints])
        controls = rng.uniform(system.control_lower, system.control_upper, size=(12, system.control_dim))
        states, feasible = rollout_batch(q, controls, 3, system)
        assert states.shape == (12, 3, system.state_dim)
        for k, u in enumerate(controls):
            single = rollout(q, np.tile(u, (3, 1)), system)
            assert feasible[k] == (single is not None)
            if single is not None:
                np.testing.assert_allclose(states[k], single, atol=1e-12)

    def test_batch_step_checks_controls(self):
        system = Unicycle()
        with pytest.raises(ControlBoundsError):
            system.step_batch(np.zeros((1, 5)) + 1.0, np.array([[1.0, 0.0]]))

    def test_shooting_uses_closed_form_seed(self):
        system = DoubleIntegrator()
        start = np.array([1.0, 1.0, 0.0, 0.0])
        goal = np.array([1.125, 1.0, 0.5, 0.0])
        controls, error = shoot_connection(start, goal, system, np.random.default_rng(0), steps=2, shots=4)
        assert controls.shape == (2, 2)
        assert error <= 1e-9

    def test_refinement_never_worsens(self):
        unicycle = Unicycle()
        start = np.array([1.0, 1.0, 0.0, 0.2, 0.0])
        goal = np.array([1.5, 1.2, 0.4, 0.2, 0.3])
        controls, error = shoot_connection(start, goal, unicycle, np.random.default_rng(3), steps=3, shots=8)
        refined, refined_error = refine_connection(start, goal, controls, error, unicycle)
        assert refined.shape == controls.shape
        assert refined_error <= error

    def test_connection_segment_respects_epsilon(self):
        system = DoubleIntegrator()
        start = np.array([1.0, 1.0, 0.0, 0.0])
        controls = np.zeros((2, 2))
        assert connection_segment(start, controls, 0.2, system, epsilon=0.05) is None
        segment = connection_segment(start, controls, 0.0, system, epsilon=0.05)
        assert segment is not None
        np.testing.assert_allclose(segment.final_state, start)


class TestBuildSystem:
    def test_builds_each_system(self):
        assert isinstance(build_system({"system": "unicycle"}), Unicycle)
        integrator = build_system({"system": "double_integrator", "dt": 1.0, "dim": 3})
        assert integrator.state_dim == 6
        assert integrator.dt == 1.0
        arm = build_system({"type": "planar_arm", "links": [1.0, 1.0], "qdot_max": 0.5})
        assert isinstance(arm, PlanarArm)
        assert arm.state_dim == 5

    def test_bounds_forwarded(self):
        unicycle = build_system({"system": "unicycle", "bounds": {"x": [0, 8], "v_max": 0.5}})
        assert unicycle.state_upper[0] == 8
        assert unicycle.control_upper[0] == 0.5

    def test_unknown_system(self):
        with pytest.raises(ValueError):
            build_system({"system": "quadrotor"})
