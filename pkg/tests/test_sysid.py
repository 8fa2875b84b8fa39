import os
import unittest

import numpy as np

from parabolic.cones import solve_model
from parabolic.errors import InvalidArgument
from parabolic.qcqp import feasibility_residual
from parabolic.sysid import (
    LinearSystem,
    SysidLayout,
    build_sysid_instance,
    build_sysid_relaxation,
    dare_reference,
    decode_solution,
    generate_system,
    identify,
    initial_point,
    recovery_error,
    riccati,
    riccati_residual,
    run_sysid,
    simulate,
    sysid_seeds,
    true_point,
)


class SystemTests(unittest.TestCase):
    def setUp(self):
        self.system = generate_system(4, 3, seed=0)

    def test_riccati_matches_scipy(self):
        np.testing.assert_allclose(self.system.P, dare_reference(self.system), atol=1e-8)
        self.assertLess(riccati_residual(self.system.A, self.system.B, self.system.P), 1e-9)

    def test_closed_loop_is_stable(self):
        self.assertLess(self.system.closed_loop_radius, 1.0)
        self.assertGreater(np.min(np.linalg.eigvalsh(self.system.P)), 0.0)

    def test_generated_systems_meet_the_residual_bound(self):
        systems = [generate_system(4, 3, seed) for seed in range(10)]
        systems.append(generate_system(16, 14, seed=0))
        for system in systems:
            self.assertLess(system.residual, 1e-9)
            self.assertLess(system.closed_loop_radius, 1.0)

    def test_large_solution_converges_in_absolute_terms(self):
        A, B = np.array([[1.1]]), np.array([[0.01]])
        P = riccati(A, B)
        self.assertGreater(P[0, 0], 1000.0)
        reference = dare_reference(LinearSystem(A, B, P, np.zeros((1, 1))))
        np.testing.assert_allclose(P, reference, rtol=1e-9)
        self.assertLess(riccati_residual(A, B, P), 1e-9)

    def test_unstable_draw_is_resampled(self):
        radii = iter([1.5, 0.5])
        original = LinearSystem.closed_loop_radius
        LinearSystem.closed_loop_radius = property(lambda system: next(radii))
        try:
            system = generate_system(2, 1, seed=5)
        finally:
            LinearSystem.closed_loop_radius = original
        self.assertEqual(system.seed, 6)

    def test_generation_is_reproducible(self):
        again = generate_system(4, 3, seed=0)
        np.testing.assert_array_equal(again.A, self.system.A)
        np.testing.assert_array_equal(again.B, self.system.B)

    def test_shapes_are_checked(self):
        with self.assertRaises(InvalidArgument):
            LinearSystem.from_matrices(np.eye(2), np.ones((3, 1)))
        with self.assertRaises(InvalidArgument):
            generate_system(0, 1)


class SeedTests(unittest.TestCase):
    def test_streams_are_distinct_and_reproducible(self):
        system_seed, noise_seed = sysid_seeds(3)
        self.assertNotEqual(system_seed, noise_seed)
        self.assertEqual(sysid_seeds(3), (system_seed, noise_seed))
        self.assertNotEqual(sysid_seeds(4), (system_seed, noise_seed))

    def test_run_draws_system_and_noise_from_separate_streams(self):
        system_seed, noise_seed = sysid_seeds(4)
        result = run_sysid(n=2, m=1, horizon=9, known_stride=2, seed=4, rounds=1)
        self.assertEqual(result.system.seed, system_seed)
        expected = simulate(result.system, horizon=9, known_stride=2, seed=noise_seed)
        np.testing.assert_array_equal(result.trajectory.states, expected.states)
        np.testing.assert_array_equal(result.trajectory.controls, expected.controls)


class TrajectoryTests(unittest.TestCase):
    def setUp(self):
        self.system = generate_system(4, 3, seed=1)
        self.traj = simulate(self.system, seed=1)

    def test_dynamics_hold(self):
        states, controls = self.traj.states, self.traj.controls
        for t in range(self.traj.horizon - 1):
            np.testing.assert_allclose(
                states[t + 1], self.system.A @ states[t] + self.system.B @ controls[t], atol=1e-12
            )

    def test_known_steps(self):
        self.assertEqual(self.traj.known[:3], (0, 4, 8))
        self.assertEqual(len(self.traj.known), 21)
        self.assertEqual(len(self.traj.unknown), 60)

    def test_noise_free_controls_follow_the_gain(self):
        traj = simulate(self.system, horizon=5, sigma=0.0, seed=2)
        np.testing.assert_allclose(traj.controls, traj.states @ self.system.F.T, atol=1e-12)

    def test_arguments_are_validated(self):
        with self.assertRaises(InvalidArgument):
            simulate(self.system, horizon=1)
        with self.assertRaises(InvalidArgument):
            simulate(self.system, known_stride=0)


class InstanceTests(unittest.TestCase):
    def setUp(self):
        self.system = generate_system(4, 3, seed=2)
        self.traj = simulate(self.system, seed=2)

    def test_desk_scale_dimensions(self):
        layout = SysidLayout(self.traj)
        self.assertEqual(layout.rows, 67)
        self.assertEqual(layout.variable_count, 268)
        inst = build_sysid_instance(self.traj)
        self.assertEqual((inst.n, inst.m), (67, 4))
        self.assertEqual(len(inst.equalities), 80 * 4)

    def test_true_point_is_feasible(self):
        inst = build_sysid_instance(self.traj)
        eq, _, ok = feasibility_residual(inst, true_point(self.traj, self.system))
        self.assertTrue(ok)
        self.assertLess(np.max(np.abs(eq)), 1e-10)

    def test_initial_point(self):
        Y = initial_point(self.traj)
        A, B, states = decode_solution(Y, self.traj)
        np.testing.assert_array_equal(A, np.eye(4))
        np.testing.assert_array_equal(B, np.zeros((4, 3)))
        for t in self.traj.unknown:
            np.testing.assert_array_equal(states[t], np.zeros(4))
        np.testing.assert_array_equal(states[4], self.traj.states[4])

    def test_decode_recovers_the_truth(self):
        A, B, states = decode_solution(true_point(self.traj, self.system), self.traj)
        np.testing.assert_array_equal(A, self.system.A)
        np.testing.assert_array_equal(B, self.system.B)
        np.testing.assert_array_equal(states, self.traj.states)
        self.assertEqual(recovery_error(A, B, self.system), 0.0)

    def test_recovery_error_checks_shapes(self):
        with self.assertRaises(InvalidArgument):
            recovery_error(np.eye(3), self.system.B, self.system)


class RelaxationTests(unittest.TestCase):
    def setUp(self):
        self.system = generate_system(4, 3, seed=2)
        self.traj = simulate(self.system, seed=2)
        self.layout = SysidLayout(self.traj)

    def test_one_cone_pair_per_bilinear_term(self):
        model = build_sysid_relaxation(self.traj)
        n, unknown = 4, len(self.traj.unknown)
        self.assertEqual(len(model.cones), 2 * n * unknown + n + unknown)
        self.assertEqual(len(model.cones), 544)
        self.assertEqual(len(model.equality_rows), 20 * n)
        self.assertEqual(len(model.inequality_rows), 0)

    def test_only_diagonal_auxiliaries(self):
        model = build_sysid_relaxation(self.traj)
        entries = model.variables.x_entries
        self.assertTrue(all(i == j for i, j in entries))
        self.assertEqual(entries, [(r, r) for r in range(self.layout.b_offset)])
        self.assertEqual(model.variables.size, 268 + 4 + 60)

    def test_large_regime_row_count(self):
        traj = simulate(generate_system(16, 14, seed=0), horizon=801, seed=0)
        model = build_sysid_relaxation(traj)
        self.assertEqual(len(model.cones), 19816)

    def test_truth_is_feasible_and_tight(self):
        model = build_sysid_relaxation(self.traj)
        Y = true_point(self.traj, self.system)
        self.assertTrue(model.is_feasible(Y, Y @ Y.T, tol=1e-9))
        cones = model.row_residuals(Y, Y @ Y.T)[len(model.equality_rows):]
        self.assertLess(np.max(np.abs(cones)), 1e-9)

    def test_b_is_not_penalized(self):
        anchor = initial_point(self.traj)
        model = build_sysid_relaxation(self.traj, anchor, eta=1.0)
        Y = true_point(self.traj, self.system)
        shifted = Y.copy()
        shifted[self.layout.b_offset:] += 3.0
        self.assertAlmostEqual(
            model.objective_value(Y, Y @ Y.T), model.objective_value(shifted, shifted @ shifted.T),
            places=9,
        )
        b_positions = set(range(self.layout.b_offset * 4, self.layout.rows * 4))
        self.assertFalse(b_positions & set(model.objective.index.tolist()))

    def test_penalty_measures_distance_to_the_anchor_rows(self):
        anchor = initial_point(self.traj)
        model = build_sysid_relaxation(self.traj, anchor, eta=2.0)
        Y = true_point(self.traj, self.system)
        rows = slice(0, self.layout.b_offset)
        expected = 2.0 * np.sum((Y[rows] - anchor[rows]) ** 2)
        self.assertAlmostEqual(model.objective_value(Y, Y @ Y.T), expected, places=9)

    def test_relaxation_of_a_short_run_solves(self):
        traj = simulate(self.system, horizon=9, known_stride=2, seed=3)
        model = build_sysid_relaxation(traj, initial_point(traj), eta=1.0)
        sol = solve_model(model)
        self.assertTrue(sol.optimal)
        point = model.decode(sol.x)
        self.assertGreaterEqual(np.trace(point.X) - np.sum(point.Y * point.Y), -1e-7)

    def test_instance_must_match_the_trajectory(self):
        other = simulate(self.system, horizon=9, seed=3)
        with self.assertRaises(InvalidArgument):
            build_sysid_relaxation(self.traj, inst=build_sysid_instance(other))


class RunTests(unittest.TestCase):
    def test_small_identification_run(self):
        result = run_sysid(n=2, m=1, horizon=9, known_stride=2, seed=4, rounds=3)
        self.assertEqual(len(result.trace.rounds), 3)
        self.assertEqual([r for r, _ in result.errors], [1, 2, 3])
        self.assertTrue(all(np.isfinite(error) for _, error in result.errors))
        self.assertEqual(result.final_error, result.errors[-1][1])

    def test_rounds_are_anchored_at_the_previous_solution(self):
        traj = simulate(generate_system(2, 1, seed=5), horizon=9, known_stride=2, seed=5)
        trace = identify(traj, rounds=2)
        np.testing.assert_array_equal(trace.rounds[0].anchor, initial_point(traj))
        np.testing.assert_array_equal(trace.rounds[1].anchor, trace.rounds[0].Y)

    def test_desk_scale_recovery(self):
        result = run_sysid(seed=0)
        self.assertLess(min(error for _, error in result.errors), 1e-4)
        self.assertLess(result.max_round_time, 1.0)


@unittest.skipUnless(os.environ.get("PARABOLIC_SLOW_TESTS"), "PARABOLIC_SLOW_TESTS is not set")
class RecoveryRateTests(unittest.TestCase):
    def test_recovery_over_fifteen_seeds(self):
        recovered = 0
        for seed in range(15):
            result = run_sysid(seed=seed, rounds=50)
            self.assertLess(result.max_round_time, 1.0)
            if min(error for _, error in result.errors) < 1e-4:
                recovered += 1
        self.assertGreaterEqual(recovered, 14)


if __name__ == "__main__":
    unittest.main()
