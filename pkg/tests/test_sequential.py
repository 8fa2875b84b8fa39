import os
import unittest

import numpy as np

from local_search import multistart_minimum
from parabolic.cones import DUAL_TOL, INACCURATE, OPTIMAL, SolverSettings
from parabolic.errors import GapUndefined, InvalidArgument
from parabolic.qcqp import QcqpInstance, QuadForm, eval_q, instance_through_point
from parabolic.relaxation import FULL, SPARSITY, select_pairs
from parabolic.sequential import (
    CONVERGED,
    FIXED,
    AcceleratedSchedule,
    StopCriteria,
    auto_eta,
    compute_gaps,
    eta_grid,
    lower_bound,
    run_accelerated,
    run_sequential,
)
from parabolic.theory import analyze, kkt_residual

TIGHT = SolverSettings(tol_gap=1e-10)


def _unit_circle_1d():
    # minimize x subject to x^2 = 1
    return QcqpInstance(QuadForm.linear(np.array([[0.5]])), [QuadForm(np.eye(1), c=-1.0)])


def _concave_in_box():
    # minimize -x^2 subject to x^2 - 4 <= 0
    return QcqpInstance(QuadForm(-np.eye(1)), inequalities=[QuadForm(np.eye(1), c=-4.0)])


def _box(n):
    return -2.0 * np.ones(n), 2.0 * np.ones(n)


def _boxed_instances(rng, count):
    # n in 2..6 with 2..6 constraints, feasible at the returned point
    for index in range(count):
        n = 2 + index % 5
        total = 2 + (index // 5) % 5
        n_eq = min(index % 3, n - 1)
        Y = rng.uniform(-1.0, 1.0, size=(n, 1))
        base = instance_through_point(
            rng, Y, n_eq=n_eq, n_ineq=total - n_eq, n_active=index % 2
        )
        yield QcqpInstance(
            base.objective, base.equalities, base.inequalities, bounds=_box(n)
        ), Y


def _feasible_starts(seed, count):
    rng = np.random.default_rng(seed)
    for index in range(count):
        Y0 = rng.uniform(-1.0, 1.0, size=(3 + index % 2, 1))
        yield instance_through_point(rng, Y0, n_eq=1, n_ineq=2, n_active=1), Y0


def _banded_form(rng, Y, margin, offset):
    n = Y.shape[0]
    band = rng.standard_normal(n - offset)
    A = np.diag(rng.standard_normal(n)) + np.diag(band, offset) + np.diag(band, -offset)
    form = QuadForm(A, rng.standard_normal((n, 1)))
    return QuadForm(form.A, form.B, -eval_q(form, Y) - margin)


class GapTests(unittest.TestCase):
    def test_exact_bound_has_zero_gap(self):
        self.assertEqual(compute_gaps(-3.5, None, -3.5), (0.0, None))

    def test_lower_bound_gap(self):
        lb, ub = compute_gaps(-76.525, None, -32.148)
        self.assertAlmostEqual(lb, 138.04, places=2)
        self.assertIsNone(ub)

    def test_upper_bound_gap(self):
        _, ub = compute_gaps(None, -10.942, -10.948)
        self.assertEqual(round(ub, 2), 0.05)
        self.assertAlmostEqual(ub, 0.0548, places=4)

    def test_zero_reference_is_undefined(self):
        with self.assertRaises(GapUndefined):
            compute_gaps(1.0, 1.0, 0.0)


class SettingsTests(unittest.TestCase):
    def test_stop_criteria_are_validated(self):
        with self.assertRaises(InvalidArgument):
            StopCriteria(rel_tol=0.0)
        with self.assertRaises(InvalidArgument):
            StopCriteria(max_rounds=0)

    def test_schedule_is_validated(self):
        with self.assertRaises(InvalidArgument):
            AcceleratedSchedule(lam=1.0)
        with self.assertRaises(InvalidArgument):
            AcceleratedSchedule(lam_rule="linear")
        with self.assertRaises(InvalidArgument):
            AcceleratedSchedule(eta_rule="adaptive")

    def test_eta_grid(self):
        grid = eta_grid()
        self.assertEqual(len(grid), 3 * 19)
        np.testing.assert_allclose(grid[:3], [1e-6, 2e-6, 5e-6])
        self.assertEqual(grid[-1], 5e12)
        self.assertEqual(grid, sorted(grid))


class SequentialTests(unittest.TestCase):
    def test_kkt_point_is_a_fixed_point(self):
        trace = run_sequential(_unit_circle_1d(), [-1.0], 1.0)
        self.assertEqual(trace.status, CONVERGED)
        self.assertEqual(trace.i_stop, 1)
        self.assertAlmostEqual(trace.rounds[0].Y.item(), -1.0, places=6)

    def test_moderate_penalty_reaches_the_minimizer(self):
        inst = _unit_circle_1d()
        trace = run_sequential(inst, [0.9], 0.25)
        self.assertEqual(trace.i_feas, 1)
        self.assertEqual(trace.i_stop, 2)
        self.assertAlmostEqual(trace.last.Y.item(), -1.0, places=6)
        self.assertAlmostEqual(trace.upper_bound, -1.0, places=6)
        self.assertLess(kkt_residual(inst, trace.last.Y, trace.last.tau, [1]), 1e-5)

    def test_strong_penalty_keeps_the_nearby_branch(self):
        trace = run_sequential(_unit_circle_1d(), [0.9], 5.0)
        self.assertEqual(trace.i_stop, 2)
        self.assertAlmostEqual(trace.last.Y.item(), 1.0, places=6)

    def test_tight_rounds_descend_with_bounded_steps(self):
        checked = 0
        for inst, Y0 in _feasible_starts(41, 30):
            eta = analyze(inst, Y0).eta_thm1
            trace = run_sequential(inst, Y0, eta, StopCriteria(max_rounds=6), settings=TIGHT)
            previous_Y, previous_q = Y0, eval_q(inst.objective, Y0)
            for record in trace.rounds:
                if not (record.tight(trace.stop.rank_tol) and record.feasible):
                    break
                self.assertLessEqual(record.objective, previous_q + 1e-8)
                step = float(np.sum((record.Y - previous_Y) ** 2))
                self.assertLessEqual(step, (previous_q - record.objective) / eta + 1e-8)
                previous_Y, previous_q = record.Y, record.objective
                checked += 1
        self.assertGreaterEqual(checked, 30)

    def test_solver_failure_truncates_the_run(self):
        inst = QcqpInstance(QuadForm(np.eye(1)), inequalities=[QuadForm(np.eye(1), c=1.0)])
        with self.assertLogs("parabolic.sequential", level="WARNING"):
            trace = run_sequential(inst, [0.0], 1.0)
        self.assertEqual(len(trace.rounds), 1)
        self.assertEqual(trace.i_stop, 1)
        self.assertNotEqual(trace.status, CONVERGED)
        self.assertIsNone(trace.upper_bound)

    def test_penalty_must_be_positive(self):
        with self.assertRaises(InvalidArgument):
            run_sequential(_unit_circle_1d(), [0.9], -1.0)


class AcceleratedTests(unittest.TestCase):
    def test_zero_blend_matches_sequential(self):
        inst = _unit_circle_1d()
        stop = StopCriteria(max_rounds=4, early_stop=False)
        plain = run_sequential(inst, [0.9], 0.25, stop)
        blended = run_accelerated(
            inst, [0.9], 0.25, AcceleratedSchedule(lam_rule=FIXED, lam=0.0), stop
        )
        self.assertEqual(len(plain.rounds), len(blended.rounds))
        for a, b in zip(plain.rounds, blended.rounds):
            np.testing.assert_allclose(a.Y, b.Y, atol=1e-12)
            self.assertEqual(a.rank_gap, b.rank_gap)

    def test_fixed_blend_anchors(self):
        trace = run_accelerated(
            _unit_circle_1d(), [0.9], 5.0, AcceleratedSchedule(lam_rule=FIXED, lam=0.5),
            StopCriteria(max_rounds=4, early_stop=False),
        )
        np.testing.assert_allclose(trace.rounds[0].anchor, [[0.9]])
        self.assertEqual(trace.rounds[0].lam, 1.0)
        for previous, record in zip(trace.rounds, trace.rounds[1:]):
            self.assertEqual(record.lam, 0.5)
            np.testing.assert_allclose(record.anchor, 0.5 * previous.Y + 0.5 * previous.anchor)

    def test_backtracking_keeps_rounds_tight(self):
        rng = np.random.default_rng(43)
        for _ in range(5):
            Y0 = rng.uniform(-1.0, 1.0, size=(3, 1))
            inst = instance_through_point(rng, Y0, n_eq=0, n_ineq=2, n_active=1)
            trace = run_accelerated(inst, Y0, 50.0, stop=StopCriteria(max_rounds=3))
            for record in trace.rounds:
                self.assertIn(record.status, (OPTIMAL, INACCURATE))
                self.assertGreaterEqual(record.lam, 0.0)
                self.assertLess(record.lam, 1.0 + 1e-12)


class EtaSearchTests(unittest.TestCase):
    def test_smallest_tight_grid_value(self):
        self.assertEqual(auto_eta(_concave_in_box(), [0.0], rounds_probe=3), 2.0)

    def test_tightness_round_count_is_validated(self):
        with self.assertRaises(InvalidArgument):
            auto_eta(_concave_in_box(), [0.0], rounds_probe=0)


class LowerBoundTests(unittest.TestCase):
    def test_box_cuts_bound_a_concave_objective(self):
        inst = QcqpInstance(
            QuadForm(-np.eye(1)), bounds=([-1.0], [2.0]), reference_objective=-4.0
        )
        plain = lower_bound(inst)
        self.assertIsNone(plain.lower_bound)
        cut = lower_bound(inst, box_cuts=True, baseline=True)
        self.assertEqual(cut.status, "optimal")
        self.assertAlmostEqual(cut.lower_bound, -4.0, places=5)
        self.assertAlmostEqual(cut.gap_pct, 0.0, places=3)
        self.assertAlmostEqual(cut.baseline_bound, -4.0, places=5)
        self.assertLess(cut.rank_gap, 1e-5)


class BoundSoundnessTests(unittest.TestCase):
    def test_bound_never_exceeds_the_local_search_optimum(self):
        rng = np.random.default_rng(101)
        for inst, Y in _boxed_instances(rng, 200):
            record = lower_bound(inst, policy=FULL, box_cuts=True)
            self.assertEqual(record.status, OPTIMAL)
            starts = [Y] + [rng.uniform(-2.0, 2.0, size=Y.shape) for _ in range(9)]
            optimum = multistart_minimum(inst.bounded(), starts)
            self.assertLessEqual(record.lower_bound, optimum + 1e-6)

    def test_full_pairs_never_weaken_the_bound(self):
        rng = np.random.default_rng(103)
        for _ in range(20):
            Y = rng.uniform(-1.0, 1.0, size=(5, 1))
            inst = QcqpInstance(
                _banded_form(rng, Y, 0.0, 2),
                [_banded_form(rng, Y, 0.0, 1)],
                [_banded_form(rng, Y, rng.uniform(0.5, 1.0), 1)],
                bounds=_box(5),
            )
            self.assertLess(len(select_pairs(inst, SPARSITY)), len(select_pairs(inst, FULL)))
            sparse = lower_bound(inst, policy=SPARSITY, box_cuts=True, settings=TIGHT)
            full = lower_bound(inst, policy=FULL, box_cuts=True, settings=TIGHT)
            self.assertEqual((sparse.status, full.status), (OPTIMAL, OPTIMAL))
            self.assertGreaterEqual(full.lower_bound, sparse.lower_bound - 1e-8)


@unittest.skipUnless(os.environ.get("PARABOLIC_SLOW_TESTS"), "PARABOLIC_SLOW_TESTS is not set")
class TerminalKktTests(unittest.TestCase):
    def test_runs_end_at_kkt_points(self):
        for inst, Y0 in _feasible_starts(47, 30):
            eta = auto_eta(inst, Y0, rounds_probe=3, settings=TIGHT)
            trace = run_sequential(
                inst, Y0, eta, StopCriteria(rel_tol=1e-12, max_rounds=400), settings=TIGHT
            )
            last = trace.last
            self.assertEqual(last.status, OPTIMAL)
            binding = [
                k for k in inst.constraint_indices
                if inst.is_equality(k) or abs(last.tau.get(k, 0.0)) > DUAL_TOL
            ]
            self.assertLess(kkt_residual(inst, last.Y, last.tau, binding), 1e-5)


if __name__ == "__main__":
    unittest.main()
