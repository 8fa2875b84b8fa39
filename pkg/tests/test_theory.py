import unittest

import numpy as np

from local_search import multistart_distance
from parabolic.cones import OPTIMAL, SolverSettings, extract_duals, solve_model
from parabolic.errors import InvalidArgument
from parabolic.qcqp import (
    QcqpInstance,
    QuadForm,
    eval_q,
    grad_q,
    instance_through_point,
    random_form,
    rank_gap,
)
from parabolic.relaxation import FULL, build_parabolic_model, select_pairs
from parabolic.theory import (
    analyze,
    convergence_threshold_estimate,
    diagonal_dominance,
    exactness_certificate,
    expanded_q,
    feasibility_distance_upper,
    jacobian,
    kkt_residual,
    lemma1_bounds,
    lemma2_envelope,
    lemma4_envelope,
    near_feasible_threshold,
    pencil_norm_upper,
    quasi_binding_set,
    singularity,
    solve_auxiliary,
)

TIGHT = SolverSettings(tol_gap=1e-10)


def _circle_instance():
    # minimize 2 x1 subject to x1^2 + x2^2 = 1
    return QcqpInstance(
        QuadForm.linear(np.array([[1.0], [0.0]])), [QuadForm(np.eye(2), c=-1.0)]
    )


def _ball(n, objective=None, equality=False):
    ball = QuadForm(np.eye(n), c=-1.0)
    objective = objective or QuadForm(np.zeros((n, n)))
    if equality:
        return QcqpInstance(objective, [ball])
    return QcqpInstance(objective, inequalities=[ball])


class ThresholdTests(unittest.TestCase):
    def test_circle_thresholds(self):
        report = analyze(_circle_instance(), [0.0, 1.0])
        self.assertTrue(report.feasible)
        self.assertEqual(report.d_upper, 0.0)
        self.assertEqual((report.rho1_ub, report.rho2_ub), (1.0, 1.0))
        self.assertAlmostEqual(report.s_value, 2.0, places=12)
        self.assertEqual(report.binding.indices, (1,))
        self.assertAlmostEqual(report.eta_thm1, 6.3, places=10)
        self.assertAlmostEqual(report.eta_thm2, 6.3, places=10)
        self.assertTrue(report.glicq_ok)
        self.assertAlmostEqual(report.margin, 2.0, places=12)

    def test_certified_penalty_gives_rank_one_solution(self):
        inst = _circle_instance()
        anchor = np.array([[0.0], [1.0]])
        model = build_parabolic_model(inst, anchor=anchor, eta=6.3)
        sol = solve_model(model)
        self.assertTrue(sol.optimal)
        point = model.decode(sol.x)
        self.assertLess(rank_gap(point), 1e-6)
        self.assertLessEqual(eval_q(inst.objective, point.Y), eval_q(inst.objective, anchor) + 1e-6)

    def test_report_serializes_missing_thresholds(self):
        inst = QcqpInstance(QuadForm(np.zeros((1, 1))), inequalities=[QuadForm(np.eye(1), c=1.0)])
        with self.assertLogs("parabolic.theory", level="WARNING"):
            report = analyze(inst, [0.0])
        self.assertFalse(report.feasible)
        self.assertIsNone(report.d_upper)
        self.assertIn("distance-unavailable", report.notes)
        data = report.to_dict()
        self.assertEqual(data["eta_thm1"], "n/a")
        self.assertEqual(data["eta_thm2"], "n/a")
        self.assertEqual(data["d_upper"], "n/a")

    def test_near_feasible_threshold_needs_positive_singularity(self):
        inst = _circle_instance()
        self.assertIsNotNone(near_feasible_threshold(inst, [0.0, 1.1], 0.1))
        self.assertIsNone(near_feasible_threshold(inst, [0.0, 0.0], 1.0))


class BindingTests(unittest.TestCase):
    def test_expanded_value(self):
        inst = _ball(2)
        # q = 3, ||grad|| = 2 * sqrt(4) = 4, ||A||_2 = 1
        self.assertAlmostEqual(expanded_q(inst, 1, [2.0, 0.0], 0.5), 3.0 + 2.0 + 0.25)

    def test_inactive_inequality_is_not_binding(self):
        inst = _ball(2)
        binding = quasi_binding_set(inst, [0.0, 0.0], 0.1)
        self.assertEqual(len(binding), 0)
        self.assertEqual(singularity(inst, [0.0, 0.0], 0.1, binding), float("inf"))

    def test_more_binding_constraints_than_variables(self):
        inst = QcqpInstance(
            QuadForm(np.eye(1)), [QuadForm(np.eye(1), c=-1.0), QuadForm.linear(np.array([[0.5]]), -1.0)]
        )
        self.assertEqual(singularity(inst, [1.0]), 0.0)

    def test_negative_distance_is_rejected(self):
        with self.assertRaises(InvalidArgument):
            quasi_binding_set(_ball(2), [0.0, 0.0], -1.0)

    def test_jacobian_is_column_major(self):
        rng = np.random.default_rng(6)
        form = random_form(rng, 2, 2)
        inst = QcqpInstance(random_form(rng, 2, 2), [form])
        Y = rng.standard_normal((2, 2))
        np.testing.assert_allclose(jacobian(inst, [1], Y)[0], grad_q(form, Y).ravel(order="F"))
        self.assertEqual(jacobian(inst, [], Y).shape, (0, 4))

    def test_pencil_norm_index(self):
        self.assertEqual(pencil_norm_upper(_ball(3), 1), 1.0)
        with self.assertRaises(InvalidArgument):
            pencil_norm_upper(_ball(3), 3)


class CertificateTests(unittest.TestCase):
    def test_diagonal_dominance(self):
        holds = diagonal_dominance(np.array([[2.0, -1.0], [-1.0, 2.0]]))
        self.assertTrue(holds.holds)
        self.assertEqual(holds.diag_dominance_margin, 1.0)
        fails = diagonal_dominance(np.array([[1.0, 2.0], [2.0, 1.0]]))
        self.assertFalse(fails.holds)
        self.assertEqual(fails.diag_dominance_margin, -1.0)

    def test_exactness_certificate(self):
        inst = QcqpInstance(QuadForm(-np.eye(2)), inequalities=[QuadForm(np.eye(2), c=-1.0)])
        certificate = exactness_certificate(inst, {1: 0.5}, 1.0, [1])
        np.testing.assert_allclose(certificate.lam, 0.5 * np.eye(2))
        self.assertTrue(certificate.holds)
        with self.assertRaises(InvalidArgument):
            exactness_certificate(inst, {}, 1.0, [1])

    def test_kkt_residual_at_a_kkt_point(self):
        # minimize x subject to x^2 = 1
        inst = QcqpInstance(
            QuadForm.linear(np.array([[0.5]])), [QuadForm(np.eye(1), c=-1.0)]
        )
        self.assertAlmostEqual(kkt_residual(inst, [-1.0], {1: 0.5}, [1]), 0.0, places=12)
        self.assertAlmostEqual(kkt_residual(inst, [-1.0], {1: 1.0}, [1]), 0.5, places=12)

    def test_convergence_estimate_on_empty_history(self):
        self.assertIsNone(convergence_threshold_estimate(_circle_instance(), []))
        estimate = convergence_threshold_estimate(_circle_instance(), [np.array([[0.0], [1.0]])])
        self.assertAlmostEqual(estimate, 3.0)


class DistanceTests(unittest.TestCase):
    def test_feasible_anchor_has_zero_distance(self):
        d, Y = feasibility_distance_upper(_ball(3), [0.5, 0.0, 0.0])
        self.assertEqual(d, 0.0)
        np.testing.assert_allclose(Y.ravel(), [0.5, 0.0, 0.0])

    def test_projection_onto_ball(self):
        d, Y = feasibility_distance_upper(_ball(3), [2.0, 0.0, 0.0])
        self.assertAlmostEqual(d, 1.0, places=5)
        np.testing.assert_allclose(Y.ravel(), [1.0, 0.0, 0.0], atol=1e-5)

    def test_search_penalty_must_be_positive(self):
        with self.assertRaises(InvalidArgument):
            feasibility_distance_upper(_ball(3), [2.0, 0.0, 0.0], eta_probe=0.0)
        with self.assertRaises(InvalidArgument):
            solve_auxiliary(_ball(3), [2.0, 0.0, 0.0], 0.0)


class LemmaTests(unittest.TestCase):
    def test_value_and_gradient_bounds(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            form = random_form(rng, 3, 2)
            Y1 = rng.standard_normal((3, 2))
            Y2 = rng.standard_normal((3, 2))
            (value, value_bound), (gradient, gradient_bound) = lemma1_bounds(form, Y1, Y2)
            self.assertLessEqual(value, value_bound + 1e-9)
            self.assertLessEqual(gradient, gradient_bound + 1e-9)

    def test_auxiliary_minimizer_stays_near_anchor(self):
        rng = np.random.default_rng(29)
        for _ in range(1000):
            inst = _ball(3, random_form(rng, 3))
            eta = inst.objective.norm2 + rng.uniform(0.5, 5.0)
            anchor = rng.standard_normal((3, 1)) * 2.0
            radius = float(np.linalg.norm(anchor))
            d = max(radius - 1.0, 0.0)
            Y_star = solve_auxiliary(inst, anchor, eta, start=anchor / max(radius, 1.0))
            gap, bound = lemma2_envelope(inst, anchor, eta, Y_star, d)
            self.assertLessEqual(gap, bound + 1e-6)

    def test_envelope_needs_a_large_penalty(self):
        inst = _ball(2, QuadForm(2.0 * np.eye(2)))
        with self.assertRaises(InvalidArgument):
            lemma2_envelope(inst, [0.0, 0.0], 1.0, [0.0, 0.0], 0.0)

    def test_multiplier_envelope(self):
        rng = np.random.default_rng(31)
        for _ in range(1000):
            inst = _ball(3, random_form(rng, 3), equality=True)
            anchor = rng.standard_normal((3, 1))
            eta = rng.uniform(0.5, 5.0)
            Y_star = solve_auxiliary(inst, anchor, eta, start=anchor / np.linalg.norm(anchor))
            rhs = grad_q(inst.objective, Y_star) + 2.0 * eta * (Y_star - anchor)
            J = jacobian(inst, [1], Y_star)
            tau = np.linalg.lstsq(J.T, -rhs.ravel(order="F"), rcond=None)[0]
            lhs, bound = lemma4_envelope(inst, anchor, eta, Y_star, {1: float(tau[0])})
            self.assertLessEqual(lhs, bound + 1e-9 * (1.0 + bound))


class DistanceOracleTests(unittest.TestCase):
    def test_distance_bound_matches_multistart_projection(self):
        rng = np.random.default_rng(37)
        close = 0
        for index in range(50):
            n = 2 + index % 3
            Y = rng.uniform(-1.0, 1.0, size=(n, 1))
            inst = instance_through_point(rng, Y, n_eq=1, n_ineq=1)
            anchor = Y + 0.5 * rng.standard_normal((n, 1))
            d, projection = feasibility_distance_upper(inst, anchor)
            starts = [projection, Y] + [anchor + rng.standard_normal((n, 1)) for _ in range(18)]
            oracle = multistart_distance(inst, anchor, starts)
            self.assertGreaterEqual(d, oracle - 1e-6)
            if d <= 1.1 * oracle + 1e-9:
                close += 1
        self.assertGreaterEqual(close, 45)


class PenaltyEfficacyTests(unittest.TestCase):
    def test_certified_penalty_keeps_feasible_anchor_progress(self):
        rng = np.random.default_rng(202)
        for index in range(50):
            n = 3 + index % 3
            anchor = rng.uniform(-1.0, 1.0, size=(n, 1))
            inst = instance_through_point(rng, anchor, n_eq=1, n_ineq=2, n_active=1)
            report = analyze(inst, anchor)
            self.assertTrue(report.feasible)
            self.assertIsNotNone(report.eta_thm1)
            model = build_parabolic_model(
                inst, select_pairs(inst, FULL), anchor, report.eta_thm1
            )
            sol = solve_model(model, TIGHT)
            self.assertEqual(sol.status, OPTIMAL)
            point = model.decode(sol.x)
            self.assertLess(rank_gap(point), 1e-7)
            self.assertLessEqual(
                eval_q(inst.objective, point.Y), eval_q(inst.objective, anchor) + 1e-8
            )


class CertificateCorpusTests(unittest.TestCase):
    def test_certified_solves_are_rank_one(self):
        rng = np.random.default_rng(53)
        solves = certified = 0
        for index in range(100):
            n = 3 + index % 2
            Y = rng.uniform(-1.0, 1.0, size=(n, 1))
            inst = instance_through_point(rng, Y, n_eq=1, n_ineq=2, n_active=1)
            anchor = Y if index % 2 == 0 else Y + 0.3 * rng.standard_normal((n, 1))
            scale = 1.0 + inst.objective.norm1 + pencil_norm_upper(inst, 1)
            for eta in (1.0 + inst.objective.norm1, 3.0 * scale, 30.0 * scale):
                model = build_parabolic_model(inst, select_pairs(inst, FULL), anchor, eta)
                sol = solve_model(model, TIGHT)
                solves += 1
                if sol.status != OPTIMAL:
                    continue
                if diagonal_dominance(extract_duals(sol, model)[1]).holds:
                    certified += 1
                    self.assertLess(rank_gap(model.decode(sol.x)), 1e-6)
        self.assertGreaterEqual(solves, 300)
        self.assertGreater(certified, 0)


if __name__ == "__main__":
    unittest.main()
