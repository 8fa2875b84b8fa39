"""Multistart local searches used as reference values by the test suites."""
import numpy as np
from scipy import optimize

from parabolic.qcqp import eval_q, feasibility_residual, grad_q

FEASIBILITY_TOL = 1e-8


def _constraints(inst):
    n, m = inst.n, inst.m

    def value(k, sign):
        return lambda y: sign * eval_q(inst.form(k), y.reshape(n, m))

    def gradient(k, sign):
        return lambda y: sign * grad_q(inst.form(k), y.reshape(n, m)).ravel()

    constraints = [
        {"type": "eq", "fun": value(k, 1.0), "jac": gradient(k, 1.0)}
        for k in inst.equality_indices
    ]
    constraints.extend(
        {"type": "ineq", "fun": value(k, -1.0), "jac": gradient(k, -1.0)}
        for k in inst.inequality_indices
    )
    return constraints


def _feasible(inst, y):
    return feasibility_residual(inst, y.reshape(inst.n, inst.m), FEASIBILITY_TOL)[2]


def feasible_minima(inst, objective, gradient, starts):
    """Feasible points among the starts and the SLSQP minima reached from them."""
    bounds = None
    if inst.bounds is not None:
        bounds = list(zip(inst.bounds[0], inst.bounds[1]))
    constraints = _constraints(inst)
    points = []
    for start in starts:
        y0 = np.asarray(start, dtype=float).ravel()
        if _feasible(inst, y0):
            points.append(y0)
        result = optimize.minimize(
            objective,
            y0,
            jac=gradient,
            method="SLSQP",
            bounds=bounds,
            constraints=constraints,
            options={"maxiter": 500, "ftol": 1e-12},
        )
        if _feasible(inst, result.x):
            points.append(np.asarray(result.x, dtype=float))
    return points


def multistart_minimum(inst, starts):
    n, m = inst.n, inst.m

    def objective(y):
        return eval_q(inst.objective, y.reshape(n, m))

    def gradient(y):
        return grad_q(inst.objective, y.reshape(n, m)).ravel()

    values = [objective(y) for y in feasible_minima(inst, objective, gradient, starts)]
    return min(values) if values else None


def multistart_distance(inst, anchor, starts):
    """Smallest Frobenius distance from ``anchor`` to a feasible point reached locally."""
    y_anchor = np.asarray(anchor, dtype=float).ravel()

    def objective(y):
        return float(np.dot(y - y_anchor, y - y_anchor))

    def gradient(y):
        return 2.0 * (y - y_anchor)

    points = feasible_minima(inst, objective, gradient, starts)
    if not points:
        return None
    return float(min(np.linalg.norm(y - y_anchor) for y in points))
