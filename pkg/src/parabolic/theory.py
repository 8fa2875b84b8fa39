"""Penalty thresholds, quasi-binding sets and exactness certificates.

Every quantity here is evaluated at an anchor point ``Y0`` (the point the penalty pulls
toward). Norms of constraint matrices come from :func:`parabolic.qcqp.matrix_norms`; the
pencil norms are always the summed upper bounds, never the exact maxima.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .errors import DistanceUnavailable, InvalidArgument
from .qcqp import QcqpInstance, as_matrix, eval_q, feasibility_residual, grad_q

logger = logging.getLogger(__name__)

BINDING_TOL = 1e-8
FEASIBILITY_TOL = 1e-7
ETA_INFLATION = 1.05
SEARCH_ITERATIONS = 200


@dataclass(frozen=True)
class BindingSet(object):
    indices: Tuple[int, ...]
    d: float
    expanded: Dict[int, float] = field(default_factory=dict)

    def __contains__(self, k):
        return k in self.indices

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


@dataclass
class TheoryReport(object):
    rho1_ub: float
    rho2_ub: float
    d_upper: Optional[float]
    projection: Optional[np.ndarray]
    binding: BindingSet
    s_value: float
    eta_thm1: Optional[float]
    eta_thm2: Optional[float]
    glicq_ok: bool
    margin: Optional[float]
    feasible: bool
    notes: List[str] = field(default_factory=list)

    def to_dict(self):  # type: () -> Dict[str, object]
        def number(value):
            if value is None:
                return "n/a"
            if np.isinf(value):
                return "inf"
            return float(value)

        return {
            "rho1_ub": float(self.rho1_ub),
            "rho2_ub": float(self.rho2_ub),
            "d_upper": number(self.d_upper),
            "binding": list(self.binding.indices),
            "s_value": number(self.s_value),
            "eta_thm1": number(self.eta_thm1),
            "eta_thm2": number(self.eta_thm2),
            "glicq_ok": bool(self.glicq_ok),
            "margin": number(self.margin),
            "feasible": bool(self.feasible),
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class ExactnessCertificate(object):
    lam: np.ndarray
    diag_dominance_margin: float
    holds: bool


def _anchor(inst, Y):  # type: (QcqpInstance, object) -> np.ndarray
    return as_matrix(Y, inst.n, inst.m)


def _check_d(d):  # type: (float) -> None
    if not d >= 0:
        raise InvalidArgument("Distance must be >= 0, got %r" % (d,))


def expanded_q(inst, k, anchor, d):
    # type: (QcqpInstance, int, np.ndarray, float) -> float
    """``q_k + ||grad q_k||_F d + ||A_k||_2 d^2`` at the anchor."""
    _check_d(d)
    form = inst.form(k)
    Y = _anchor(inst, anchor)
    return (
        eval_q(form, Y)
        + float(np.linalg.norm(grad_q(form, Y))) * d
        + form.norm2 * d * d
    )


def quasi_binding_set(inst, anchor, d, binding_tol=BINDING_TOL):
    # type: (QcqpInstance, np.ndarray, float, float) -> BindingSet
    _check_d(d)
    expanded = {k: expanded_q(inst, k, anchor, d) for k in inst.constraint_indices}
    indices = list(inst.equality_indices)
    indices.extend(k for k in inst.inequality_indices if expanded[k] >= -binding_tol)
    return BindingSet(tuple(indices), float(d), expanded)


def jacobian(inst, indices, Y):
    # type: (QcqpInstance, Iterable[int], np.ndarray) -> np.ndarray
    """Rows ``vec(grad q_k(Y))'`` with column-major ``vec``."""
    Y = _anchor(inst, Y)
    rows = [grad_q(inst.form(k), Y).ravel(order="F") for k in indices]
    if not rows:
        return np.zeros((0, inst.n * inst.m))
    return np.vstack(rows)


def singularity(inst, anchor, d=0.0, binding=None):
    # type: (QcqpInstance, np.ndarray, float, Optional[BindingSet]) -> float
    """Smallest singular value of the quasi-binding Jacobian.

    Zero when more than ``n`` constraints are quasi-binding; ``inf`` when none are.
    """
    binding = binding if binding is not None else quasi_binding_set(inst, anchor, d)
    count = len(binding)
    if count == 0:
        return float("inf")
    if count > inst.n:
        if count <= inst.n * inst.m:
            logger.warning(
                "%d quasi-binding constraints exceed n = %d but not n*m = %d; "
                "singularity taken as 0",
                count, inst.n, inst.n * inst.m,
            )
        return 0.0
    J = jacobian(inst, binding.indices, anchor)
    return float(np.linalg.svd(J, compute_uv=False)[-1])


def pencil_norm_upper(inst, which):  # type: (QcqpInstance, int) -> float
    if which not in (1, 2):
        raise InvalidArgument("Pencil norm must be 1 or 2, got %r" % (which,))
    return float(sum(inst.form(k).norms[which - 1] for k in inst.constraint_indices))


def _constraint_residual(inst, y, tol):
    # type: (QcqpInstance, np.ndarray, float) -> Tuple[np.ndarray, np.ndarray]
    Y = y.reshape(inst.n, inst.m)
    values, rows = [], []
    for k in inst.constraint_indices:
        form = inst.form(k)
        value = eval_q(form, Y)
        if inst.is_equality(k) or value > 0:
            values.append(value)
            rows.append(grad_q(form, Y).ravel())
    if not values:
        return np.zeros(0), np.zeros((0, y.shape[0]))
    return np.array(values), np.vstack(rows)


def _gauss_newton(inst, y, tol=FEASIBILITY_TOL, max_iter=SEARCH_ITERATIONS):
    # type: (QcqpInstance, np.ndarray, float, int) -> np.ndarray
    """Damped Gauss-Newton on ``[q_E; max(q_I, 0)]`` with minimum-norm steps."""
    y = y.copy()
    r, J = _constraint_residual(inst, y, tol)
    for _ in range(max_iter):
        merit = float(np.dot(r, r))
        if r.size == 0 or np.max(np.abs(r)) <= tol * 1e-3:
            break
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            candidate = y + t * step
            r_new, J_new = _constraint_residual(inst, candidate, tol)
            if float(np.dot(r_new, r_new)) < merit:
                y, r, J = candidate, r_new, J_new
                break
            t *= 0.5
        else:
            break
    return y


def _slsqp(inst, objective, gradient, start, max_iter=SEARCH_ITERATIONS):
    # type: (QcqpInstance, object, object, np.ndarray, int) -> np.ndarray
    n, m = inst.n, inst.m

    def values(indices, sign):
        return lambda y: np.array(
            [sign * eval_q(inst.form(k), y.reshape(n, m)) for k in indices]
        )

    def grads(indices, sign):
        return lambda y: np.array(
            [sign * grad_q(inst.form(k), y.reshape(n, m)).ravel() for k in indices]
        )

    constraints = []
    if len(inst.equality_indices):
        constraints.append(
            {"type": "eq", "fun": values(inst.equality_indices, 1.0),
             "jac": grads(inst.equality_indices, 1.0)}
        )
    if len(inst.inequality_indices):
        constraints.append(
            {"type": "ineq", "fun": values(inst.inequality_indices, -1.0),
             "jac": grads(inst.inequality_indices, -1.0)}
        )
    result = optimize.minimize(
        objective,
        start,
        jac=gradient,
        method="SLSQP",
        constraints=constraints,
        options={"maxiter": max_iter, "ftol": 1e-14},
    )
    return np.asarray(result.x, dtype=float)


def _is_feasible(inst, y, tol):  # type: (QcqpInstance, np.ndarray, float) -> bool
    return feasibility_residual(inst, y.reshape(inst.n, inst.m), tol)[2]


def _projection(inst, Y0, tol=FEASIBILITY_TOL):
    # type: (QcqpInstance, np.ndarray, float) -> Tuple[float, np.ndarray]
    y0 = Y0.ravel()
    if _is_feasible(inst, y0, tol):
        return 0.0, Y0.copy()
    candidates = []
    y_gn = _gauss_newton(inst, y0, tol)
    if _is_feasible(inst, y_gn, tol):
        candidates.append(y_gn)
    y_sq = _slsqp(
        inst,
        lambda y: float(np.dot(y - y0, y - y0)),
        lambda y: 2.0 * (y - y0),
        y_gn,
    )
    y_sq = _gauss_newton(inst, y_sq, tol)
    if _is_feasible(inst, y_sq, tol):
        candidates.append(y_sq)
    if not candidates:
        raise DistanceUnavailable(
            "Local search did not reach a feasible point within %d iterations" % SEARCH_ITERATIONS
        )
    best = min(candidates, key=lambda y: np.linalg.norm(y - y0))
    return float(np.linalg.norm(best - y0)), best.reshape(inst.n, inst.m)


def solve_auxiliary(inst, anchor, eta, start=None, tol=FEASIBILITY_TOL):
    # type: (QcqpInstance, np.ndarray, float, Optional[np.ndarray], float) -> np.ndarray
    """Local solution of ``min q0(Y) + eta ||Y - Y0||_F^2`` over the feasible set.

    Starts at ``start`` (the feasibility projection by default) and never returns a point
    with a larger auxiliary objective than the start.
    """
    if not eta > 0:
        raise InvalidArgument("Auxiliary penalty must be positive, got %r" % (eta,))
    Y0 = _anchor(inst, anchor)
    y0 = Y0.ravel()
    if start is None:
        start = _projection(inst, Y0, tol)[1]
    start = _anchor(inst, start).ravel()
    n, m = inst.n, inst.m

    def objective(y):
        return eval_q(inst.objective, y.reshape(n, m)) + eta * float(np.dot(y - y0, y - y0))

    def gradient(y):
        return grad_q(inst.objective, y.reshape(n, m)).ravel() + 2.0 * eta * (y - y0)

    candidates = [y for y in (start,) if _is_feasible(inst, y, tol)]
    y = _gauss_newton(inst, _slsqp(inst, objective, gradient, start), tol)
    if _is_feasible(inst, y, tol):
        candidates.append(y)
    if not candidates:
        raise DistanceUnavailable("Auxiliary search found no feasible point")
    return min(candidates, key=objective).reshape(n, m)


def feasibility_distance_upper(inst, anchor, eta_probe=1.0, tol=FEASIBILITY_TOL):
    # type: (QcqpInstance, np.ndarray, float, float) -> Tuple[float, np.ndarray]
    """Upper bound on the distance from the anchor to the feasible set, with the witness."""
    if not eta_probe > 0:
        raise InvalidArgument("eta_probe must be positive, got %r" % (eta_probe,))
    Y0 = _anchor(inst, anchor)
    d, Y = _projection(inst, Y0, tol)
    if d == 0.0:
        return d, Y
    try:
        Y_aux = solve_auxiliary(inst, Y0, eta_probe, start=Y, tol=tol)
    except DistanceUnavailable:
        return d, Y
    d_aux = float(np.linalg.norm(Y_aux - Y0))
    if d_aux < d:
        return d_aux, Y_aux
    return d, Y


def _objective_norms(inst):  # type: (QcqpInstance) -> Tuple[float, float]
    return inst.objective.norm1, inst.objective.norm2


def _thm1_threshold(inst, anchor, rho1, rho2, s, binding):
    # type: (QcqpInstance, np.ndarray, float, float, float, BindingSet) -> float
    a1, a2 = _objective_norms(inst)
    g0 = float(np.linalg.norm(grad_q(inst.objective, anchor)))
    bound = a1 + a2 + 2.0 * (2.0 * rho1 + rho2) * g0 / s
    for k in inst.inequality_indices:
        if k in binding:
            continue
        form = inst.form(k)
        qk = abs(eval_q(form, anchor))
        gk = float(np.linalg.norm(grad_q(form, anchor)))
        bound = max(bound, a2 + g0 * (np.sqrt(form.norm2 / qk) + gk / qk))
    return ETA_INFLATION * bound


def _thm2_threshold(inst, anchor, rho1, rho2, s, d, binding):
    # type: (QcqpInstance, np.ndarray, float, float, float, float, BindingSet) -> Optional[float]
    margin = s - 2.0 * (rho1 + rho2) * d
    if not margin > 0:
        return None
    a1, a2 = _objective_norms(inst)
    g0 = float(np.linalg.norm(grad_q(inst.objective, anchor)))
    shifted = g0 + a2 * d
    bound = a1 + a2 + (2.0 * rho1 * a1 * d + 2.0 * (2.0 * rho1 + rho2) * shifted) / margin
    for k in inst.inequality_indices:
        if k in binding:
            continue
        form = inst.form(k)
        qk = abs(binding.expanded[k])
        gk = float(np.linalg.norm(grad_q(form, anchor)))
        bound = max(
            bound, a2 + shifted * (np.sqrt(form.norm2 / qk) + (gk + 2.0 * form.norm2 * d) / qk)
        )
    return ETA_INFLATION * bound


def eta_thresholds(inst, anchor, report):
    # type: (QcqpInstance, np.ndarray, TheoryReport) -> Tuple[Optional[float], Optional[float]]
    """Certified penalty weights for a feasible anchor and for a near-feasible one.

    ``None`` marks a threshold whose hypotheses fail (zero singularity, non-positive margin
    or an unavailable distance).
    """
    Y0 = _anchor(inst, anchor)
    eta1 = None
    if report.feasible and report.s_value > 0:
        binding = quasi_binding_set(inst, Y0, 0.0)
        eta1 = _thm1_threshold(inst, Y0, report.rho1_ub, report.rho2_ub, report.s_value, binding)
    eta2 = None
    if report.d_upper is not None and report.s_value > 0:
        eta2 = _thm2_threshold(
            inst, Y0, report.rho1_ub, report.rho2_ub, report.s_value, report.d_upper,
            report.binding,
        )
    return eta1, eta2


def near_feasible_threshold(inst, anchor, d, binding_tol=BINDING_TOL):
    # type: (QcqpInstance, np.ndarray, float, float) -> Optional[float]
    """Near-feasible penalty threshold at the anchor for a given distance bound ``d``.

    ``None`` when the singularity margin is not positive.
    """
    _check_d(d)
    Y0 = _anchor(inst, anchor)
    binding = quasi_binding_set(inst, Y0, d, binding_tol)
    s = singularity(inst, Y0, d, binding)
    if s == 0:
        return None
    return _thm2_threshold(
        inst, Y0, pencil_norm_upper(inst, 1), pencil_norm_upper(inst, 2), s, d, binding
    )


def diagonal_dominance(lam):  # type: (np.ndarray) -> ExactnessCertificate
    lam = np.asarray(lam, dtype=float)
    off = np.sum(np.abs(lam), axis=1) - np.abs(np.diag(lam))
    margin = float(np.min(np.diag(lam) - off)) if lam.size else 0.0
    return ExactnessCertificate(lam, margin, margin >= 0)


def exactness_certificate(inst, tau, eta, binding):
    # type: (QcqpInstance, Dict[int, float], float, Iterable[int]) -> ExactnessCertificate
    """``eta I + A0 + sum_{k in B} tau_k A_k`` and its diagonal-dominance margin."""
    lam = eta * np.eye(inst.n) + inst.objective.dense_A()
    for k in binding:
        if k not in tau:
            raise InvalidArgument("No multiplier for binding constraint %d" % k)
        if not inst.form(k).is_linear:
            lam = lam + tau[k] * inst.form(k).dense_A()
    return diagonal_dominance(lam)


def kkt_residual(inst, Y, tau, binding):
    # type: (QcqpInstance, np.ndarray, Dict[int, float], Iterable[int]) -> float
    Y = _anchor(inst, Y)
    binding = list(binding)
    stationarity = inst.objective.A @ Y + inst.objective.dense_B()
    for k in binding:
        if k not in tau:
            raise InvalidArgument("No multiplier for binding constraint %d" % k)
        form = inst.form(k)
        stationarity = stationarity + tau[k] * (form.A @ Y + form.dense_B())
    parts = [float(np.linalg.norm(stationarity))]
    parts.extend(abs(eval_q(inst.form(k), Y)) for k in binding)
    parts.extend(max(-tau[k], 0.0) for k in binding if not inst.is_equality(k))
    parts.extend(
        max(eval_q(inst.form(k), Y), 0.0) for k in inst.inequality_indices if k not in binding
    )
    return max(parts)


def lemma1_bounds(form, Y1, Y2):
    # type: (object, np.ndarray, np.ndarray) -> Tuple[Tuple[float, float], Tuple[float, float]]
    """Both sides of the value and gradient Lipschitz-type bounds between two points."""
    dist = float(np.linalg.norm(np.asarray(Y1) - np.asarray(Y2)))
    g1 = float(np.linalg.norm(grad_q(form, Y1)))
    g2 = float(np.linalg.norm(grad_q(form, Y2)))
    value = (abs(eval_q(form, Y1) - eval_q(form, Y2)), form.norm2 * dist ** 2 + g2 * dist)
    gradient = (abs(g1 - g2), 2.0 * form.norm2 * dist)
    return value, gradient


def lemma2_envelope(inst, anchor, eta, Y_star, d):
    # type: (QcqpInstance, np.ndarray, float, np.ndarray, float) -> Tuple[float, float]
    """``(||Y* - Y0||_F - d, upper bound)`` for the auxiliary minimizer ``Y*``."""
    a2 = inst.objective.norm2
    if not eta > a2:
        raise InvalidArgument("The envelope needs eta > ||A0||_2 = %g" % a2)
    Y0 = _anchor(inst, anchor)
    gap = float(np.linalg.norm(_anchor(inst, Y_star) - Y0)) - d
    g0 = float(np.linalg.norm(grad_q(inst.objective, Y0)))
    return gap, (a2 * d + g0) / (eta - a2)


def lemma4_envelope(inst, anchor, eta, Y_star, tau):
    # type: (QcqpInstance, np.ndarray, float, np.ndarray, Dict[int, float]) -> Tuple[float, float]
    """``(||tau / eta||_2, bound)`` over the multipliers of constraints binding at ``Y*``."""
    Y_star = _anchor(inst, Y_star)
    binding = quasi_binding_set(inst, Y_star, 0.0)
    s = singularity(inst, Y_star, 0.0, binding)
    lhs = float(np.linalg.norm([tau.get(k, 0.0) for k in binding])) / eta
    if s == 0:
        return lhs, float("inf")
    g0 = float(np.linalg.norm(grad_q(inst.objective, Y_star)))
    dist = float(np.linalg.norm(Y_star - _anchor(inst, anchor)))
    return lhs, (2.0 * dist + g0 / eta) / s


def convergence_threshold_estimate(inst, history):
    # type: (QcqpInstance, Sequence[np.ndarray]) -> Optional[float]
    """Sampled penalty estimate over an iterate history; a diagnostic, not a certificate."""
    if not len(history):
        return None
    rho1 = pencil_norm_upper(inst, 1)
    a1, a2 = _objective_norms(inst)
    grads = [float(np.linalg.norm(grad_q(inst.objective, Y))) for Y in history]
    sing = [singularity(inst, Y, 0.0) for Y in history]
    worst = min(sing)
    if worst == 0:
        return float("inf")
    return a1 + a2 + 3.0 * rho1 * max(grads) / worst


def analyze(inst, anchor, eta_probe=1.0, binding_tol=BINDING_TOL, tol=FEASIBILITY_TOL):
    # type: (QcqpInstance, np.ndarray, float, float, float) -> TheoryReport
    Y0 = _anchor(inst, anchor)
    notes = []  # type: List[str]
    rho1 = pencil_norm_upper(inst, 1)
    rho2 = pencil_norm_upper(inst, 2)
    feasible = feasibility_residual(inst, Y0, tol)[2]
    d = None  # type: Optional[float]
    projection = None
    try:
        d, projection = feasibility_distance_upper(inst, Y0, eta_probe, tol)
    except DistanceUnavailable as err:
        logger.warning("Feasibility distance unavailable: %s", err.message)
        notes.append("distance-unavailable")
    if feasible:
        d = 0.0
        projection = Y0
    binding = quasi_binding_set(inst, Y0, d or 0.0, binding_tol)
    s = singularity(inst, Y0, d or 0.0, binding)
    if inst.m > 1 and inst.n < len(binding) <= inst.n * inst.m:
        notes.append("binding-count-between-n-and-nm")
    margin = None if d is None else s - 2.0 * (rho1 + rho2) * d
    report = TheoryReport(
        rho1_ub=rho1,
        rho2_ub=rho2,
        d_upper=d,
        projection=projection,
        binding=binding,
        s_value=s,
        eta_thm1=None,
        eta_thm2=None,
        glicq_ok=s > 0,
        margin=margin,
        feasible=feasible,
        notes=notes,
    )
    report.eta_thm1, report.eta_thm2 = eta_thresholds(inst, Y0, report)
    logger.debug("theory report: %s", report.to_dict())
    return report
