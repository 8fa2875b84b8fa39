"""Sequential penalized relaxation, its accelerated variant and penalty search.

Each round solves the penalized parabolic relaxation anchored at a point derived from the
previous round. A round is *tight* when the rank gap of its solution is below
``StopCriteria.rank_tol``.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cones import INACCURATE, OPTIMAL, SolverSettings, extract_duals, solve_model
from .errors import EtaSearchFailed, GapUndefined, InvalidArgument, SolverFailure
from .qcqp import QcqpInstance, as_matrix, eval_q, feasibility_residual, rank_gap
from .relaxation import (
    ParabolicPair,
    RelaxationModel,
    add_box_cuts,
    build_parabolic_model,
    build_socp_baseline,
    select_pairs,
)
from .theory import diagonal_dominance, near_feasible_threshold

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ROUNDS = "max_rounds"

# Builds the model of one round from the instance, the anchor and the penalty weight.
ModelBuilder = Callable[[QcqpInstance, np.ndarray, float], RelaxationModel]

STATIC = "static"
CERTIFIED = "certified"
BACKTRACKING = "backtracking"
FIXED = "fixed"


@dataclass(frozen=True)
class StopCriteria(object):
    rel_tol: float = 1e-4
    max_rounds: int = 400
    rank_tol: float = 1e-7
    feas_tol: float = 1e-6
    early_stop: bool = True

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise InvalidArgument("rel_tol must be positive, got %r" % (self.rel_tol,))
        if int(self.max_rounds) < 1:
            raise InvalidArgument("max_rounds must be at least 1")


@dataclass(frozen=True)
class AcceleratedSchedule(object):
    lam_rule: str = BACKTRACKING
    lam: float = 0.5
    eta_rule: str = STATIC
    lam_min: float = 1e-6

    def __post_init__(self):
        if self.lam_rule not in (BACKTRACKING, FIXED):
            raise InvalidArgument("Unknown lambda rule '%s'" % self.lam_rule)
        if self.eta_rule not in (STATIC, CERTIFIED):
            raise InvalidArgument("Unknown eta rule '%s'" % self.eta_rule)
        if not 0 <= self.lam < 1:
            raise InvalidArgument("lambda must lie in [0, 1), got %r" % (self.lam,))


@dataclass
class RoundRecord(object):
    round: int
    Y: np.ndarray
    objective: float
    rank_gap: float
    status: str
    time_s: float
    eta: float
    feasible: bool
    relaxation_objective: float = float("nan")
    certificate: Optional[bool] = None
    tau: Dict[int, float] = field(default_factory=dict)
    lam: Optional[float] = None
    anchor: Optional[np.ndarray] = None

    def tight(self, rank_tol):  # type: (float) -> bool
        return self.status == OPTIMAL and self.rank_gap < rank_tol


@dataclass
class RunTrace(object):
    kind: str
    eta: float
    initial_objective: float
    stop: StopCriteria
    rounds: List[RoundRecord] = field(default_factory=list)
    status: str = MAX_ROUNDS
    i_stop: Optional[int] = None

    @property
    def i_feas(self):  # type: () -> Optional[int]
        for record in self.rounds:
            if record.tight(self.stop.rank_tol):
                return record.round
        return None

    @property
    def last(self):  # type: () -> Optional[RoundRecord]
        return self.rounds[-1] if self.rounds else None

    def best_feasible(self):  # type: () -> Optional[RoundRecord]
        feasible = [r for r in self.rounds if r.feasible and r.status == OPTIMAL]
        return min(feasible, key=lambda r: r.objective) if feasible else None

    @property
    def upper_bound(self):  # type: () -> Optional[float]
        best = self.best_feasible()
        return None if best is None else best.objective

    @property
    def total_time(self):  # type: () -> float
        return float(sum(r.time_s for r in self.rounds))

    @property
    def t_stop(self):  # type: () -> float
        if self.i_stop is None:
            return self.total_time
        return float(sum(r.time_s for r in self.rounds if r.round <= self.i_stop))


@dataclass
class BoundRecord(object):
    lower_bound: Optional[float]
    status: str
    time_s: float
    gap_pct: Optional[float] = None
    Y: Optional[np.ndarray] = None
    rank_gap: Optional[float] = None
    baseline_bound: Optional[float] = None
    baseline_gap_pct: Optional[float] = None


def compute_gaps(q_relax, q_feasible, q_ref):
    # type: (Optional[float], Optional[float], float) -> Tuple[Optional[float], Optional[float]]
    """Percent gaps of a lower bound and a feasible value against a reference optimum."""
    if q_ref == 0:
        raise GapUndefined("Gaps are undefined for a zero reference objective")
    lb = None if q_relax is None else 100.0 * (q_ref - q_relax) / abs(q_ref)
    ub = None if q_feasible is None else 100.0 * (q_feasible - q_ref) / abs(q_ref)
    return lb, ub


def _pairs(inst, pairs, policy):
    # type: (QcqpInstance, Optional[Sequence[ParabolicPair]], Optional[str]) -> List[ParabolicPair]
    return list(pairs) if pairs is not None else select_pairs(inst, policy)


def lower_bound(
    inst,  # type: QcqpInstance
    pairs=None,  # type: Optional[Sequence[ParabolicPair]]
    policy=None,  # type: Optional[str]
    box_cuts=False,  # type: bool
    baseline=False,  # type: bool
    settings=None,  # type: Optional[SolverSettings]
):
    # type: (...) -> BoundRecord
    """Unpenalized relaxation bound, optionally next to the 2x2-minor baseline."""
    constrained = inst.bounded()
    chosen = _pairs(inst, pairs, policy)
    model = build_parabolic_model(constrained, chosen)
    if box_cuts:
        model = add_box_cuts(model)
    start = time.time()
    sol = solve_model(model, settings)
    record = BoundRecord(
        lower_bound=sol.primal_objective if sol.optimal else None,
        status=sol.status,
        time_s=time.time() - start,
    )
    if sol.optimal:
        point = model.decode(sol.x)
        record.Y = point.Y
        record.rank_gap = rank_gap(point)
    if baseline:
        base = build_socp_baseline(constrained, chosen)
        if box_cuts:
            base = add_box_cuts(base)
        base_sol = solve_model(base, settings)
        if base_sol.optimal:
            record.baseline_bound = base_sol.primal_objective
    if inst.reference_objective:
        record.gap_pct = compute_gaps(record.lower_bound, None, inst.reference_objective)[0]
        if record.baseline_bound is not None:
            record.baseline_gap_pct = compute_gaps(
                record.baseline_bound, None, inst.reference_objective
            )[0]
    return record


def relaxation_start(inst, pairs=None, settings=None):
    # type: (QcqpInstance, Optional[Sequence[ParabolicPair]], Optional[SolverSettings]) -> np.ndarray
    """The ``Y`` part of the unpenalized relaxation solution."""
    record = lower_bound(inst, pairs=pairs, settings=settings)
    if record.Y is None:
        raise SolverFailure(
            "Relaxation for the starting point ended with status '%s'" % record.status,
            record.status,
        )
    return record.Y


def _solve_round(inst, anchor, eta, builder, settings, stop, index):
    # type: (QcqpInstance, np.ndarray, float, ModelBuilder, Optional[SolverSettings], StopCriteria, int) -> RoundRecord
    start = time.time()
    model = builder(inst, anchor, eta)
    sol = solve_model(model, settings)
    elapsed = time.time() - start
    if not sol.usable:
        return RoundRecord(
            round=index,
            Y=anchor,
            objective=float("nan"),
            rank_gap=float("nan"),
            status=sol.status,
            time_s=elapsed,
            eta=eta,
            feasible=False,
        )
    point = model.decode(sol.x)
    tau, lam = extract_duals(sol, model)
    return RoundRecord(
        round=index,
        Y=point.Y,
        objective=eval_q(inst.objective, point.Y),
        rank_gap=rank_gap(point),
        status=sol.status,
        time_s=elapsed,
        eta=eta,
        feasible=feasibility_residual(inst, point.Y, stop.feas_tol)[2],
        relaxation_objective=sol.primal_objective,
        certificate=diagonal_dominance(lam).holds,
        tau=tau,
    )


def _should_stop(record, previous_ok, previous_objective, stop):
    # type: (RoundRecord, bool, float, StopCriteria) -> bool
    if not (stop.early_stop and previous_ok and record.tight(stop.rank_tol)):
        return False
    decrease = previous_objective - record.objective
    return decrease <= stop.rel_tol * max(abs(record.objective), 1e-12)


def _check_eta(eta):  # type: (float) -> None
    if not (np.isfinite(eta) and eta > 0):
        raise InvalidArgument("Penalty weight must be positive, got %r" % (eta,))


def _run(inst, Y0, eta, stop, kind, next_anchor, pairs, policy, settings, builder=None):
    # type: (QcqpInstance, Optional[np.ndarray], float, StopCriteria, str, Callable, Optional[Sequence[ParabolicPair]], Optional[str], Optional[SolverSettings], Optional[ModelBuilder]) -> RunTrace
    _check_eta(eta)
    constrained = inst.bounded()
    if builder is None:
        chosen = _pairs(inst, pairs, policy)

        def builder(target, anchor, round_eta):
            return build_parabolic_model(target, chosen, anchor, round_eta)

        if Y0 is None:
            Y0 = relaxation_start(inst, chosen, settings)
    if Y0 is None:
        raise InvalidArgument("A run with a custom model builder needs a starting point")
    Y0 = as_matrix(Y0, inst.n, inst.m)
    trace = RunTrace(kind, eta, eval_q(inst.objective, Y0), stop)
    previous_ok = feasibility_residual(constrained, Y0, stop.feas_tol)[2]
    previous_objective = trace.initial_objective
    for index in range(1, int(stop.max_rounds) + 1):
        anchor, round_eta, lam = next_anchor(index, trace)
        record = _solve_round(constrained, anchor, round_eta, builder, settings, stop, index)
        record.lam = lam
        record.anchor = anchor
        trace.rounds.append(record)
        if record.status == INACCURATE:
            logger.warning(
                "Round %d stalled short of the solver tolerances; continuing from its point",
                index,
            )
        elif record.status != OPTIMAL:
            logger.warning(
                "Round %d ended with solver status '%s'; stopping the run", index, record.status
            )
            trace.status = record.status
            trace.i_stop = index
            return trace
        logger.debug(
            "round %d: objective %.10g rank gap %.3e eta %g%s",
            index,
            record.objective,
            record.rank_gap,
            round_eta,
            "" if lam is None else " lambda %g" % lam,
        )
        if _should_stop(record, previous_ok, previous_objective, stop):
            trace.status = CONVERGED
            trace.i_stop = index
            return trace
        previous_ok = record.tight(stop.rank_tol) and record.feasible
        previous_objective = record.objective
    trace.status = MAX_ROUNDS
    trace.i_stop = int(stop.max_rounds)
    return trace


def run_sequential(
    inst,  # type: QcqpInstance
    Y0,  # type: Optional[np.ndarray]
    eta,  # type: float
    stop=None,  # type: Optional[StopCriteria]
    pairs=None,  # type: Optional[Sequence[ParabolicPair]]
    policy=None,  # type: Optional[str]
    settings=None,  # type: Optional[SolverSettings]
    builder=None,  # type: Optional[ModelBuilder]
):
    # type: (...) -> RunTrace
    """Penalized relaxation rounds, each anchored at the previous solution.

    Without ``Y0`` the run starts from the unpenalized relaxation solution. ``builder``
    replaces the parabolic model of ``pairs`` with a problem-specific one; such runs
    need ``Y0``.
    """
    if Y0 is None and builder is None:
        Y0 = relaxation_start(inst, _pairs(inst, pairs, policy), settings)
    if Y0 is None:
        raise InvalidArgument("A run with a custom model builder needs a starting point")
    start = as_matrix(Y0, inst.n, inst.m)

    def next_anchor(index, trace):
        return (trace.last.Y if trace.rounds else start), eta, None

    return _run(inst, Y0, eta, stop or StopCriteria(), "sequential", next_anchor, pairs,
                policy, settings, builder)


def _backtrack_lambda(inst, eta, schedule, solution, anchor):
    # type: (QcqpInstance, float, AcceleratedSchedule, np.ndarray, np.ndarray) -> Tuple[float, Optional[float]]
    """Largest halving of ``schedule.lam`` meeting the near-feasible conditions."""
    spread = float(np.linalg.norm(anchor - solution))
    lam = schedule.lam
    while lam >= schedule.lam_min:
        blend = (1.0 - lam) * solution + lam * anchor
        threshold = near_feasible_threshold(inst, blend, lam * spread)
        if threshold is not None and (schedule.eta_rule == CERTIFIED or eta > threshold):
            return lam, threshold
        lam *= 0.5
    return 0.0, near_feasible_threshold(inst, solution, 0.0)


def run_accelerated(
    inst,  # type: QcqpInstance
    Y0,  # type: Optional[np.ndarray]
    eta,  # type: float
    schedule=None,  # type: Optional[AcceleratedSchedule]
    stop=None,  # type: Optional[StopCriteria]
    pairs=None,  # type: Optional[Sequence[ParabolicPair]]
    policy=None,  # type: Optional[str]
    settings=None,  # type: Optional[SolverSettings]
):
    # type: (...) -> RunTrace
    """Rounds anchored at ``(1 - lam) Y*_prev + lam Y0_prev``.

    The first round is anchored at ``Y0`` itself.
    """
    schedule = schedule or AcceleratedSchedule()
    constrained = inst.bounded()
    if Y0 is None:
        Y0 = relaxation_start(inst, _pairs(inst, pairs, policy), settings)
    Y0 = as_matrix(Y0, inst.n, inst.m)

    def next_anchor(index, trace):
        if not trace.rounds:
            return Y0, eta, 1.0
        previous = trace.last
        solution, anchor = previous.Y, previous.anchor
        if schedule.lam_rule == FIXED:
            lam, threshold = schedule.lam, None
            if schedule.eta_rule == CERTIFIED:
                spread = float(np.linalg.norm(anchor - solution))
                blend = (1.0 - lam) * solution + lam * anchor
                threshold = near_feasible_threshold(constrained, blend, lam * spread)
        else:
            lam, threshold = _backtrack_lambda(constrained, eta, schedule, solution, anchor)
        round_eta = eta
        if schedule.eta_rule == CERTIFIED and threshold is not None:
            round_eta = max(eta, threshold)
        return (1.0 - lam) * solution + lam * anchor, round_eta, lam

    return _run(inst, Y0, eta, stop or StopCriteria(), "accelerated", next_anchor, pairs,
                policy, settings)


def eta_grid(low=-6, high=12):  # type: (int, int) -> List[float]
    return [alpha * 10.0 ** beta for beta in range(low, high + 1) for alpha in (1.0, 2.0, 5.0)]


def auto_eta(
    inst,  # type: QcqpInstance
    Y0,  # type: Optional[np.ndarray]
    rounds_probe=10,  # type: int
    pairs=None,  # type: Optional[Sequence[ParabolicPair]]
    policy=None,  # type: Optional[str]
    settings=None,  # type: Optional[SolverSettings]
    rank_tol=1e-7,  # type: float
):
    # type: (...) -> float
    """Smallest grid value ``alpha * 10**beta`` whose first rounds are all tight."""
    if int(rounds_probe) < 1:
        raise InvalidArgument("rounds_probe must be at least 1")
    chosen = _pairs(inst, pairs, policy)
    if Y0 is None:
        Y0 = relaxation_start(inst, chosen, settings)
    probe_stop = StopCriteria(max_rounds=int(rounds_probe), rank_tol=rank_tol, early_stop=False)
    grid = eta_grid()
    verdicts = {}  # type: Dict[int, bool]

    def tight(index):  # type: (int) -> bool
        if index not in verdicts:
            trace = run_sequential(inst, Y0, grid[index], probe_stop, chosen, settings=settings)
            verdicts[index] = len(trace.rounds) == int(rounds_probe) and all(
                r.tight(rank_tol) for r in trace.rounds
            )
            logger.debug("eta probe %g: %s", grid[index], "tight" if verdicts[index] else "loose")
        return verdicts[index]

    low, high = 0, len(grid) - 1
    while low < high:
        mid = (low + high) // 2
        if tight(mid):
            high = mid
        else:
            low = mid + 1
    if not tight(low):
        raise EtaSearchFailed(
            "No penalty weight up to %g kept the first %d rounds tight" % (grid[-1], rounds_probe)
        )
    return grid[low]
