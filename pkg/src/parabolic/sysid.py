"""Identification of LQR-controlled linear systems from partially observed states.

The decision matrix ``Y`` has ``n`` columns and stacks, top to bottom, the ``n`` rows of
``A``, the unknown states ``x[t]'`` (one row per unknown time step) and the ``m`` columns of
``B`` written as rows. Every dynamics row ``x[t+1]_k = e_k' A x[t] + e_k' B u[t]`` is an
equality constraint, bilinear when ``x[t]`` is unknown.

Time steps are 0-based: the first state is ``t = 0`` and is always known.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse

from .cones import INACCURATE, OPTIMAL, SolverSettings
from .errors import InvalidArgument, SolverFailure
from .qcqp import QcqpInstance, QuadForm
from .relaxation import (
    MINUS,
    PLUS,
    AffineRow,
    ConeRow,
    ConstraintRow,
    ParabolicPair,
    RelaxationModel,
    VariableMap,
    check_anchor,
    lifted_row,
    parabolic_cone,
)
from .sequential import RunTrace, StopCriteria, run_sequential

logger = logging.getLogger(__name__)

SYSID = "sysid"

RICCATI_TOL = 1e-12
RICCATI_ITERATIONS = 10000
# Below this multiple of machine precision times ||P|| the iteration only moves rounding noise.
RICCATI_ROUNDING = 64 * np.finfo(float).eps
RICCATI_RESIDUAL_TOL = 1e-9
RESAMPLE_ATTEMPTS = 10


def riccati(A, B, tol=RICCATI_TOL, max_iter=RICCATI_ITERATIONS):
    # type: (np.ndarray, np.ndarray, float, int) -> np.ndarray
    """Fixed point of ``P = A'PA + I - A'PB (I + B'PB)^{-1} B'PA`` iterated from ``P = I``.

    Stops once ``||P_next - P||_F < tol``, or once the step is at the rounding level of
    ``P`` when that level exceeds ``tol``.
    """
    n, m = B.shape
    P = np.eye(n)
    for _ in range(max_iter):
        gain = np.linalg.solve(np.eye(m) + B.T @ P @ B, B.T @ P @ A)
        P_next = A.T @ P @ A + np.eye(n) - A.T @ P @ B @ gain
        P_next = (P_next + P_next.T) * 0.5
        if not np.all(np.isfinite(P_next)):
            break
        if np.linalg.norm(P_next - P) < max(tol, RICCATI_ROUNDING * np.linalg.norm(P_next)):
            return P_next
        P = P_next
    raise SolverFailure("Riccati iteration did not converge")


def riccati_residual(A, B, P):  # type: (np.ndarray, np.ndarray, np.ndarray) -> float
    n, m = B.shape
    inner = np.linalg.solve(np.eye(m) + B.T @ P @ B, B.T @ P @ A)
    return float(np.linalg.norm(A.T @ P @ A + np.eye(n) - P - A.T @ P @ B @ inner))


def lqr_gain(A, B, P):  # type: (np.ndarray, np.ndarray, np.ndarray) -> np.ndarray
    return -np.linalg.solve(np.eye(B.shape[1]) + B.T @ P @ B, B.T @ P @ A)


@dataclass(frozen=True, eq=False)
class LinearSystem(object):
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    F: np.ndarray
    seed: Optional[int] = None

    @classmethod
    def from_matrices(cls, A, B, seed=None):
        # type: (np.ndarray, np.ndarray, Optional[int]) -> LinearSystem
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise InvalidArgument("System matrices have shapes %s and %s" % (A.shape, B.shape))
        P = riccati(A, B)
        return cls(A, B, P, lqr_gain(A, B, P), seed)

    @property
    def n(self):  # type: () -> int
        return self.A.shape[0]

    @property
    def m(self):  # type: () -> int
        return self.B.shape[1]

    @property
    def closed_loop_radius(self):  # type: () -> float
        return float(np.max(np.abs(np.linalg.eigvals(self.A + self.B @ self.F))))

    @property
    def residual(self):  # type: () -> float
        return riccati_residual(self.A, self.B, self.P)


def generate_system(n, m, seed=None):  # type: (int, int, Optional[int]) -> LinearSystem
    """Random system with ``A - I`` uniform in ``[-0.25, 0.25]`` and standard normal ``B``.

    A draw is replaced by the draw of the next seed when its Riccati iteration fails, its
    Riccati residual is at least ``RICCATI_RESIDUAL_TOL`` or its closed loop is not stable.
    """
    if n < 1 or m < 1:
        raise InvalidArgument("System dimensions must be positive, got n=%r m=%r" % (n, m))
    for attempt in range(RESAMPLE_ATTEMPTS):
        draw_seed = None if seed is None else seed + attempt
        rng = np.random.default_rng(draw_seed)
        A = np.eye(n) + rng.uniform(-0.25, 0.25, size=(n, n))
        B = rng.standard_normal((n, m))
        try:
            system = LinearSystem.from_matrices(A, B, draw_seed)
        except (SolverFailure, np.linalg.LinAlgError):
            logger.warning("Riccati iteration failed for seed %s, resampling", draw_seed)
            continue
        residual = system.residual
        if residual >= RICCATI_RESIDUAL_TOL:
            logger.warning("Riccati residual %.2e for seed %s, resampling", residual, draw_seed)
            continue
        radius = system.closed_loop_radius
        if not radius < 1.0:
            logger.warning("Closed loop radius %.6f for seed %s, resampling", radius, draw_seed)
            continue
        return system
    raise SolverFailure("No stabilizable system after %d draws" % RESAMPLE_ATTEMPTS)


def sysid_seeds(seed):  # type: (Optional[int]) -> Tuple[int, int]
    """Seeds of two independent streams, one for the system draw and one for the simulation."""
    system_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    return int(system_seq.generate_state(1)[0]), int(noise_seq.generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class Trajectory(object):
    states: np.ndarray
    controls: np.ndarray
    known: Tuple[int, ...]
    sigma: float = 0.1

    @property
    def horizon(self):  # type: () -> int
        return self.states.shape[0]

    @property
    def n(self):  # type: () -> int
        return self.states.shape[1]

    @property
    def m(self):  # type: () -> int
        return self.controls.shape[1]

    @property
    def unknown(self):  # type: () -> Tuple[int, ...]
        known = set(self.known)
        return tuple(t for t in range(self.horizon) if t not in known)


def simulate(system, x1=None, horizon=81, sigma=0.1, known_stride=4, seed=None):
    # type: (LinearSystem, Optional[np.ndarray], int, float, int, Optional[int]) -> Trajectory
    """Closed-loop run with ``u[t] = F x[t] + w[t]``, ``w`` normal with deviation ``sigma``."""
    if horizon < 2:
        raise InvalidArgument("Horizon must be at least 2, got %r" % (horizon,))
    if known_stride < 1:
        raise InvalidArgument("Known stride must be positive, got %r" % (known_stride,))
    rng = np.random.default_rng(seed)
    n, m = system.n, system.m
    states = np.zeros((horizon, n))
    controls = np.zeros((horizon, m))
    states[0] = rng.uniform(0.5, 1.5, size=n) if x1 is None else np.asarray(x1, dtype=float)
    for t in range(horizon):
        noise = sigma * rng.standard_normal(m) if sigma > 0 else np.zeros(m)
        controls[t] = system.F @ states[t] + noise
        if t + 1 < horizon:
            states[t + 1] = system.A @ states[t] + system.B @ controls[t]
    return Trajectory(states, controls, tuple(range(0, horizon, known_stride)), sigma)


class SysidLayout(object):
    """Row positions of ``A``, the unknown states and ``B`` inside ``Y``."""

    def __init__(self, traj):  # type: (Trajectory) -> None
        self.n = traj.n
        self.m = traj.m
        self.unknown = traj.unknown
        self.state_rows = {t: self.n + i for i, t in enumerate(self.unknown)}  # type: Dict[int, int]
        self.b_offset = self.n + len(self.unknown)

    @property
    def rows(self):  # type: () -> int
        return self.b_offset + self.m

    @property
    def variable_count(self):  # type: () -> int
        return self.rows * self.n

    def b_row(self, j):  # type: (int) -> int
        return self.b_offset + j

    def compose(self, A, B, states):
        # type: (np.ndarray, np.ndarray, np.ndarray) -> np.ndarray
        Y = np.zeros((self.rows, self.n))
        Y[: self.n] = A
        for t, row in self.state_rows.items():
            Y[row] = states[t]
        Y[self.b_offset:] = np.asarray(B).T
        return Y



def build_sysid_instance(traj):  # type: (Trajectory) -> QcqpInstance
    """Feasibility QCQP whose solutions reproduce the trajectory's dynamics."""
    layout = SysidLayout(traj)
    N, n = layout.rows, layout.n
    equalities = []  # type: List[QuadForm]
    for t in range(traj.horizon - 1):
        for k in range(n):
            A = sparse.coo_matrix((N, N))
            B = np.zeros((N, n))
            c = 0.0
            if t in layout.state_rows:
                r = layout.state_rows[t]
                A = sparse.coo_matrix(([0.5, 0.5], ([k, r], [r, k])), shape=(N, N))
            else:
                B[k, :] += 0.5 * traj.states[t]
            for j in range(traj.m):
                B[layout.b_row(j), k] += 0.5 * traj.controls[t, j]
            if t + 1 in layout.state_rows:
                B[layout.state_rows[t + 1], k] -= 0.5
            else:
                c = -float(traj.states[t + 1, k])
            equalities.append(QuadForm(A, B, c, n))
    objective = QuadForm(sparse.coo_matrix((N, N)), np.zeros((N, n)), 0.0, n)
    return QcqpInstance(objective, equalities, name="sysid")


def _dynamics_index(layout, t, k):  # type: (SysidLayout, int, int) -> int
    return 1 + t * layout.n + k


def _bilinear_cone(traj, layout, variables, t, k, sign):
    # type: (Trajectory, SysidLayout, VariableMap, int, int, int) -> ConeRow
    """``abar_k + xbar_t +/- 2 z >= ||a_k +/- x_t||^2`` with ``z = x[t+1]_k - (B u[t])_k``.

    ``z`` stands in for the bilinear term ``a_k' x_t`` of the dynamics row.
    """
    r = layout.state_rows[t]
    terms = {variables.x(k, k): 1.0, variables.x(r, r): 1.0}
    constant = 0.0
    if t + 1 in layout.state_rows:
        terms[variables.y(layout.state_rows[t + 1], k)] = 2.0 * sign
    else:
        constant = 2.0 * sign * float(traj.states[t + 1, k])
    for j in range(layout.m):
        pos = variables.y(layout.b_row(j), k)
        terms[pos] = terms.get(pos, 0.0) - 2.0 * sign * float(traj.controls[t, j])
    v = [
        AffineRow.from_terms({variables.y(k, c): 1.0, variables.y(r, c): float(sign)})
        for c in range(layout.n)
    ]
    return ConeRow(AffineRow.from_terms(terms, constant), None, v, ParabolicPair(k, r, sign))


def _sysid_objective(layout, variables, anchor, eta):
    # type: (SysidLayout, VariableMap, Optional[np.ndarray], float) -> AffineRow
    """``eta (sum abar + sum xbar - 2 <anchor, Y> + ||anchor||^2)`` over the ``A`` and state rows."""
    terms = {}  # type: Dict[int, float]
    constant = 0.0
    if eta > 0:
        for r in range(layout.b_offset):
            terms[variables.x(r, r)] = eta
            for c in range(layout.n):
                terms[variables.y(r, c)] = -2.0 * eta * anchor[r, c]
        constant = eta * float(np.sum(anchor[: layout.b_offset] ** 2))
    return AffineRow.from_terms(terms, constant)


def build_sysid_relaxation(traj, anchor=None, eta=0.0, inst=None):
    # type: (Trajectory, Optional[np.ndarray], float, Optional[QcqpInstance]) -> RelaxationModel
    """Penalized relaxation of the dynamics with one auxiliary per row of ``A`` and per unknown state.

    The auxiliaries ``abar_k`` and ``xbar_t`` are the diagonal entries of ``X`` for the rows
    of ``A`` and of the unknown states; no off-diagonal ``X`` entry is a variable. Every
    bilinear dynamics row ``(t, k)`` is replaced by the pair of cones of
    :func:`_bilinear_cone`, and each auxiliary has its diagonal cone. Dynamics rows from a
    known state are linear equalities. ``B`` enters the rows linearly and is not penalized.
    """
    inst = inst or build_sysid_instance(traj)
    layout = SysidLayout(traj)
    if inst.n != layout.rows or inst.m != layout.n:
        raise InvalidArgument(
            "Instance is %dx%d, the trajectory needs %dx%d" % (inst.n, inst.m, layout.rows, layout.n)
        )
    anchor = check_anchor(inst, anchor, eta)
    variables = VariableMap(layout.rows, layout.n, ((r, r) for r in range(layout.b_offset)))
    equality_rows = []  # type: List[ConstraintRow]
    cones = []  # type: List[ConeRow]
    for t in range(traj.horizon - 1):
        if t in layout.state_rows:
            for k in range(layout.n):
                cones.append(_bilinear_cone(traj, layout, variables, t, k, PLUS))
                cones.append(_bilinear_cone(traj, layout, variables, t, k, MINUS))
        else:
            for k in range(layout.n):
                index = _dynamics_index(layout, t, k)
                equality_rows.append(ConstraintRow(index, lifted_row(inst.form(index), variables)))
    diagonal = [ParabolicPair(r, r) for r in range(layout.b_offset)]
    cones.extend(parabolic_cone(pair, variables) for pair in diagonal)
    logger.debug(
        "sysid model: %d variables, %d equalities, %d cones, eta=%g",
        variables.size, len(equality_rows), len(cones), eta,
    )
    return RelaxationModel(
        inst,
        variables,
        _sysid_objective(layout, variables, anchor, eta),
        equality_rows,
        (),
        cones,
        pairs=diagonal + [cone.origin for cone in cones[: -len(diagonal)]],
        anchor=anchor,
        eta=eta,
        kind=SYSID,
    )


def true_point(traj, system):  # type: (Trajectory, LinearSystem) -> np.ndarray
    return SysidLayout(traj).compose(system.A, system.B, traj.states)


def initial_point(traj):  # type: (Trajectory) -> np.ndarray
    """``A = I`` and every unknown state zero. ``B`` is zero but never penalized."""
    layout = SysidLayout(traj)
    return layout.compose(np.eye(traj.n), np.zeros((traj.n, traj.m)), np.zeros_like(traj.states))


def decode_solution(Y, traj):
    # type: (np.ndarray, Trajectory) -> Tuple[np.ndarray, np.ndarray, np.ndarray]
    """``(A, B, states)`` with the known states copied from the trajectory."""
    layout = SysidLayout(traj)
    Y = np.asarray(Y, dtype=float)
    states = traj.states.copy()
    for t, row in layout.state_rows.items():
        states[t] = Y[row]
    return Y[: layout.n].copy(), Y[layout.b_offset:].T.copy(), states


def recovery_error(A, B, system):  # type: (np.ndarray, np.ndarray, LinearSystem) -> float
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != system.A.shape or B.shape != system.B.shape:
        raise InvalidArgument("Estimated matrices do not match the system dimensions")
    n, m = system.n, system.m
    return float(
        np.linalg.norm(A - system.A) / n + np.linalg.norm(B - system.B) / np.sqrt(n * m)
    )


def error_curve(trace, traj, system):
    # type: (RunTrace, Trajectory, LinearSystem) -> List[Tuple[int, float]]
    """Recovery error per round, up to the first round without a usable solution."""
    curve = []
    for record in trace.rounds:
        if record.status not in (OPTIMAL, INACCURATE):
            break
        A, B, _ = decode_solution(record.Y, traj)
        curve.append((record.round, recovery_error(A, B, system)))
    return curve


@dataclass
class SysidResult(object):
    system: LinearSystem
    trajectory: Trajectory
    trace: RunTrace
    errors: List[Tuple[int, float]]

    @property
    def final_error(self):  # type: () -> Optional[float]
        return self.errors[-1][1] if self.errors else None

    @property
    def max_round_time(self):  # type: () -> float
        return max((r.time_s for r in self.trace.rounds), default=0.0)


def identify(traj, rounds=50, eta=1.0, settings=None):
    # type: (Trajectory, int, float, Optional[SolverSettings]) -> RunTrace
    """Sequential rounds of :func:`build_sysid_relaxation` from :func:`initial_point`."""
    inst = build_sysid_instance(traj)

    def builder(target, anchor, round_eta):
        return build_sysid_relaxation(traj, anchor, round_eta, target)

    return run_sequential(
        inst,
        initial_point(traj),
        eta,
        StopCriteria(max_rounds=rounds, early_stop=False),
        settings=settings,
        builder=builder,
    )


def run_sysid(
    n=4,  # type: int
    m=3,  # type: int
    horizon=81,  # type: int
    known_stride=4,  # type: int
    sigma=0.1,  # type: float
    seed=0,  # type: int
    rounds=50,  # type: int
    eta=1.0,  # type: float
    settings=None,  # type: Optional[SolverSettings]
):
    # type: (...) -> SysidResult
    """Generate, simulate and identify one system with a fixed number of rounds.

    The system and the simulation draw from independent streams derived from ``seed``.
    """
    system_seed, noise_seed = sysid_seeds(seed)
    system = generate_system(n, m, system_seed)
    traj = simulate(
        system, horizon=horizon, sigma=sigma, known_stride=known_stride, seed=noise_seed
    )
    trace = identify(traj, rounds, eta, settings)
    return SysidResult(system, traj, trace, error_curve(trace, traj, system))


def batch(seeds, **kwargs):  # type: (Sequence[int], object) -> List[SysidResult]
    return [run_sysid(seed=seed, **kwargs) for seed in seeds]


def dare_reference(system):  # type: (LinearSystem) -> np.ndarray
    """Riccati solution from ``scipy.linalg.solve_discrete_are`` with unit weights."""
    return linalg.solve_discrete_are(system.A, system.B, np.eye(system.n), np.eye(system.m))
