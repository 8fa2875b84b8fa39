"""Standard conic form of relaxation models, solver dispatch and dual extraction.

A :class:`ConeProgram` reads::

    minimize    c'x + c0
    subject to  A x = b
                G x + s = h,   s in R_+^l x Q^{q_1} x ... x Q^{q_r}

Lifted equalities become rows of ``A``, lifted inequalities and cuts the first ``l`` rows
of ``G`` and each rotated cone ``||v||^2 <= t u`` a second-order block ``(t + u, t - u, 2v)``.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .errors import InvalidArgument, SolverFailure
from .relaxation import ConeRow, RelaxationModel

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
NUMERIC_FAILURE = "numeric_failure"
# Stalled within a small factor of the tolerances; never reported as OPTIMAL.
INACCURATE = "inaccurate"
STATUSES = (OPTIMAL, INFEASIBLE, UNBOUNDED, MAX_ITER, NUMERIC_FAILURE, INACCURATE)

DUAL_TOL = 1e-7


@dataclass(frozen=True)
class SolverSettings(object):
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    max_iter: int = 200
    solver: str = "reference"

    def __post_init__(self):
        if not (self.tol_feas > 0 and self.tol_gap > 0):
            raise InvalidArgument("Solver tolerances must be positive")
        if int(self.max_iter) < 1:
            raise InvalidArgument("max_iter must be at least 1")


@dataclass(frozen=True, eq=False)
class ConeProgram(object):
    c: np.ndarray
    c0: float
    A: sparse.csr_matrix
    b: np.ndarray
    G: sparse.csr_matrix
    h: np.ndarray
    l: int
    q: Tuple[int, ...]
    equality_ids: Tuple[int, ...] = ()
    inequality_ids: Tuple[Optional[int], ...] = ()

    @property
    def size(self):  # type: () -> int
        return self.c.shape[0]

    @property
    def dims(self):  # type: () -> Dict[str, object]
        return {"l": self.l, "q": list(self.q), "s": []}

    def cone_blocks(self):  # type: () -> List[slice]
        blocks = []
        start = self.l
        for size in self.q:
            blocks.append(slice(start, start + size))
            start += size
        return blocks

    def row_residuals(self, x):  # type: (np.ndarray) -> np.ndarray
        """Residuals in the order of :meth:`RelaxationModel.row_residuals`."""
        s = self.h - self.G @ x
        out = [self.A @ x - self.b, s[: self.l]]
        out.append(
            np.array([(s[blk][0] ** 2 - np.dot(s[blk][1:], s[blk][1:])) / 4.0
                      for blk in self.cone_blocks()])
        )
        return np.concatenate(out)


@dataclass
class ConeSolution(object):
    status: str
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    primal_objective: float
    dual_objective: float
    iterations: int = 0
    solve_time: float = 0.0
    solver: str = "reference"
    info: Dict[str, float] = field(default_factory=dict)

    @property
    def optimal(self):  # type: () -> bool
        return self.status == OPTIMAL

    @property
    def usable(self):  # type: () -> bool
        """Optimal, or stalled close enough to the tolerances to use the point."""
        return self.status in (OPTIMAL, INACCURATE)


def _cone_triplets(cone, offset):
    # type: (ConeRow, int) -> Tuple[List[int], List[int], List[float], List[float]]
    rows, cols, vals = [], [], []  # type: List[int], List[int], List[float]
    t, u = cone.t, cone.u
    u_const = 1.0 if u is None else u.constant
    h = [t.constant + u_const, t.constant - u_const]
    for r, sign in ((0, 1.0), (1, -1.0)):
        rows.extend([offset + r] * len(t.index))
        cols.extend(t.index.tolist())
        vals.extend((-t.value).tolist())
        if u is not None:
            rows.extend([offset + r] * len(u.index))
            cols.extend(u.index.tolist())
            vals.extend((-sign * u.value).tolist())
    for r, v in enumerate(cone.v):
        rows.extend([offset + 2 + r] * len(v.index))
        cols.extend(v.index.tolist())
        vals.extend((-2.0 * v.value).tolist())
        h.append(2.0 * v.constant)
    return rows, cols, vals, h


def encode_cone_program(model):  # type: (RelaxationModel) -> ConeProgram
    cached = getattr(model, "_program", None)
    if cached is not None:
        return cached
    size = model.variables.size
    c = np.zeros(size)
    c[model.objective.index] = model.objective.value

    def stack(rows, sign):
        r, cidx, v = [], [], []
        for k, row in enumerate(rows):
            r.extend([k] * len(row.index))
            cidx.extend(row.index.tolist())
            v.extend((sign * row.value).tolist())
        return r, cidx, v

    eq = [row.row for row in model.equality_rows]
    r, cidx, v = stack(eq, 1.0)
    A = sparse.csr_matrix((v, (r, cidx)), shape=(len(eq), size))
    b = np.array([-row.constant for row in eq])

    ineq = [row.row for row in model.inequality_rows]
    g_rows, g_cols, g_vals = stack(ineq, 1.0)
    h = [-row.constant for row in ineq]
    offset = len(ineq)
    sizes = []
    for cone in model.cones:
        rr, cc, vv, hh = _cone_triplets(cone, offset)
        g_rows.extend(rr)
        g_cols.extend(cc)
        g_vals.extend(vv)
        h.extend(hh)
        sizes.append(len(hh))
        offset += len(hh)
    G = sparse.csr_matrix((g_vals, (g_rows, g_cols)), shape=(offset, size))
    program = ConeProgram(
        c=c,
        c0=model.objective.constant,
        A=A,
        b=b,
        G=G,
        h=np.array(h, dtype=float),
        l=len(ineq),
        q=tuple(sizes),
        equality_ids=tuple(row.k for row in model.equality_rows),
        inequality_ids=tuple(row.k for row in model.inequality_rows),
    )
    model._program = program
    return program


SolveFunction = Callable[[ConeProgram, SolverSettings], ConeSolution]
SOLVERS = {}  # type: Dict[str, SolveFunction]


def register_solver(name):  # type: (str) -> Callable[[SolveFunction], SolveFunction]
    def decorate(function):  # type: (SolveFunction) -> SolveFunction
        SOLVERS[name] = function
        return function

    return decorate


def solve_cone_program(prog, settings=None):
    # type: (ConeProgram, Optional[SolverSettings]) -> ConeSolution
    settings = settings or SolverSettings()
    if settings.solver not in SOLVERS:
        raise InvalidArgument(
            "Unknown solver '%s', choose one of %s" % (settings.solver, ", ".join(sorted(SOLVERS)))
        )
    start = time.time()
    solution = SOLVERS[settings.solver](prog, settings)
    solution.solve_time = time.time() - start
    logger.debug(
        "%s solver: %s after %d iterations in %.3fs (objective %.10g)",
        settings.solver,
        solution.status,
        solution.iterations,
        solution.solve_time,
        solution.primal_objective,
    )
    return solution


def solve_model(model, settings=None):
    # type: (RelaxationModel, Optional[SolverSettings]) -> ConeSolution
    return solve_cone_program(encode_cone_program(model), settings)


def extract_duals(sol, model, dual_tol=DUAL_TOL):
    # type: (ConeSolution, RelaxationModel, float) -> Tuple[Dict[int, float], np.ndarray]
    """Constraint multipliers and ``eta I + A0 + sum_{k in B} tau_k A_k``.

    Signs follow the Lagrangian ``q0 + penalty + sum_k tau_k q_k``. ``B`` holds every
    equality and every inequality whose multiplier exceeds ``dual_tol`` in magnitude.
    Rows without a constraint index (box cuts) are left out.
    """
    if not sol.usable:
        raise SolverFailure("Duals are unavailable for status '%s'" % sol.status, sol.status)
    prog = encode_cone_program(model)
    inst = model.instance
    tau = {}  # type: Dict[int, float]
    for k, value in zip(prog.equality_ids, sol.y):
        tau[k] = float(value)
    for k, value in zip(prog.inequality_ids, sol.z[: prog.l]):
        if k is not None:
            tau[k] = float(value)
    lam = model.eta * np.eye(inst.n) + inst.objective.dense_A()
    for k, value in tau.items():
        if inst.is_equality(k) or abs(value) > dual_tol:
            if not inst.form(k).is_linear:
                lam = lam + value * inst.form(k).dense_A()
    return tau, lam


@register_solver("reference")
def _reference_solve(prog, settings):  # type: (ConeProgram, SolverSettings) -> ConeSolution
    from .interior_point import solve

    return solve(prog, settings)


@register_solver("external")
def cvxopt_solve(prog, settings):  # type: (ConeProgram, SolverSettings) -> ConeSolution
    """Adapter for ``cvxopt.solvers.conelp`` (installed with the ``external`` extra)."""
    try:
        from cvxopt import matrix, solvers, spmatrix
    except ImportError:
        raise SolverFailure(
            "The external solver needs cvxopt: pip install parabolic-qcqp[external]"
        )

    def to_sp(M):
        coo = M.tocoo()
        return spmatrix(coo.data.tolist(), coo.row.tolist(), coo.col.tolist(), size=M.shape)

    options = {
        "show_progress": False,
        "abstol": settings.tol_gap,
        "reltol": settings.tol_gap,
        "feastol": settings.tol_feas,
        "maxiters": int(settings.max_iter),
    }
    args = [matrix(prog.c), to_sp(prog.G), matrix(prog.h), prog.dims]
    if prog.A.shape[0]:
        args += [to_sp(prog.A), matrix(prog.b)]
    result = solvers.conelp(*args, options=options)
    status = {
        "optimal": OPTIMAL,
        "primal infeasible": INFEASIBLE,
        "dual infeasible": UNBOUNDED,
    }.get(result["status"], MAX_ITER)

    def vec(key, n):
        value = result.get(key)
        return np.zeros(n) if value is None else np.array(value).ravel()

    x = vec("x", prog.size)
    primal = result.get("primal objective")
    dual = result.get("dual objective")
    return ConeSolution(
        status=status,
        x=x,
        y=vec("y", prog.A.shape[0]),
        z=vec("z", prog.G.shape[0]),
        s=vec("s", prog.G.shape[0]),
        primal_objective=(float(primal) if primal is not None else float("nan")) + prog.c0,
        dual_objective=(float(dual) if dual is not None else float("nan")) + prog.c0,
        iterations=int(result.get("iterations", 0)),
        solver="external",
    )
