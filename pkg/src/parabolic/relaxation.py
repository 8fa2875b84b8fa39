"""Parabolic relaxation models.

Every quadratic form ``q_k`` is lifted to ``tr(A_k X) + 2 tr(B_k' Y) + c_k`` over a flat
decision vector holding the entries of ``Y`` followed by the indexed entries of ``X``.
Each :class:`ParabolicPair` adds one rotated-cone row::

    X_ii + X_jj +/- 2 X_ij >= || (e_i +/- e_j)' Y ||^2

with the upper signs for ``PLUS`` pairs and the lower ones for ``MINUS`` pairs.

Indices are 0-based throughout.
"""
import logging
from collections import namedtuple
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InternalError, InvalidArgument, Unsupported
from .qcqp import LiftedPoint, QcqpInstance, QuadForm, as_matrix

logger = logging.getLogger(__name__)

FULL = "full"
SPARSITY = "sparsity"
POLICIES = (FULL, SPARSITY)
FULL_POLICY_LIMIT = 64

PLUS = 1
MINUS = -1

PARABOLIC = "parabolic"
BASELINE = "baseline"


class ParabolicPair(namedtuple("ParabolicPair", ["i", "j", "sign"])):
    __slots__ = ()

    def __new__(cls, i, j, sign=PLUS):
        if i > j:
            i, j = j, i
        if sign not in (PLUS, MINUS):
            raise InvalidArgument("Pair sign must be +1 or -1, got %r" % (sign,))
        if i == j and sign == MINUS:
            raise InvalidArgument("Diagonal pair (%d, %d) has no minus row" % (i, j))
        return super(ParabolicPair, cls).__new__(cls, int(i), int(j), sign)

    @property
    def diagonal(self):  # type: () -> bool
        return self.i == self.j

    def __str__(self):
        return "(%d,%d,%s)" % (self.i + 1, self.j + 1, "+" if self.sign == PLUS else "-")


class AffineRow(namedtuple("AffineRow", ["index", "value", "constant"])):
    """``value . x[index] + constant`` over the flat decision vector."""

    __slots__ = ()

    @classmethod
    def from_terms(cls, terms, constant=0.0):
        # type: (Dict[int, float], float) -> AffineRow
        keys = sorted(k for k, v in terms.items() if v != 0.0)
        return cls(
            np.array(keys, dtype=np.int64),
            np.array([terms[k] for k in keys], dtype=float),
            float(constant),
        )

    def evaluate(self, x):  # type: (np.ndarray) -> float
        return float(np.dot(self.value, x[self.index])) + self.constant


ConeRow = namedtuple("ConeRow", ["t", "u", "v", "origin"])
ConeRow.__doc__ = """Rotated cone ``||v||^2 <= t * u`` with ``u = None`` meaning the constant 1."""

ConstraintRow = namedtuple("ConstraintRow", ["k", "row"])


class VariableMap(object):
    """Flat positions of the ``Y`` entries (row-major) and the indexed ``X`` entries."""

    def __init__(self, n, m, x_entries):
        # type: (int, int, Iterable[Tuple[int, int]]) -> None
        self.n = n
        self.m = m
        self._x = {}  # type: Dict[Tuple[int, int], int]
        for i, j in sorted(set((min(a, b), max(a, b)) for a, b in x_entries)):
            self._x[(i, j)] = n * m + len(self._x)

    @property
    def size(self):  # type: () -> int
        return self.n * self.m + len(self._x)

    @property
    def x_entries(self):  # type: () -> List[Tuple[int, int]]
        return list(self._x)

    def y(self, i, c=0):  # type: (int, int) -> int
        return i * self.m + c

    def x(self, i, j):  # type: (int, int) -> int
        key = (i, j) if i <= j else (j, i)
        try:
            return self._x[key]
        except KeyError:
            raise InternalError("X entry (%d, %d) is not a decision variable" % key)

    def has_x(self, i, j):  # type: (int, int) -> bool
        return ((i, j) if i <= j else (j, i)) in self._x

    def assemble(self, Y, X):  # type: (np.ndarray, np.ndarray) -> np.ndarray
        x = np.empty(self.size)
        x[: self.n * self.m] = np.asarray(Y, dtype=float).reshape(-1)
        for (i, j), pos in self._x.items():
            x[pos] = X[i, j]
        return x

    def decode(self, x):  # type: (np.ndarray) -> LiftedPoint
        """Split a decision vector; X entries that are not variables come from ``Y Y'``."""
        Y = np.asarray(x[: self.n * self.m], dtype=float).reshape(self.n, self.m)
        X = Y @ Y.T
        for (i, j), pos in self._x.items():
            X[i, j] = X[j, i] = x[pos]
        return LiftedPoint(Y, X)


class RelaxationModel(object):
    """A convex relaxation ready to be encoded as a cone program."""

    def __init__(
        self,
        instance,  # type: QcqpInstance
        variables,  # type: VariableMap
        objective,  # type: AffineRow
        equality_rows,  # type: Sequence[ConstraintRow]
        inequality_rows,  # type: Sequence[ConstraintRow]
        cones,  # type: Sequence[ConeRow]
        pairs=(),  # type: Sequence[ParabolicPair]
        anchor=None,  # type: Optional[np.ndarray]
        eta=0.0,  # type: float
        kind=PARABOLIC,  # type: str
        box_cuts=False,  # type: bool
    ):
        self.instance = instance
        self.variables = variables
        self.objective = objective
        self.equality_rows = tuple(equality_rows)
        self.inequality_rows = tuple(inequality_rows)
        self.cones = tuple(cones)
        self.pairs = tuple(pairs)
        self.anchor = anchor
        self.eta = eta
        self.kind = kind
        self.box_cuts = box_cuts

    @property
    def n(self):  # type: () -> int
        return self.instance.n

    @property
    def m(self):  # type: () -> int
        return self.instance.m

    def assemble(self, Y, X):  # type: (np.ndarray, np.ndarray) -> np.ndarray
        return self.variables.assemble(as_matrix(Y, self.n, self.m), X)

    def decode(self, x):  # type: (np.ndarray) -> LiftedPoint
        return self.variables.decode(x)

    def objective_value(self, Y, X):  # type: (np.ndarray, np.ndarray) -> float
        return self.objective.evaluate(self.assemble(Y, X))

    def row_residuals(self, Y, X):  # type: (np.ndarray, np.ndarray) -> np.ndarray
        """Residual of every row, in encoding order.

        Equalities give ``q_k``, inequalities give ``-q_k`` (feasible when >= 0) and cone rows
        give ``t * u - ||v||^2``.
        """
        x = self.assemble(Y, X)
        out = [row.row.evaluate(x) for row in self.equality_rows]
        out.extend(-row.row.evaluate(x) for row in self.inequality_rows)
        for cone in self.cones:
            u = 1.0 if cone.u is None else cone.u.evaluate(x)
            v = np.array([r.evaluate(x) for r in cone.v])
            out.append(cone.t.evaluate(x) * u - float(np.dot(v, v)))
        return np.array(out)

    def is_feasible(self, Y, X, tol=1e-9):  # type: (np.ndarray, np.ndarray, float) -> bool
        res = self.row_residuals(Y, X)
        n_eq = len(self.equality_rows)
        return bool(np.all(np.abs(res[:n_eq]) <= tol) and np.all(res[n_eq:] >= -tol))

    def __repr__(self):
        return "<RelaxationModel %s vars=%d eq=%d ineq=%d cones=%d eta=%g>" % (
            self.kind,
            self.variables.size,
            len(self.equality_rows),
            len(self.inequality_rows),
            len(self.cones),
            self.eta,
        )


def default_policy(n):  # type: (int) -> str
    return FULL if n <= FULL_POLICY_LIMIT else SPARSITY


def _upper_nonzeros(form):  # type: (QuadForm) -> Iterable[Tuple[int, int]]
    return ((i, j) for i, j, _ in form.entries())


def select_pairs(inst, policy=None):
    # type: (QcqpInstance, Optional[str]) -> List[ParabolicPair]
    policy = policy or default_policy(inst.n)
    if policy not in POLICIES:
        raise InvalidArgument("Unknown pair policy '%s'" % policy)
    pairs = [ParabolicPair(i, i) for i in range(inst.n)]
    if policy == FULL:
        off = [(i, j) for i in range(inst.n) for j in range(i + 1, inst.n)]
    else:
        pattern = set()
        for form in inst.forms():
            pattern.update((i, j) for i, j in _upper_nonzeros(form) if i != j)
        off = sorted(pattern)
    for i, j in off:
        pairs.append(ParabolicPair(i, j, MINUS))
        pairs.append(ParabolicPair(i, j, PLUS))
    return pairs


def _lifted_terms(form, variables):
    # type: (QuadForm, VariableMap) -> Dict[int, float]
    terms = {}  # type: Dict[int, float]
    for i, j, a in form.entries():
        pos = variables.x(i, j)
        terms[pos] = terms.get(pos, 0.0) + (a if i == j else 2.0 * a)
    B = form.dense_B()
    for i, c in zip(*np.nonzero(B)):
        pos = variables.y(int(i), int(c))
        terms[pos] = terms.get(pos, 0.0) + 2.0 * B[i, c]
    return terms


def lifted_row(form, variables):  # type: (QuadForm, VariableMap) -> AffineRow
    return AffineRow.from_terms(_lifted_terms(form, variables), form.c)


def _y_row(variables, i, c, sign_j=None, j=None):
    # type: (VariableMap, int, int, Optional[int], Optional[int]) -> AffineRow
    terms = {variables.y(i, c): 1.0}
    if j is not None and j != i:
        terms[variables.y(j, c)] = float(sign_j)
    return AffineRow.from_terms(terms)


def parabolic_cone(pair, variables):  # type: (ParabolicPair, VariableMap) -> ConeRow
    i, j, sign = pair
    if pair.diagonal:
        t = AffineRow.from_terms({variables.x(i, i): 1.0})
        v = [_y_row(variables, i, c) for c in range(variables.m)]
    else:
        t = AffineRow.from_terms(
            {variables.x(i, i): 1.0, variables.x(j, j): 1.0, variables.x(i, j): 2.0 * sign}
        )
        v = [_y_row(variables, i, c, sign, j) for c in range(variables.m)]
    return ConeRow(t, None, v, pair)


def _touched_x(inst, extra=()):
    # type: (QcqpInstance, Iterable[Tuple[int, int]]) -> List[Tuple[int, int]]
    entries = set((i, i) for i in range(inst.n))
    for form in inst.forms():
        entries.update(_upper_nonzeros(form))
    entries.update(extra)
    return sorted(entries)


def _penalized_objective(inst, variables, anchor, eta):
    # type: (QcqpInstance, VariableMap, Optional[np.ndarray], float) -> AffineRow
    terms = _lifted_terms(inst.objective, variables)
    constant = inst.objective.c
    if eta > 0:
        for i in range(inst.n):
            pos = variables.x(i, i)
            terms[pos] = terms.get(pos, 0.0) + eta
        for i in range(inst.n):
            for c in range(inst.m):
                pos = variables.y(i, c)
                terms[pos] = terms.get(pos, 0.0) - 2.0 * eta * anchor[i, c]
        constant += eta * float(np.sum(anchor * anchor))
    return AffineRow.from_terms(terms, constant)


def _constraint_rows(inst, variables):
    # type: (QcqpInstance, VariableMap) -> Tuple[List[ConstraintRow], List[ConstraintRow]]
    eq = [ConstraintRow(k, lifted_row(inst.form(k), variables)) for k in inst.equality_indices]
    ineq = [
        ConstraintRow(k, lifted_row(inst.form(k), variables)) for k in inst.inequality_indices
    ]
    return eq, ineq


def check_anchor(inst, anchor, eta):
    # type: (QcqpInstance, Optional[np.ndarray], float) -> Optional[np.ndarray]
    if not np.isfinite(eta) or eta < 0:
        raise InvalidArgument("Penalty weight must be finite and >= 0, got %r" % (eta,))
    if anchor is None:
        if eta > 0:
            raise InvalidArgument("A positive penalty weight needs an anchor point")
        return None
    return as_matrix(anchor, inst.n, inst.m)


def build_parabolic_model(inst, pairs=None, anchor=None, eta=0.0):
    # type: (QcqpInstance, Optional[Iterable[ParabolicPair]], Optional[np.ndarray], float) -> RelaxationModel
    """Lifted constraints, parabolic rows and the penalized objective.

    The objective is ``q0(Y, X) + eta * tr(X - 2 anchor Y' + anchor anchor')``. Diagonal pairs
    are always present even when ``pairs`` omits them.
    """
    anchor = check_anchor(inst, anchor, eta)
    chosen = list(dict.fromkeys(
        [ParabolicPair(i, i) for i in range(inst.n)]
        + list(select_pairs(inst) if pairs is None else pairs)
    ))
    for pair in chosen:
        if pair.j >= inst.n:
            raise InvalidArgument("Pair %s is outside n = %d" % (pair, inst.n))
    variables = VariableMap(
        inst.n, inst.m, _touched_x(inst, ((p.i, p.j) for p in chosen))
    )
    eq, ineq = _constraint_rows(inst, variables)
    cones = [parabolic_cone(pair, variables) for pair in chosen]
    logger.debug(
        "parabolic model: %d variables, %d pairs, eta=%g", variables.size, len(chosen), eta
    )
    return RelaxationModel(
        inst,
        variables,
        _penalized_objective(inst, variables, anchor, eta),
        eq,
        ineq,
        cones,
        pairs=chosen,
        anchor=anchor,
        eta=eta,
    )


def box_cut_rows(variables, k, lower, upper):
    # type: (VariableMap, int, float, float) -> List[AffineRow]
    """Valid inequalities for ``lower <= x_k <= upper`` written as ``row <= 0``."""
    xk = variables.x(k, k)
    yk = variables.y(k)
    rows = []
    if np.isfinite(lower) and np.isfinite(upper):
        rows.append(AffineRow.from_terms({xk: 1.0, yk: -(lower + upper)}, lower * upper))
    if np.isfinite(upper):
        rows.append(AffineRow.from_terms({xk: -1.0, yk: 2.0 * upper}, -upper * upper))
    if np.isfinite(lower):
        rows.append(AffineRow.from_terms({xk: -1.0, yk: 2.0 * lower}, -lower * lower))
    return rows


def add_box_cuts(model, lower=None, upper=None):
    # type: (RelaxationModel, Optional[Sequence[float]], Optional[Sequence[float]]) -> RelaxationModel
    """New model with the three bound-product cuts per variable.

    Bounds default to the instance bounds. A cut needing an infinite bound is skipped.
    """
    if model.m != 1:
        raise Unsupported("Box cuts need m = 1, got m = %d" % model.m)
    if lower is None or upper is None:
        if model.instance.bounds is None:
            raise InvalidArgument("Box cuts need bounds and the instance has none")
        lower, upper = model.instance.bounds
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != (model.n,) or upper.shape != (model.n,):
        raise InvalidArgument("Bounds must have length n = %d" % model.n)
    rows = list(model.inequality_rows)
    skipped = 0
    for k in range(model.n):
        cuts = box_cut_rows(model.variables, k, lower[k], upper[k])
        skipped += 3 - len(cuts)
        rows.extend(ConstraintRow(None, row) for row in cuts)
    if skipped:
        logger.warning("Skipped %d box cuts with an infinite bound", skipped)
    return RelaxationModel(
        model.instance,
        model.variables,
        model.objective,
        model.equality_rows,
        rows,
        model.cones,
        pairs=model.pairs,
        anchor=model.anchor,
        eta=model.eta,
        kind=model.kind,
        box_cuts=True,
    )


def build_socp_baseline(inst, pairs=None):
    # type: (QcqpInstance, Optional[Iterable[ParabolicPair]]) -> RelaxationModel
    """Unpenalized 2x2-minor relaxation: ``X_ii >= ||Y_i||^2`` and ``X_ij^2 <= X_ii X_jj``.

    One minor row is generated per distinct off-diagonal ``(i, j)`` of the selected pairs.
    """
    chosen = list(select_pairs(inst) if pairs is None else pairs)
    off = sorted(set((p.i, p.j) for p in chosen if not p.diagonal))
    variables = VariableMap(inst.n, inst.m, _touched_x(inst, off))
    eq, ineq = _constraint_rows(inst, variables)
    cones = [parabolic_cone(ParabolicPair(i, i), variables) for i in range(inst.n)]
    for i, j in off:
        cones.append(
            ConeRow(
                AffineRow.from_terms({variables.x(i, i): 1.0}),
                AffineRow.from_terms({variables.x(j, j): 1.0}),
                [AffineRow.from_terms({variables.x(i, j): 1.0})],
                (i, j),
            )
        )
    return RelaxationModel(
        inst,
        variables,
        _penalized_objective(inst, variables, None, 0.0),
        eq,
        ineq,
        cones,
        pairs=[ParabolicPair(i, i) for i in range(inst.n)],
        kind=BASELINE,
    )
