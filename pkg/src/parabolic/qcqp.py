"""Quadratic forms, QCQP instances and lifted points.

A QCQP over a matrix variable ``Y`` (``n`` rows, ``m`` columns) minimizes ``q_0(Y)``
subject to ``q_k(Y) = 0`` for ``k`` in the equality set and ``q_k(Y) <= 0`` for ``k``
in the inequality set, where every ``q_k(Y) = tr(Y' A_k Y) + 2 tr(B_k' Y) + c_k``.

Index ``0`` is the objective, equalities follow as ``1 .. |E|`` and inequalities as
``|E| + 1 .. |E| + |I|``. The numbering never changes after construction.
"""
from functools import cached_property
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from .errors import InvalidArgument, SchemaError

DENSE_LIMIT = 256
SYMMETRY_TOL = 1e-12

Matrix = Union[np.ndarray, sparse.spmatrix]


def _is_sparse(M):  # type: (Matrix) -> bool
    return sparse.issparse(M)


def _dense(M):  # type: (Matrix) -> np.ndarray
    return M.toarray() if _is_sparse(M) else np.asarray(M)


def _max_abs(M):  # type: (Matrix) -> float
    if _is_sparse(M):
        return float(abs(M).max()) if M.nnz else 0.0
    return float(np.max(np.abs(M))) if M.size else 0.0


def _all_finite(M):  # type: (Matrix) -> bool
    data = M.data if _is_sparse(M) else M
    return bool(np.all(np.isfinite(data)))


def _symmetrized(A, n):  # type: (Matrix, int) -> Matrix
    if A.shape != (n, n):
        raise InvalidArgument("Quadratic matrix must be %dx%d, got %s" % (n, n, A.shape))
    if not _all_finite(A):
        raise InvalidArgument("Quadratic matrix has non-finite entries")
    if _is_sparse(A):
        A = sparse.csr_matrix(A, dtype=float)
    else:
        A = np.array(A, dtype=float)
    skew = _max_abs(A - A.T)
    scale = _max_abs(A)
    if skew > SYMMETRY_TOL * scale:
        raise InvalidArgument(
            "Quadratic matrix is not symmetric (asymmetry %.3e relative to %.3e)"
            % (skew, scale)
        )
    A = (A + A.T) * 0.5
    if n > DENSE_LIMIT:
        return sparse.csr_matrix(A)
    return _dense(A)


def _linear_part(B, n, m):  # type: (Optional[Matrix], int, int) -> Matrix
    if B is None:
        B = sparse.csr_matrix((n, m)) if n > DENSE_LIMIT else np.zeros((n, m))
    if not _is_sparse(B):
        B = np.asarray(B, dtype=float)
        if B.ndim == 1 and m == 1:
            B = B.reshape(n, 1)
    if B.shape != (n, m):
        raise InvalidArgument("Linear matrix must be %dx%d, got %s" % (n, m, B.shape))
    if not _all_finite(B):
        raise InvalidArgument("Linear matrix has non-finite entries")
    if n > DENSE_LIMIT:
        return sparse.csr_matrix(B, dtype=float)
    return np.array(_dense(B), dtype=float)


def as_matrix(Y, n, m):  # type: (object, int, int) -> np.ndarray
    """Return ``Y`` as an ``n x m`` float array, accepting a flat vector when ``m == 1``."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1 and m == 1:
        Y = Y.reshape(-1, 1)
    if Y.shape != (n, m):
        raise InvalidArgument("Expected a %dx%d point, got %s" % (n, m, Y.shape))
    return Y


class QuadForm(object):
    """One quadratic function ``q(Y) = tr(Y'AY) + 2 tr(B'Y) + c``."""

    def __init__(self, A, B=None, c=0.0, m=None):
        # type: (Matrix, Optional[Matrix], float, Optional[int]) -> None
        n = A.shape[0]
        if m is None:
            m = 1 if B is None else (B.shape[1] if len(B.shape) == 2 else 1)
        if not np.isfinite(c):
            raise InvalidArgument("Constant term must be finite")
        self.A = _symmetrized(A, n)
        self.B = _linear_part(B, n, m)
        self.c = float(c)

    @classmethod
    def linear(cls, B, c=0.0):  # type: (Matrix, float) -> QuadForm
        n = B.shape[0]
        zero = sparse.csr_matrix((n, n)) if n > DENSE_LIMIT else np.zeros((n, n))
        m = B.shape[1] if len(B.shape) == 2 else 1
        return cls(zero, B, c, m)

    @property
    def n(self):  # type: () -> int
        return self.A.shape[0]

    @property
    def m(self):  # type: () -> int
        return self.B.shape[1]

    @property
    def shape(self):  # type: () -> Tuple[int, int]
        return self.n, self.m

    @property
    def is_sparse(self):  # type: () -> bool
        return _is_sparse(self.A)

    @cached_property
    def is_linear(self):  # type: () -> bool
        return _max_abs(self.A) == 0.0

    @cached_property
    def norms(self):  # type: () -> Tuple[float, float]
        return matrix_norms(self.A)

    @property
    def norm1(self):  # type: () -> float
        return self.norms[0]

    @property
    def norm2(self):  # type: () -> float
        return self.norms[1]

    def entries(self):  # type: () -> Iterator[Tuple[int, int, float]]
        """Nonzero upper-triangle entries ``(i, j, A_ij)`` with ``i <= j``."""
        upper = sparse.triu(sparse.coo_matrix(self.A))
        order = np.lexsort((upper.col, upper.row))
        for idx in order:
            if upper.data[idx] != 0.0:
                yield int(upper.row[idx]), int(upper.col[idx]), float(upper.data[idx])

    def dense_A(self):  # type: () -> np.ndarray
        return _dense(self.A)

    def dense_B(self):  # type: () -> np.ndarray
        return _dense(self.B)

    def __eq__(self, other):
        if not isinstance(other, QuadForm):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.c == other.c
            and np.array_equal(self.dense_A(), other.dense_A())
            and np.array_equal(self.dense_B(), other.dense_B())
        )

    def __ne__(self, other):
        return not (self == other)

    def __repr__(self):
        return "<QuadForm %dx%d%s>" % (self.n, self.m, " linear" if self.is_linear else "")


class QcqpInstance(object):
    """A QCQP: objective (index 0), equality set E and inequality set I.

    ``bounds`` are optional per-variable lower/upper vectors, only meaningful when
    ``m == 1``. They are not part of the constraint lists; see :meth:`bounded`.
    """

    def __init__(
        self,
        objective,  # type: QuadForm
        equalities=(),  # type: Iterable[QuadForm]
        inequalities=(),  # type: Iterable[QuadForm]
        bounds=None,  # type: Optional[Tuple[Sequence[float], Sequence[float]]]
        name="",  # type: str
        reference_objective=None,  # type: Optional[float]
        reference_solution=None,  # type: Optional[np.ndarray]
    ):
        self.objective = objective
        self.equalities = tuple(equalities)
        self.inequalities = tuple(inequalities)
        self.name = name
        for k, form in enumerate(self.forms()):
            if form.shape != objective.shape:
                raise SchemaError(
                    "Constraint %d is %dx%d but the objective is %dx%d"
                    % ((k,) + form.shape + objective.shape)
                )
        self.bounds = None  # type: Optional[Tuple[np.ndarray, np.ndarray]]
        if bounds is not None:
            lower, upper = (np.asarray(b, dtype=float).ravel() for b in bounds)
            if self.m != 1:
                raise SchemaError("Variable bounds require m = 1, got m = %d" % self.m)
            if lower.shape != (self.n,) or upper.shape != (self.n,):
                raise SchemaError("Bounds must have length n = %d" % self.n)
            if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
                raise SchemaError("Bounds must not be NaN")
            if np.any(lower > upper):
                raise SchemaError("Lower bound exceeds upper bound")
            self.bounds = (lower, upper)
        self.reference_objective = (
            None if reference_objective is None else float(reference_objective)
        )
        self.reference_solution = (
            None
            if reference_solution is None
            else as_matrix(reference_solution, self.n, self.m)
        )

    @property
    def n(self):  # type: () -> int
        return self.objective.n

    @property
    def m(self):  # type: () -> int
        return self.objective.m

    @property
    def equality_indices(self):  # type: () -> range
        return range(1, 1 + len(self.equalities))

    @property
    def inequality_indices(self):  # type: () -> range
        start = 1 + len(self.equalities)
        return range(start, start + len(self.inequalities))

    @property
    def constraint_indices(self):  # type: () -> range
        return range(1, 1 + len(self.equalities) + len(self.inequalities))

    def is_equality(self, k):  # type: (int) -> bool
        return k in self.equality_indices

    def form(self, k):  # type: (int) -> QuadForm
        if k == 0:
            return self.objective
        if k in self.equality_indices:
            return self.equalities[k - 1]
        if k in self.inequality_indices:
            return self.inequalities[k - 1 - len(self.equalities)]
        raise InvalidArgument("No constraint with index %d" % k)

    def forms(self):  # type: () -> List[QuadForm]
        return [self.objective] + list(self.equalities) + list(self.inequalities)

    def bounded(self):  # type: () -> QcqpInstance
        """Equivalent instance with finite bounds appended as linear inequalities."""
        if self.bounds is None:
            return self
        extra = []  # type: List[QuadForm]
        lower, upper = self.bounds
        for i in range(self.n):
            unit = np.zeros((self.n, 1))
            unit[i, 0] = 0.5
            if np.isfinite(upper[i]):
                extra.append(QuadForm.linear(unit, -upper[i]))
            if np.isfinite(lower[i]):
                extra.append(QuadForm.linear(-unit, lower[i]))
        return QcqpInstance(
            self.objective,
            self.equalities,
            self.inequalities + tuple(extra),
            bounds=self.bounds,
            name=self.name,
            reference_objective=self.reference_objective,
            reference_solution=self.reference_solution,
        )

    def __repr__(self):
        return "<QcqpInstance %s n=%d m=%d |E|=%d |I|=%d>" % (
            self.name or "?",
            self.n,
            self.m,
            len(self.equalities),
            len(self.inequalities),
        )


class LiftedPoint(object):
    """A pair ``(Y, X)`` where ``X`` stands in for ``Y Y'``."""

    def __init__(self, Y, X):  # type: (np.ndarray, np.ndarray) -> None
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        X = np.asarray(X, dtype=float)
        if X.shape != (Y.shape[0], Y.shape[0]):
            raise InvalidArgument(
                "X must be %dx%d, got %s" % (Y.shape[0], Y.shape[0], X.shape)
            )
        if _max_abs(X - X.T) > SYMMETRY_TOL * max(_max_abs(X), 1.0):
            raise InvalidArgument("X must be symmetric")
        self.Y = Y
        self.X = (X + X.T) * 0.5

    @classmethod
    def rank_one(cls, Y):  # type: (np.ndarray) -> LiftedPoint
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        return cls(Y, Y @ Y.T)


def _check_point(form, Y):  # type: (QuadForm, object) -> np.ndarray
    return as_matrix(Y, form.n, form.m)


def _inner(B, Y):  # type: (Matrix, np.ndarray) -> float
    if _is_sparse(B):
        return float(B.multiply(Y).sum())
    return float(np.sum(B * Y))


def eval_q(form, Y):  # type: (QuadForm, object) -> float
    Y = _check_point(form, Y)
    return float(np.sum(Y * (form.A @ Y))) + 2.0 * _inner(form.B, Y) + form.c


def grad_q(form, Y):  # type: (QuadForm, object) -> np.ndarray
    Y = _check_point(form, Y)
    return 2.0 * (np.asarray(form.A @ Y) + _dense(form.B))


def eval_lifted_q(form, point):  # type: (QuadForm, LiftedPoint) -> float
    Y = _check_point(form, point.Y)
    if point.X.shape != (form.n, form.n):
        raise InvalidArgument("Lifted X does not match the form dimension")
    if _is_sparse(form.A):
        quadratic = float(form.A.multiply(point.X).sum())
    else:
        quadratic = float(np.sum(form.A * point.X))
    return quadratic + 2.0 * _inner(form.B, Y) + form.c


def feasibility_residual(inst, Y, tol=1e-9):
    # type: (QcqpInstance, object, float) -> Tuple[float, float, bool]
    if not tol > 0:
        raise InvalidArgument("Feasibility tolerance must be positive")
    Y = as_matrix(Y, inst.n, inst.m)
    eq = max((abs(eval_q(f, Y)) for f in inst.equalities), default=0.0)
    ineq = max((max(eval_q(f, Y), 0.0) for f in inst.inequalities), default=0.0)
    return eq, ineq, bool(eq <= tol and ineq <= tol)


def matrix_norms(A):  # type: (Matrix) -> Tuple[float, float]
    """Induced 1-norm and spectral norm of a symmetric matrix."""
    if not _all_finite(A):
        raise InvalidArgument("Matrix has non-finite entries")
    if A.shape[0] != A.shape[1]:
        raise InvalidArgument("Matrix must be square, got %s" % (A.shape,))
    if not _is_sparse(A):
        A = np.asarray(A, dtype=float)
    skew = _max_abs(A - A.T)
    if skew > SYMMETRY_TOL * _max_abs(A):
        raise InvalidArgument("Matrix is not symmetric (asymmetry %.3e)" % skew)
    if A.shape[0] == 0:
        return 0.0, 0.0
    if _is_sparse(A):
        norm1 = float(np.max(np.asarray(abs(A).sum(axis=0)))) if A.nnz else 0.0
        if A.nnz == 0:
            return norm1, 0.0
        if A.shape[0] <= DENSE_LIMIT:
            return norm1, float(np.max(np.abs(np.linalg.eigvalsh(A.toarray()))))
        top = sparse_linalg.eigsh(A, k=1, which="LM", return_eigenvectors=False, tol=1e-12)
        return norm1, float(abs(top[0]))
    norm1 = float(np.max(np.sum(np.abs(A), axis=0)))
    return norm1, float(np.max(np.abs(np.linalg.eigvalsh(A))))


def rank_gap(point):  # type: (LiftedPoint) -> float
    """``tr(X - Y Y')``."""
    return float(np.trace(point.X) - np.sum(point.Y * point.Y))


def random_form(rng, n, m=1, scale=1.0):
    # type: (np.random.Generator, int, int, float) -> QuadForm
    G = rng.standard_normal((n, n)) * scale
    return QuadForm((G + G.T) * 0.5, rng.standard_normal((n, m)) * scale, float(rng.standard_normal()), m)


def instance_through_point(rng, Y, n_eq=0, n_ineq=0, n_active=0, slack=1.0, objective=None):
    # type: (np.random.Generator, np.ndarray, int, int, int, float, Optional[QuadForm]) -> QcqpInstance
    """Random instance for which ``Y`` is feasible by construction.

    Equalities vanish at ``Y``; the first ``n_active`` inequalities are binding there and
    the rest hold with a margin drawn from ``[slack/2, slack]``.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    n, m = Y.shape

    def through(margin):  # type: (float) -> QuadForm
        form = random_form(rng, n, m)
        return QuadForm(form.A, form.B, form.c - eval_q(form, Y) - margin, m)

    equalities = [through(0.0) for _ in range(n_eq)]
    inequalities = [
        through(0.0 if i < n_active else rng.uniform(0.5 * slack, slack)) for i in range(n_ineq)
    ]
    return QcqpInstance(objective or random_form(rng, n, m), equalities, inequalities)


def random_instance(rng, n, m=1, n_eq=0, n_ineq=2, box=2.0):
    # type: (np.random.Generator, int, int, int, int, Optional[float]) -> QcqpInstance
    """Random instance with a known feasible point inside the box ``[-box, box]``."""
    anchor = rng.uniform(-0.5, 0.5, size=(n, m)) * (box or 1.0)
    inst = instance_through_point(rng, anchor, n_eq=n_eq, n_ineq=n_ineq, slack=1.0)
    if box is None or m != 1:
        return inst
    return QcqpInstance(
        inst.objective,
        inst.equalities,
        inst.inequalities,
        bounds=(-box * np.ones(n), box * np.ones(n)),
    )
