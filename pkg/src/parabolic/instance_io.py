"""Reading and writing QCQP instances.

Two formats are understood:

``native_json``
    A versioned JSON document. Quadratic matrices are upper-triangle triplets
    ``[i, j, v]`` (0-based, ``i <= j``) completed symmetrically on read; linear parts
    are dense ``n x m`` lists or ``{"triplets": [[i, col, v], ...]}``. Floats are
    written with ``repr`` so a document reproduces its instance bit for bit.

``qplib``
    The continuous part of the QPLIB text format: objective sense, quadratic
    objective, quadratic and linear constraints and variable bounds. Anything the
    importer cannot represent exactly (integer or binary variables, unknown type
    codes) is rejected with :class:`~parabolic.errors.Unsupported`.
"""
import json
import logging
import math
import os
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .errors import DataError, ParseError, SchemaError, Unsupported
from .qcqp import DENSE_LIMIT, QcqpInstance, QuadForm

logger = logging.getLogger(__name__)

NATIVE_JSON = "native_json"
QPLIB = "qplib"
FORMATS = (NATIVE_JSON, QPLIB)
SCHEMA_VERSION = 1

QPLIB_OBJECTIVE_CODES = "LDCQ"
QPLIB_CONSTRAINT_CODES = "NBLDCQ"
QPLIB_VARIABLE_NAMES = {
    "B": "binary variables",
    "M": "mixed-integer variables",
    "I": "integer variables",
    "G": "general integer variables",
}

Source = Union[str, bytes, "os.PathLike[str]"]


def detect_format(source):  # type: (Source) -> str
    if isinstance(source, bytes):
        return NATIVE_JSON if source.lstrip()[:1] == b"{" else QPLIB
    extension = os.path.splitext(os.fspath(source))[1].lower()
    if extension == ".json":
        return NATIVE_JSON
    if extension in (".qplib", ".txt"):
        return QPLIB
    raise DataError("Cannot tell the format of '%s', pass it explicitly" % source)


def _read_text(source):  # type: (Source) -> Tuple[str, str]
    if isinstance(source, bytes):
        return source.decode("utf-8"), ""
    path = os.fspath(source)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return handle.read(), os.path.splitext(os.path.basename(path))[0]
    except FileNotFoundError:
        raise DataError("Error: File '%s' not found." % path)


def parse_instance(source, format=None):  # type: (Source, Optional[str]) -> QcqpInstance
    """Read an instance from a path or from raw bytes."""
    format = format or detect_format(source)
    if format not in FORMATS:
        raise DataError(
            "Unknown instance format '%s', choose one of %s" % (format, ", ".join(FORMATS))
        )
    text, stem = _read_text(source)
    if format == NATIVE_JSON:
        inst = _from_document(_load_json(text))
    else:
        inst = _parse_qplib(text)
    if not inst.name and stem:
        inst.name = stem
    logger.debug("Parsed %r", inst)
    return inst


# --- native JSON -------------------------------------------------------------


def _load_json(text):  # type: (str) -> dict
    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError("Malformed JSON: %s" % err.msg, err.lineno, err.colno)
    if not isinstance(document, dict):
        raise SchemaError("Instance document must be a JSON object")
    return document


def _upper_triplets(form):  # type: (QuadForm) -> List[List[object]]
    return [[i, j, v] for i, j, v in form.entries()]


def _linear_document(form):  # type: (QuadForm) -> object
    if sparse.issparse(form.B):
        coo = sparse.coo_matrix(form.B)
        order = np.lexsort((coo.col, coo.row))
        return {
            "triplets": [
                [int(coo.row[k]), int(coo.col[k]), float(coo.data[k])]
                for k in order
                if coo.data[k] != 0.0
            ]
        }
    return [[float(v) for v in row] for row in form.dense_B()]


def _form_document(form):  # type: (QuadForm) -> Dict[str, object]
    return {"A": _upper_triplets(form), "B": _linear_document(form), "c": form.c}


def _bound_list(values, infinite):  # type: (np.ndarray, float) -> List[Optional[float]]
    return [None if v == infinite else float(v) for v in values]


def instance_document(inst):  # type: (QcqpInstance) -> Dict[str, object]
    document = {
        "schema_version": SCHEMA_VERSION,
        "name": inst.name,
        "n": inst.n,
        "m": inst.m,
        "objective": _form_document(inst.objective),
        "equalities": [_form_document(f) for f in inst.equalities],
        "inequalities": [_form_document(f) for f in inst.inequalities],
        "bounds": None,
        "reference_objective": inst.reference_objective,
        "reference_solution": None,
    }  # type: Dict[str, object]
    if inst.bounds is not None:
        lower, upper = inst.bounds
        document["bounds"] = {
            "lower": _bound_list(lower, -math.inf),
            "upper": _bound_list(upper, math.inf),
        }
    if inst.reference_solution is not None:
        document["reference_solution"] = inst.reference_solution.tolist()
    return document


def serialize_instance(inst, indent=None):  # type: (QcqpInstance, Optional[int]) -> str
    return json.dumps(instance_document(inst), indent=indent, allow_nan=False)


def write_instance(inst, path):  # type: (QcqpInstance, str) -> None
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(serialize_instance(inst, indent=1))
        handle.write("\n")


def _number(value, where):  # type: (object, str) -> float
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError("%s must be a number, got %r" % (where, value))
    return float(value)


def _index(value, limit, where):  # type: (object, int, str) -> int
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError("%s must be an integer index, got %r" % (where, value))
    if not 0 <= value < limit:
        raise SchemaError("%s index %d is outside 0..%d" % (where, value, limit - 1))
    return value


def _triplets(entries, rows, cols, where):
    # type: (object, int, int, str) -> Iterator[Tuple[int, int, float]]
    if not isinstance(entries, list):
        raise SchemaError("%s must be a list of [i, j, v] triplets" % where)
    for position, entry in enumerate(entries):
        label = "%s[%d]" % (where, position)
        if not isinstance(entry, list) or len(entry) != 3:
            raise SchemaError("%s must be a triplet [i, j, v]" % label)
        yield _index(entry[0], rows, label), _index(entry[1], cols, label), _number(entry[2], label)


def _quadratic_from(entries, n, where):  # type: (object, int, str) -> object
    values = {}  # type: Dict[Tuple[int, int], float]
    for i, j, v in _triplets(entries, n, n, where):
        key = (min(i, j), max(i, j))
        if key in values:
            raise SchemaError("%s repeats entry (%d, %d)" % (where, key[0], key[1]))
        values[key] = v
    rows, cols, data = [], [], []  # type: List[int], List[int], List[float]
    for (i, j), v in values.items():
        rows.append(i)
        cols.append(j)
        data.append(v)
        if i != j:
            rows.append(j)
            cols.append(i)
            data.append(v)
    A = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    return A if n > DENSE_LIMIT else A.toarray()


def _linear_from(value, n, m, where):  # type: (object, int, int, str) -> object
    if isinstance(value, dict):
        rows, cols, data = [], [], []  # type: List[int], List[int], List[float]
        for i, col, v in _triplets(value.get("triplets"), n, m, where + ".triplets"):
            rows.append(i)
            cols.append(col)
            data.append(v)
        B = sparse.csr_matrix((data, (rows, cols)), shape=(n, m))
        return B if n > DENSE_LIMIT else B.toarray()
    if not isinstance(value, list) or len(value) != n:
        raise SchemaError("%s must be a list of %d rows" % (where, n))
    B = np.zeros((n, m))
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != m:
            raise SchemaError("%s row %d must have %d entries" % (where, i, m))
        for col, v in enumerate(row):
            B[i, col] = _number(v, "%s[%d][%d]" % (where, i, col))
    return B


def _form_from(value, n, m, where):  # type: (object, int, int, str) -> QuadForm
    if not isinstance(value, dict):
        raise SchemaError("%s must be an object with A, B and c" % where)
    unknown = set(value) - {"A", "B", "c"}
    if unknown:
        raise SchemaError("%s has unknown keys %s" % (where, ", ".join(sorted(unknown))))
    A = _quadratic_from(value.get("A", []), n, where + ".A")
    B = _linear_from(value["B"], n, m, where + ".B") if "B" in value else None
    return QuadForm(A, B, _number(value.get("c", 0.0), where + ".c"), m)


def _bounds_from(value, n):  # type: (object, int) -> Optional[Tuple[np.ndarray, np.ndarray]]
    if value is None:
        return None
    if not isinstance(value, dict) or set(value) != {"lower", "upper"}:
        raise SchemaError("bounds must be an object with lower and upper")
    result = []
    for side, infinite in (("lower", -math.inf), ("upper", math.inf)):
        entries = value[side]
        if not isinstance(entries, list) or len(entries) != n:
            raise SchemaError("bounds.%s must have %d entries" % (side, n))
        result.append(
            np.array(
                [infinite if v is None else _number(v, "bounds." + side) for v in entries]
            )
        )
    return result[0], result[1]


def _from_document(document):  # type: (dict) -> QcqpInstance
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(
            "Unsupported schema_version %r, expected %d" % (version, SCHEMA_VERSION)
        )
    for key in ("n", "objective"):
        if key not in document:
            raise SchemaError("Instance document has no '%s'" % key)
    n = document["n"]
    m = document.get("m", 1)
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise SchemaError("n must be a positive integer, got %r" % (n,))
    if isinstance(m, bool) or not isinstance(m, int) or m < 1:
        raise SchemaError("m must be a positive integer, got %r" % (m,))
    objective = _form_from(document["objective"], n, m, "objective")
    groups = []
    for key in ("equalities", "inequalities"):
        entries = document.get(key, [])
        if not isinstance(entries, list):
            raise SchemaError("%s must be a list" % key)
        groups.append([_form_from(e, n, m, "%s[%d]" % (key, k)) for k, e in enumerate(entries)])
    reference = document.get("reference_objective")
    solution = document.get("reference_solution")
    if solution is not None:
        solution = np.array(solution, dtype=float)
        if solution.shape != (n, m):
            raise SchemaError(
                "reference_solution must be %dx%d, got %s" % (n, m, solution.shape)
            )
    return QcqpInstance(
        objective,
        groups[0],
        groups[1],
        bounds=_bounds_from(document.get("bounds"), n),
        name=str(document.get("name") or ""),
        reference_objective=None if reference is None else _number(reference, "reference_objective"),
        reference_solution=solution,
    )


# --- QPLIB subset ------------------------------------------------------------


class _Tokens(object):
    """Line-oriented reader that strips ``#`` and ``!`` comments and blank lines."""

    def __init__(self, text):  # type: (str) -> None
        self._lines = []  # type: List[Tuple[int, List[Tuple[int, str]]]]
        for number, raw in enumerate(text.splitlines(), start=1):
            for marker in ("#", "!"):
                if marker in raw:
                    raw = raw[: raw.index(marker)]
            words = []
            column = 0
            for word in raw.split():
                column = raw.index(word, column)
                words.append((column + 1, word))
                column += len(word)
            if words:
                self._lines.append((number, words))
        self._position = 0

    @property
    def exhausted(self):  # type: () -> bool
        return self._position >= len(self._lines)

    def line(self, what):  # type: (str) -> Tuple[int, List[Tuple[int, str]]]
        if self.exhausted:
            last = self._lines[-1][0] if self._lines else 1
            raise ParseError("Unexpected end of file, expected %s" % what, last + 1, 1)
        entry = self._lines[self._position]
        self._position += 1
        return entry

    def word(self, what):  # type: (str) -> Tuple[str, int, int]
        number, words = self.line(what)
        return words[0][1], number, words[0][0]

    def _convert(self, kind, word, number, column, what):
        try:
            return kind(word)
        except ValueError:
            raise ParseError("Expected %s, got '%s'" % (what, word), number, column)

    def integer(self, what):  # type: (str) -> int
        word, number, column = self.word(what)
        value = self._convert(int, word, number, column, what)
        if value < 0:
            raise ParseError("Expected non-negative %s" % what, number, column)
        return value

    def real(self, what):  # type: (str) -> float
        word, number, column = self.word(what)
        return self._convert(float, word, number, column, what)

    def record(self, ints, what):  # type: (int, str) -> Tuple[List[int], float, int, int]
        """``ints`` 1-based indices followed by one value, all on one line."""
        number, words = self.line(what)
        if len(words) < ints + 1:
            raise ParseError(
                "Expected %d indices and a value for %s" % (ints, what),
                number,
                words[-1][0],
            )
        indices = [
            self._convert(int, word, number, column, "an index") - 1
            for column, word in words[:ints]
        ]
        column, word = words[ints]
        return indices, self._convert(float, word, number, column, "a value"), number, column


def _checked(indices, limits, number, column, what):
    # type: (List[int], Sequence[int], int, int, str) -> List[int]
    for index, limit in zip(indices, limits):
        if not 0 <= index < limit:
            raise SchemaError(
                "%s index %d outside 1..%d (line %d, column %d)"
                % (what, index + 1, limit, number, column)
            )
    return indices


def _defaulted(tokens, n, what):  # type: (_Tokens, int, str) -> np.ndarray
    values = np.full(n, tokens.real("default " + what))
    for _ in range(tokens.integer("number of non-default " + what)):
        (i,), v, number, column = tokens.record(1, what)
        _checked([i], [n], number, column, what)
        values[i] = v
    return values


def _half_symmetric(rows, cols, data, n):  # type: (List[int], List[int], List[float], int) -> object
    """``Q/2`` from lower-triangle entries of ``Q``."""
    full_rows = rows + [c for r, c in zip(rows, cols) if r != c]
    full_cols = cols + [r for r, c in zip(rows, cols) if r != c]
    full_data = data + [v for r, c, v in zip(rows, cols, data) if r != c]
    A = sparse.csr_matrix((np.array(full_data) * 0.5, (full_rows, full_cols)), shape=(n, n))
    return A if n > DENSE_LIMIT else A.toarray()


def _linear(values, n):  # type: (np.ndarray, int) -> object
    B = (np.asarray(values, dtype=float) * 0.5).reshape(n, 1)
    return sparse.csr_matrix(B) if n > DENSE_LIMIT else B


def _parse_qplib(text):  # type: (str) -> QcqpInstance
    tokens = _Tokens(text)
    name = tokens.word("instance name")[0]
    code, number, column = tokens.word("problem type")
    code = code.upper()
    if len(code) != 3:
        raise ParseError("Problem type must have three letters, got '%s'" % code, number, column)
    objective_code, variable_code, constraint_code = code
    if variable_code in QPLIB_VARIABLE_NAMES:
        raise Unsupported(
            "QPLIB instance '%s' has %s (integrality is not supported)"
            % (name, QPLIB_VARIABLE_NAMES[variable_code])
        )
    if variable_code != "C":
        raise Unsupported("QPLIB variable type code '%s' is not supported" % variable_code)
    if objective_code not in QPLIB_OBJECTIVE_CODES:
        raise Unsupported("QPLIB objective type code '%s' is not supported" % objective_code)
    if constraint_code not in QPLIB_CONSTRAINT_CODES:
        raise Unsupported("QPLIB constraint type code '%s' is not supported" % constraint_code)

    sense, number, column = tokens.word("objective sense")
    if sense.lower() not in ("minimize", "maximize"):
        raise ParseError("Objective sense must be minimize or maximize", number, column)
    sign = -1.0 if sense.lower() == "maximize" else 1.0
    n = tokens.integer("number of variables")
    if n < 1:
        raise SchemaError("QPLIB instance '%s' has no variables" % name)
    has_constraints = constraint_code not in "NB"
    rows_count = tokens.integer("number of constraints") if has_constraints else 0

    rows, cols, data = [], [], []  # type: List[int], List[int], List[float]
    if objective_code != "L":
        for _ in range(tokens.integer("number of quadratic objective terms")):
            (i, j), v, number, column = tokens.record(2, "objective quadratic term")
            i, j = _checked([i, j], [n, n], number, column, "objective term")
            rows.append(max(i, j))
            cols.append(min(i, j))
            data.append(v)
    objective_A = _half_symmetric(rows, cols, data, n)
    objective_b = _defaulted(tokens, n, "objective linear coefficient")
    objective_c = tokens.real("objective constant")

    quad = [([], [], []) for _ in range(rows_count)]  # type: List[Tuple[List[int], List[int], List[float]]]
    linear = np.zeros((rows_count, n))
    if constraint_code in "DCQ":
        for _ in range(tokens.integer("number of quadratic constraint terms")):
            (k, i, j), v, number, column = tokens.record(3, "constraint quadratic term")
            k, i, j = _checked([k, i, j], [rows_count, n, n], number, column, "constraint term")
            quad[k][0].append(max(i, j))
            quad[k][1].append(min(i, j))
            quad[k][2].append(v)
    if has_constraints:
        for _ in range(tokens.integer("number of linear constraint terms")):
            (k, i), v, number, column = tokens.record(2, "constraint linear term")
            k, i = _checked([k, i], [rows_count, n], number, column, "constraint term")
            linear[k, i] += v

    infinity = tokens.real("value for infinity")

    def finite(values):  # type: (np.ndarray) -> np.ndarray
        return np.where(values >= infinity, math.inf, np.where(values <= -infinity, -math.inf, values))

    equalities, inequalities = [], []  # type: List[QuadForm], List[QuadForm]
    if has_constraints:
        lower = finite(_defaulted(tokens, rows_count, "constraint lower bound"))
        upper = finite(_defaulted(tokens, rows_count, "constraint upper bound"))
        for k in range(rows_count):
            A = _half_symmetric(list(quad[k][0]), list(quad[k][1]), list(quad[k][2]), n)
            B = _linear(linear[k], n)
            if lower[k] > upper[k]:
                raise SchemaError("Constraint %d of '%s' has lower bound above upper bound" % (k + 1, name))
            if lower[k] == upper[k]:
                equalities.append(QuadForm(A, B, -lower[k], 1))
                continue
            if np.isfinite(upper[k]):
                inequalities.append(QuadForm(A, B, -upper[k], 1))
            if np.isfinite(lower[k]):
                inequalities.append(QuadForm(-A, -B, lower[k], 1))
            if not (np.isfinite(lower[k]) or np.isfinite(upper[k])):
                logger.warning("Constraint %d of '%s' is free and was dropped", k + 1, name)

    var_lower = finite(_defaulted(tokens, n, "variable lower bound"))
    var_upper = finite(_defaulted(tokens, n, "variable upper bound"))
    bounds = None
    if np.any(np.isfinite(var_lower)) or np.any(np.isfinite(var_upper)):
        bounds = (var_lower, var_upper)

    objective = QuadForm(
        sign * objective_A, sign * _linear(objective_b, n), sign * objective_c, 1
    )
    if not tokens.exhausted:
        logger.debug("Ignoring trailing starting-point sections of '%s'", name)
    return QcqpInstance(objective, equalities, inequalities, bounds=bounds, name=name)
