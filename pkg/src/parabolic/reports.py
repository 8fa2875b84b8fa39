"""CSV and JSON reports for runs, bounds, theory checks and sysid error curves.

A report is written next to a base path: ``<base>.json`` always, ``<base>.csv`` when the
result has per-round rows.
"""
import csv
import json
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .errors import DataError, GapUndefined
from .sequential import BoundRecord, RunTrace, compute_gaps
from .theory import TheoryReport

logger = logging.getLogger(__name__)

ROUND_COLUMNS = ("round", "objective", "rank_gap", "time_s")
CURVE_COLUMNS = ("round", "recovery_error")
RUN_SUMMARY_KEYS = ("eta", "i_feas", "i_stop", "t_stop", "UB", "GAP")

Report = Union[RunTrace, BoundRecord, TheoryReport]


def _finite_or_none(value):  # type: (Optional[float]) -> Optional[float]
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _gap(q_relax, q_feasible, reference):
    # type: (Optional[float], Optional[float], Optional[float]) -> Tuple[Optional[float], Optional[float]]
    if reference is None:
        return None, None
    try:
        return compute_gaps(q_relax, q_feasible, reference)
    except GapUndefined as err:
        logger.warning(err.message)
        return None, None


def round_rows(trace):  # type: (RunTrace) -> List[Tuple[int, float, float, float]]
    return [(r.round, r.objective, r.rank_gap, r.time_s) for r in trace.rounds]


def run_summary(trace, reference_objective=None):
    # type: (RunTrace, Optional[float]) -> Dict[str, object]
    """The penalized-run columns: eta, i_feas, i_stop, t_stop, UB and GAP (percent)."""
    upper = trace.upper_bound
    return {
        "eta": trace.eta,
        "i_feas": trace.i_feas,
        "i_stop": trace.i_stop,
        "t_stop": trace.t_stop,
        "UB": _finite_or_none(upper),
        "GAP": _finite_or_none(_gap(None, upper, reference_objective)[1]),
    }


def bound_summary(record):  # type: (BoundRecord) -> Dict[str, object]
    return {
        "LB": _finite_or_none(record.lower_bound),
        "GAP": _finite_or_none(record.gap_pct),
        "t": record.time_s,
        "status": record.status,
        "rank_gap": _finite_or_none(record.rank_gap),
        "baseline_LB": _finite_or_none(record.baseline_bound),
        "baseline_GAP": _finite_or_none(record.baseline_gap_pct),
    }


def _base(path):  # type: (str) -> str
    stem, extension = os.path.splitext(path)
    return stem if extension.lower() in (".json", ".csv") else path


def _write_json(document, path):  # type: (Dict[str, object], str) -> str
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=1, sort_keys=False)
        handle.write("\n")
    return path


def _write_csv(columns, rows, path):  # type: (Sequence[str], Sequence[Sequence[object]], str) -> str
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def write_report(report, path, reference_objective=None):
    # type: (Report, str, Optional[float]) -> List[str]
    """Write ``report`` next to ``path`` and return the files written.

    I/O errors propagate unchanged.
    """
    base = _base(path)
    if isinstance(report, RunTrace):
        return [
            _write_csv(ROUND_COLUMNS, round_rows(report), base + ".csv"),
            _write_json(run_summary(report, reference_objective), base + ".json"),
        ]
    if isinstance(report, BoundRecord):
        return [_write_json(bound_summary(report), base + ".json")]
    if isinstance(report, TheoryReport):
        return [_write_json(report.to_dict(), base + ".json")]
    raise DataError("Cannot write a report for %s" % type(report).__name__)


def write_error_curve(curve, path):  # type: (Sequence[Tuple[int, float]], str) -> str
    return _write_csv(CURVE_COLUMNS, curve, _base(path) + ".csv")


def read_rows(path):  # type: (str) -> List[Dict[str, str]]
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))
