#!/usr/bin/env python

"""Parabolic relaxations for quadratically constrained quadratic programs.
Version [PARABOLIC_VERSION]

Usage:  parabolic [options] COMMAND [INSTANCE | DIRECTORY]

Commands:
  relax INSTANCE        lower bound from the parabolic relaxation (LB, GAP, time)
  sequential INSTANCE   penalized sequential rounds toward a feasible point
  accelerated INSTANCE  sequential rounds with extrapolated anchors
  theory INSTANCE       penalty thresholds and certificates at the relaxation start
  sysid                 synthetic system identification runs
  bench DIRECTORY       relax or sequential over every instance in a directory

Options:
  --eta VALUE           penalty weight (positive)
  --auto-eta            search the smallest penalty weight on the 1/2/5 grid
  --pairs full|sparsity parabolic pair policy (default: full for n <= 64)
  --box-cuts            add the box cuts implied by variable bounds
  --baseline            also solve the 2x2-minor SOCP baseline (relax, bench)
  --rel-tol VALUE       relative objective decrease that stops a run [1e-4]
  --max-rounds N        round limit [400]
  --rounds-probe N      rounds probed per candidate by --auto-eta [10]
  --lam VALUE           extrapolation weight for accelerated runs [0.5]
  --lam-rule backtracking|fixed
  --eta-rule static|certified
  --solver reference|external
  --format native_json|qplib
  --mode relax|sequential|accelerated   what bench runs [relax]
  --n N --m M --horizon T --stride S --sigma V --runs R   sysid settings
  --seed N              random seed [0]
  --out DIR             output directory for reports [.]
  --processes N|all     bench worker count [max(cpu count, 2)]
  --argumentfile FILE   read more options from FILE, one per line
  --verbose             show per-round progress
  --help / --version

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 penalty search failed,
252 nothing to do.
"""
from __future__ import absolute_import, print_function

import datetime
import logging
import os
import queue
import signal
import sys
import threading
import time
import traceback
from collections import namedtuple
from glob import glob
from multiprocessing.pool import ThreadPool
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy
from natsort import natsorted

from . import __version__ as PARABOLIC_VERSION
from .arguments import parse_args
from .cones import INACCURATE, OPTIMAL, SolverSettings
from .errors import (
    EXIT_NOTHING_TO_DO,
    EXIT_OK,
    DataError,
    SolverFailure,
)
from .instance_io import parse_instance
from .qcqp import QcqpInstance
from .relaxation import select_pairs
from .reports import bound_summary, run_summary, write_error_curve, write_report
from .sequential import (
    AcceleratedSchedule,
    RunTrace,
    StopCriteria,
    auto_eta,
    lower_bound,
    relaxation_start,
    run_accelerated,
    run_sequential,
)
from .sysid import run_sysid
from .theory import analyze

CTRL_C_PRESSED = False
MESSAGE_QUEUE = queue.Queue()  # type: queue.Queue
EXECUTION_POOL_IDS = []  # type: List[int]
EXECUTION_POOL_ID_LOCK = threading.Lock()
_ALL_ELAPSED = []  # type: List[Union[int, float]]
_INSTANCE_PATTERNS = ("*.json", "*.qplib")

BenchItem = namedtuple("BenchItem", ["index", "path", "args"])
BenchResult = namedtuple("BenchResult", ["index", "name", "exit_code", "summary"])


class Color:
    SUPPORTED_OSES = ["posix"]

    GREEN = "\033[92m"
    RED = "\033[91m"
    ENDC = "\033[0m"
    YELLOW = "\033[93m"


class _MessageHandler(logging.Handler):
    """Forwards library log records to the message writer."""

    def emit(self, record):  # type: (logging.LogRecord) -> None
        color = Color.YELLOW if record.levelno >= logging.WARNING else None
        _write("[ %s ] %s" % (record.levelname, record.getMessage()), color)


def _configure_logging(verbose):  # type: (bool) -> logging.Handler
    handler = _MessageHandler()
    root = logging.getLogger("parabolic")
    root.setLevel(logging.DEBUG if verbose else logging.WARNING)
    root.addHandler(handler)
    return handler


def _writer():
    while True:
        message = MESSAGE_QUEUE.get()
        if message is None:
            MESSAGE_QUEUE.task_done()
            return
        print(message)
        sys.stdout.flush()
        MESSAGE_QUEUE.task_done()


def _write(message, color=None):  # type: (str, Optional[str]) -> None
    MESSAGE_QUEUE.put(_wrap_with(color, message))


def _wrap_with(color, message):  # type: (Optional[str], str) -> str
    if _is_output_coloring_supported() and color:
        return "%s%s%s" % (color, message, Color.ENDC)
    return message


def _is_output_coloring_supported():  # type: () -> bool
    return sys.stdout.isatty() and os.name in Color.SUPPORTED_OSES


def _start_message_writer():
    t = threading.Thread(target=_writer)
    t.start()


def _stop_message_writer():
    MESSAGE_QUEUE.put(None)
    MESSAGE_QUEUE.join()


def _print_elapsed(start, end):  # type: (float, float) -> None
    _write(
        "Total solving: "
        + _time_string(sum(_ALL_ELAPSED))
        + "\nElapsed time:  "
        + _time_string(end - start)
    )


def _time_string(elapsed):  # type: (float) -> str
    millis = int((elapsed * 100) % 100)
    seconds = int(elapsed) % 60
    elapsed_minutes = (int(elapsed) - seconds) / 60
    minutes = elapsed_minutes % 60
    elapsed_hours = (elapsed_minutes - minutes) / 60
    elapsed_string = ""
    if elapsed_hours > 0:
        plural = ""
        if elapsed_hours > 1:
            plural = "s"
        elapsed_string += ("%d hour" % elapsed_hours) + plural + " "
    if minutes > 0:
        plural = ""
        if minutes > 1:
            plural = "s"
        elapsed_string += ("%d minute" % minutes) + plural + " "
    return elapsed_string + "%d.%d seconds" % (seconds, millis)


def keyboard_interrupt(*args):
    global CTRL_C_PRESSED
    CTRL_C_PRESSED = True


def _make_id():  # type: () -> int
    global EXECUTION_POOL_IDS, EXECUTION_POOL_ID_LOCK
    thread_id = threading.current_thread().ident
    assert thread_id is not None
    with EXECUTION_POOL_ID_LOCK:
        if thread_id not in EXECUTION_POOL_IDS:
            EXECUTION_POOL_IDS += [thread_id]
        return EXECUTION_POOL_IDS.index(thread_id)


def _write_with_id(pool_id, item_index, message, color=None):
    # type: (int, int, str, Optional[str]) -> None
    _write(
        "%s [PID:%s] [%s] [ID:%s] %s"
        % (datetime.datetime.now(), os.getpid(), pool_id, item_index, message),
        color,
    )


def _format(value, pattern="%.10g"):  # type: (Optional[float], str) -> str
    return "n/a" if value is None else pattern % value


def _settings(args):  # type: (Dict[str, object]) -> SolverSettings
    return SolverSettings(solver=str(args["solver"]))


def _stop(args):  # type: (Dict[str, object]) -> StopCriteria
    return StopCriteria(rel_tol=float(args["rel-tol"]), max_rounds=int(args["max-rounds"] or 400))


def _report_base(args, name, suffix):  # type: (Dict[str, object], str, str) -> str
    out = str(args["out"] or ".")
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, "%s_%s" % (name or "instance", suffix))


def _load(path, args):  # type: (str, Dict[str, object]) -> QcqpInstance
    return parse_instance(path, args["format"])


def _start(inst, args):  # type: (QcqpInstance, Dict[str, object]) -> np.ndarray
    """Unpenalized relaxation point over the pairs chosen by ``--pairs``."""
    return relaxation_start(inst, select_pairs(inst, args["pairs"]), _settings(args))


def _relax(inst, args):  # type: (QcqpInstance, Dict[str, object]) -> Dict[str, object]
    record = lower_bound(
        inst,
        policy=args["pairs"],
        box_cuts=bool(args["box-cuts"]),
        baseline=bool(args["baseline"]),
        settings=_settings(args),
    )
    _ALL_ELAPSED.append(record.time_s)
    if record.lower_bound is None:
        raise SolverFailure(
            "Relaxation of '%s' ended with status '%s'" % (inst.name, record.status),
            record.status,
        )
    write_report(record, _report_base(args, inst.name, "relax"))
    return bound_summary(record)


def _penalized(inst, args, accelerated):
    # type: (QcqpInstance, Dict[str, object], bool) -> Tuple[RunTrace, Dict[str, object]]
    settings = _settings(args)
    start = _start(inst, args)
    if args["auto-eta"]:
        eta = auto_eta(
            inst,
            start,
            int(args["rounds-probe"]),
            policy=args["pairs"],
            settings=settings,
        )
        _write("Selected penalty weight %g for %s" % (eta, inst.name))
    else:
        eta = float(args["eta"])
    if accelerated:
        schedule = AcceleratedSchedule(
            lam_rule=str(args["lam-rule"]), lam=float(args["lam"]), eta_rule=str(args["eta-rule"])
        )
        trace = run_accelerated(
            inst, start, eta, schedule, _stop(args), policy=args["pairs"], settings=settings
        )
        suffix = "accelerated"
    else:
        trace = run_sequential(inst, start, eta, _stop(args), policy=args["pairs"], settings=settings)
        suffix = "sequential"
    _ALL_ELAPSED.append(trace.total_time)
    if trace.last is None or trace.last.status not in (OPTIMAL, INACCURATE):
        raise SolverFailure(
            "Run on '%s' stopped with status '%s'" % (inst.name, trace.status), trace.status
        )
    write_report(trace, _report_base(args, inst.name, suffix), inst.reference_objective)
    return trace, run_summary(trace, inst.reference_objective)


def _theory(inst, args):  # type: (QcqpInstance, Dict[str, object]) -> Dict[str, object]
    start = _start(inst, args)
    report = analyze(inst.bounded(), start, float(args["eta"] or 1.0))
    write_report(report, _report_base(args, inst.name, "theory"))
    return report.to_dict()


def _sysid(args):  # type: (Dict[str, object]) -> int
    first = int(args["seed"])
    for seed in range(first, first + int(args["runs"])):
        result = run_sysid(
            n=int(args["n"]),
            m=int(args["m"]),
            horizon=int(args["horizon"]),
            known_stride=int(args["stride"]),
            sigma=float(args["sigma"]),
            seed=seed,
            rounds=int(args["max-rounds"] or 50),
            eta=float(args["eta"] or 1.0),
            settings=_settings(args),
        )
        _ALL_ELAPSED.append(result.trace.total_time)
        name = "sysid_seed%d" % seed
        write_error_curve(result.errors, _report_base(args, name, "errors"))
        write_report(result.trace, _report_base(args, name, "sequential"))
        _write(
            "[ %s ] %s: recovery error %s after %d rounds"
            % (
                _wrap_with(Color.GREEN, "DONE"),
                name,
                _format(result.final_error, "%.3e"),
                len(result.trace.rounds),
            )
        )
    return EXIT_OK


def _summary_line(summary):  # type: (Dict[str, object]) -> str
    return " ".join(
        "%s=%s" % (key, "n/a" if value is None else value)
        for key, value in summary.items()
        if not isinstance(value, (list, dict))
    )


def _solve_one(command, path, args):
    # type: (str, str, Dict[str, object]) -> Tuple[str, Dict[str, object]]
    inst = _load(path, args)
    if command == "relax":
        return inst.name, _relax(inst, args)
    if command in ("sequential", "accelerated"):
        return inst.name, _penalized(inst, args, command == "accelerated")[1]
    return inst.name, _theory(inst, args)


def execute_bench_item(item):  # type: (BenchItem) -> BenchResult
    name = os.path.splitext(os.path.basename(item.path))[0]
    if CTRL_C_PRESSED:
        return BenchResult(item.index, name, EXIT_NOTHING_TO_DO, {})
    pool_id = _make_id()
    _write_with_id(pool_id, item.index, "SOLVING %s" % name)
    start = time.time()
    try:
        name, summary = _solve_one(str(item.args["mode"]), item.path, item.args)
    except DataError as err:
        _write_with_id(
            pool_id, item.index, "FAILED %s: %s" % (name, err.message), Color.RED
        )
        return BenchResult(item.index, name, err.exit_code, {})
    except Exception:
        _write(traceback.format_exc())
        return BenchResult(item.index, name, SolverFailure.exit_code, {})
    _write_with_id(
        pool_id,
        item.index,
        "DONE %s in %s: %s" % (name, _time_string(time.time() - start), _summary_line(summary)),
        Color.GREEN,
    )
    return BenchResult(item.index, name, EXIT_OK, summary)


def _bench_files(directory):  # type: (str) -> List[str]
    if not os.path.isdir(directory):
        raise DataError("Error: Directory '%s' not found." % directory)
    files = []  # type: List[str]
    for pattern in _INSTANCE_PATTERNS:
        files += glob(os.path.join(directory, pattern))
    return natsorted(files)


def _bench(directory, args):  # type: (str, Dict[str, object]) -> int
    if args["mode"] != "relax" and not (args["eta"] or args["auto-eta"]):
        raise DataError("bench --mode %s needs --eta or --auto-eta" % args["mode"])
    files = _bench_files(directory)
    if not files:
        _write("No instances to solve in %s" % directory)
        return EXIT_NOTHING_TO_DO
    items = [BenchItem(index, path, args) for index, path in enumerate(files)]
    original_signal_handler = signal.signal(signal.SIGINT, keyboard_interrupt)
    pool = ThreadPool(int(args["processes"]))
    result = pool.map_async(execute_bench_item, items, 1)
    while not result.ready():
        try:
            time.sleep(0.1)
        except IOError:
            keyboard_interrupt()
    pool.close()
    signal.signal(signal.SIGINT, original_signal_handler)
    results = sorted(result.get(), key=lambda r: r.index)
    _write_bench_stats(results)
    return max(r.exit_code for r in results)


def _write_bench_stats(results):  # type: (List[BenchResult]) -> None
    solved = [r for r in results if r.exit_code == EXIT_OK]
    for r in results:
        status = (
            _wrap_with(Color.GREEN, "OK") if r.exit_code == EXIT_OK else _wrap_with(Color.RED, "FAIL")
        )
        _write("[ %s ] %-24s %s" % (status, r.name, _summary_line(r.summary)))
    _write(
        "%d instances, %d solved, %d failed."
        % (len(results), len(solved), len(results) - len(solved))
    )
    _write("===================================================")


def _execute(command, sources, args):  # type: (str, List[str], Dict[str, object]) -> int
    if command == "sysid":
        return _sysid(args)
    if command == "bench":
        return _bench(sources[0], args)
    start = time.time()
    name, summary = _solve_one(command, sources[0], args)
    _write(
        "[ %s ] %s %s in %s: %s"
        % (
            _wrap_with(Color.GREEN, "DONE"),
            command,
            name,
            _time_string(time.time() - start),
            _summary_line(summary),
        )
    )
    return EXIT_OK


def main(args=None):
    return sys.exit(main_program(args))


def main_program(args):  # type: (Optional[List[str]]) -> int
    args = args or sys.argv[1:]
    if len(args) == 0:
        print(
            "[ "
            + _wrap_with(Color.RED, "ERROR")
            + " ]: Expected at least 1 argument, got 0."
        )
        print("Try --help for usage information.")
        return EXIT_NOTHING_TO_DO
    start_time = time.time()
    handler = None  # type: Optional[logging.Handler]
    try:
        _start_message_writer()
        command, sources, parabolic_args = parse_args(args)
        if parabolic_args["help"]:
            print(__doc__.replace("[PARABOLIC_VERSION]", PARABOLIC_VERSION))
            return EXIT_OK
        if parabolic_args["version"]:
            print("parabolic %s" % PARABOLIC_VERSION)
            return EXIT_OK
        if not command:
            print("[ " + _wrap_with(Color.RED, "ERROR") + " ]: No command given.")
            print("Try --help for usage information.")
            return EXIT_NOTHING_TO_DO
        handler = _configure_logging(bool(parabolic_args["verbose"]))
        return _execute(command, sources, parabolic_args)
    except DataError as err:
        _write(err.message, Color.RED)
        return err.exit_code
    except Exception:
        _write("[ERROR] EXCEPTION RAISED DURING PARABOLIC EXECUTION", Color.RED)
        _write("Parabolic: %s" % PARABOLIC_VERSION)
        _write("Python: %s" % sys.version)
        _write("NumPy: %s SciPy: %s" % (np.__version__, scipy.__version__))
        raise
    finally:
        if handler is not None:
            logging.getLogger("parabolic").removeHandler(handler)
        _print_elapsed(start_time, time.time())
        _stop_message_writer()


if __name__ == "__main__":
    main()
