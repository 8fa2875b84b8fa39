import multiprocessing
from typing import Callable, Dict, List, Tuple

from .errors import DataError
from .instance_io import FORMATS
from .relaxation import FULL, SPARSITY
from .sequential import BACKTRACKING, CERTIFIED, FIXED, STATIC

COMMANDS = ("relax", "sequential", "accelerated", "theory", "sysid", "bench")
SOURCE_COUNT = {
    "relax": 1,
    "sequential": 1,
    "accelerated": 1,
    "theory": 1,
    "sysid": 0,
    "bench": 1,
}
SOLVER_NAMES = ("reference", "external")
BENCH_MODES = ("relax", "sequential", "accelerated")


def _processes_count():  # type: () -> int
    try:
        return max(multiprocessing.cpu_count(), 2)
    except NotImplementedError:
        return 2


def _choice(*allowed):  # type: (str) -> Callable[[str], str]
    def convert(value):  # type: (str) -> str
        if value not in allowed:
            raise ValueError(value)
        return value

    return convert


def _positive_float(value):  # type: (str) -> float
    number = float(value)
    if not number > 0:
        raise ValueError(value)
    return number


def _positive_int(value):  # type: (str) -> int
    number = int(value)
    if number < 1:
        raise ValueError(value)
    return number


def _processes(value):  # type: (str) -> int
    return _processes_count() if value == "all" else _positive_int(value)


def _default_args():  # type: () -> Dict[str, object]
    return {
        "verbose": False,
        "help": False,
        "version": False,
        "auto-eta": False,
        "box-cuts": False,
        "baseline": False,
        "eta": None,
        "pairs": None,
        "rel-tol": 1e-4,
        "max-rounds": None,
        "solver": "reference",
        "seed": 0,
        "out": None,
        "processes": _processes_count(),
        "format": None,
        "rounds-probe": 10,
        "lam": 0.5,
        "lam-rule": BACKTRACKING,
        "eta-rule": STATIC,
        "mode": "relax",
        "n": 4,
        "m": 3,
        "horizon": 81,
        "stride": 4,
        "sigma": 0.1,
        "runs": 1,
    }


def _read_argumentfile(path):  # type: (str) -> List[str]
    try:
        with open(path, "r", encoding="utf-8") as argfile:
            lines = argfile.readlines()
    except IOError:
        raise DataError("Error: File '%s' not found." % path)
    args = []  # type: List[str]
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("--") and " " in line:
            option, value = line.split(" ", 1)
            args += [option, value.strip()]
        else:
            args.append(line)
    return args


def parse_args(args):  # type: (List[str]) -> Tuple[str, List[str], Dict[str, object]]
    """Split ``args`` into the command, its sources and the option dictionary."""
    parabolic_args = _default_args()
    flag_args = {"verbose", "help", "version", "auto-eta", "box-cuts", "baseline"}
    value_args = {
        "eta": _positive_float,
        "pairs": _choice(FULL, SPARSITY),
        "rel-tol": _positive_float,
        "max-rounds": _positive_int,
        "solver": _choice(*SOLVER_NAMES),
        "seed": int,
        "out": str,
        "processes": _processes,
        "format": _choice(*FORMATS),
        "rounds-probe": _positive_int,
        "lam": float,
        "lam-rule": _choice(BACKTRACKING, FIXED),
        "eta-rule": _choice(STATIC, CERTIFIED),
        "mode": _choice(*BENCH_MODES),
        "n": _positive_int,
        "m": _positive_int,
        "horizon": _positive_int,
        "stride": _positive_int,
        "sigma": float,
        "runs": _positive_int,
    }  # type: Dict[str, Callable[[str], object]]

    remaining = []  # type: List[str]
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            remaining.append(arg)
            i += 1
            continue
        arg_name = arg[2:]
        if arg_name == "argumentfile":
            if i + 1 >= len(args):
                raise DataError("--argumentfile requires a value")
            args = args[:i] + _read_argumentfile(args[i + 1]) + args[i + 2 :]
            continue
        if arg_name in flag_args:
            parabolic_args[arg_name] = True
            i += 1
            continue
        if arg_name in value_args:
            if i + 1 >= len(args):
                raise DataError("--%s requires a value" % arg_name)
            try:
                parabolic_args[arg_name] = value_args[arg_name](args[i + 1])
            except (ValueError, TypeError):
                raise DataError("Invalid value for --%s: %s" % (arg_name, args[i + 1]))
            i += 2
            continue
        raise DataError("Unknown option %s" % arg)

    if parabolic_args["help"] or parabolic_args["version"]:
        return "", remaining, parabolic_args
    if not remaining:
        return "", [], parabolic_args
    command, sources = remaining[0], remaining[1:]
    if command not in COMMANDS:
        raise DataError(
            "Unknown command '%s', expected one of %s" % (command, ", ".join(COMMANDS))
        )
    if len(sources) != SOURCE_COUNT[command]:
        raise DataError(
            "Command '%s' expects %d argument%s, got %d"
            % (
                command,
                SOURCE_COUNT[command],
                "" if SOURCE_COUNT[command] == 1 else "s",
                len(sources),
            )
        )
    if command in ("sequential", "accelerated") and not (
        parabolic_args["eta"] or parabolic_args["auto-eta"]
    ):
        raise DataError("Command '%s' needs --eta or --auto-eta" % command)
    if parabolic_args["box-cuts"] and command not in ("relax", "bench"):
        raise DataError("--box-cuts applies to relax and bench only")
    return command, sources, parabolic_args
