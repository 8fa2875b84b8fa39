from typing import Optional, Tuple

EXIT_OK = 0
EXIT_DATA_ERROR = 2
EXIT_SOLVER_FAILURE = 3
EXIT_ETA_SEARCH_FAILED = 4
EXIT_NOTHING_TO_DO = 252


class DataError(Exception):
    """Base for every error the toolkit raises on purpose.

    ``message`` is what the command line prints; ``exit_code`` is what it returns.
    """

    exit_code = EXIT_DATA_ERROR

    def __init__(self, message=""):  # type: (str) -> None
        super(DataError, self).__init__(message)
        self.message = message


class InvalidArgument(DataError):
    pass


class Unsupported(DataError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, column=None):
        # type: (str, Optional[int], Optional[int]) -> None
        if line is not None:
            message = "%s (line %d, column %d)" % (message, line, column or 1)
        super(ParseError, self).__init__(message)
        self.line = line
        self.column = column

    @property
    def position(self):  # type: () -> Tuple[Optional[int], Optional[int]]
        return self.line, self.column


class SolverFailure(DataError):
    exit_code = EXIT_SOLVER_FAILURE

    def __init__(self, message, status=None):  # type: (str, Optional[str]) -> None
        super(SolverFailure, self).__init__(message)
        self.status = status


class DistanceUnavailable(DataError):
    exit_code = EXIT_SOLVER_FAILURE


class EtaSearchFailed(DataError):
    exit_code = EXIT_ETA_SEARCH_FAILED


class GapUndefined(DataError):
    pass


class InternalError(DataError):
    exit_code = EXIT_SOLVER_FAILURE
