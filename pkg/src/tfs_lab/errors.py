"""Exception hierarchy. The CLI maps these onto process exit codes."""

from __future__ import annotations


class TfsError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class ConfigError(TfsError):
    exit_code = 1


class DataError(TfsError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class NumericError(TfsError):
    """Non-finite values or shape problems inside the tensor engine."""


class DimensionError(NumericError):
    pass


class DistributionError(NumericError):
    pass


class OptimizerError(NumericError):
    pass


class ModelError(TfsError):
    pass


class CheckpointError(TfsError):
    pass


class ObjectiveError(TfsError):
    pass


class ProtocolError(TfsError):
    pass


class MetricError(TfsError):
    pass
