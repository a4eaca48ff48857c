"""Exception types raised across the package."""

from __future__ import annotations


class MissfuseError(Exception):
    """Base class for every error raised by missfuse."""


class DimensionError(MissfuseError, ValueError):
    pass


class ConfigError(MissfuseError, ValueError):
    pass


class DataError(MissfuseError, ValueError):
    pass


class ParseError(DataError):
    """Malformed cohort or checkpoint file; carries the location of the fault."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        prefix = f"{', '.join(loc)}: " if loc else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class ProtocolError(MissfuseError, ValueError):
    pass


class GradCheckError(MissfuseError, ArithmeticError):
    pass


class DivergenceError(MissfuseError, ArithmeticError):
    """Training produced a non-finite loss.

    ``params`` holds the last good (best validation) checkpoint and ``history``
    the epochs completed before the failure.
    """

    def __init__(self, message: str, *, epoch: int, batch: int, params=None, history=None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch
        self.params = params
        self.history = history
