"""Exception hierarchy shared by every asyncdyna module."""

from __future__ import annotations

from typing import Optional


class AsyncDynaError(Exception):
    """Root of all asyncdyna errors."""


class InvalidArgumentError(AsyncDynaError, ValueError):
    """Dimension mismatch, malformed blob or invalid trajectory."""


class NumericError(AsyncDynaError, ArithmeticError):
    """A computation produced or received non-finite values."""


class PreconditionError(AsyncDynaError, RuntimeError):
    """An operation was called in a state where it cannot run."""


class ConfigError(AsyncDynaError, ValueError):
    """Invalid experiment configuration, located by key and line."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = ""
        if key is not None:
            where = f"{key}"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(f"{where}{message}")


class RunAbortedError(AsyncDynaError, RuntimeError):
    """A worker failed during an asynchronous run."""

    def __init__(self, worker: str, cause: BaseException):
        self.worker = worker
        self.cause = cause
        super().__init__(f"worker '{worker}' failed: {type(cause).__name__}: {cause}")
