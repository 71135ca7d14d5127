"""Exception hierarchy shared by all modules.

The CLI maps each class onto a process exit code, so modules raise the most
specific class that applies rather than bare ``ValueError``.
"""

from __future__ import annotations


class RttdError(Exception):
    """Base class for toolkit errors."""

    exit_code = 1


class ValidationError(RttdError, ValueError):
    """Input data or configuration violates a documented contract."""

    exit_code = 2

    def __init__(self, message: str, *, row: int | None = None, source: str | None = None):
        self.row = row
        self.source = source
        where = []
        if source is not None:
            where.append(source)
        if row is not None:
            where.append(f"row {row}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class NumericalError(RttdError, ArithmeticError):
    """A numerical procedure failed or produced an unusable result."""

    exit_code = 3


class ConvergenceError(NumericalError):
    """Iterative fit did not converge; carries a diagnostic message."""
