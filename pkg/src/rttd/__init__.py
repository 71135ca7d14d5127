"""Recurrent-event analysis on time-on-study and reverse time-to-death scales."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import ConvergenceError, NumericalError, RttdError, ValidationError  # noqa: E402

__all__ = ["__version__", "RttdError", "ValidationError", "NumericalError", "ConvergenceError"]
