"""Exception types shared across the package.

Each error carries the CLI exit code it maps to.
"""

from __future__ import annotations


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class DomainError(ConfigError):
    """A bound input lies outside the domain where the term is defined."""

    def __init__(self, term: str, message: str):
        super().__init__(f"{term}: {message}")
        self.term = term


class DataError(LabError):
    exit_code = 3


class DataFormatError(DataError):
    pass


class NumericError(LabError, ArithmeticError):
    exit_code = 4


class StateError(LabError, RuntimeError):
    exit_code = 1
