"""Exception hierarchy shared by every module.

Each class carries the CLI exit code of its category so the command-line
entry point can map failures without a lookup table.
"""
from __future__ import annotations


class ShadeLabError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(ShadeLabError, ValueError):
    category = "config"
    exit_code = 2


class ContractError(ShadeLabError, ValueError):
    """A caller broke an operation's precondition."""

    category = "contract"
    exit_code = 2


class ShapeError(ContractError):
    category = "shape"


class InsufficientStylesError(ContractError):
    category = "insufficient-styles"


class DegenerateProjectionError(ContractError):
    category = "degenerate-projection"


class DataError(ShadeLabError, ValueError):
    category = "data"
    exit_code = 3


class FormatError(DataError):
    category = "format"


class NumericError(ShadeLabError, ArithmeticError):
    category = "numeric"
    exit_code = 4

    def __init__(self, message: str, op: str | None = None, iteration: int | None = None):
        self.op = op
        self.iteration = iteration
        parts = [message]
        if op is not None:
            parts.append(f"op={op}")
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        super().__init__(" ".join(parts))


class UnsupportedOpError(ShadeLabError, TypeError):
    category = "unsupported-op"
    exit_code = 2


class StorageError(ShadeLabError, OSError):
    category = "io"
    exit_code = 5
