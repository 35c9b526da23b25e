"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class FaceboundError(Exception):
    exit_code = 1


class ConfigError(FaceboundError, ValueError):
    exit_code = 2


class ContractError(FaceboundError, ValueError):
    """Shape, dimension or range violation at a module boundary."""

    exit_code = 2


class DataError(FaceboundError):
    exit_code = 3


class GeometryError(DataError):
    """Degenerate landmark geometry (e.g. coincident eye centers)."""


class DependencyError(FaceboundError):
    exit_code = 4


class NumericalError(FaceboundError, ArithmeticError):
    exit_code = 5
