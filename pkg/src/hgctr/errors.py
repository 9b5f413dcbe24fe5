"""Exception hierarchy shared across the package."""


class HgctrError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HgctrError):
    """An operand has an incompatible or malformed shape."""


class ContractError(HgctrError):
    """An API precondition was violated (bad argument, broken invariant)."""


class DataFormatError(HgctrError):
    """An input file is malformed or inconsistent."""


class StructureError(HgctrError):
    """A hypergraph violates a structural invariant (e.g. zero-degree node)."""


class UndefinedMetricError(HgctrError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class ConfigError(HgctrError):
    """Invalid configuration or command-line arguments."""
