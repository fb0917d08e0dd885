"""Exception hierarchy shared across the package."""


class RefineRecError(Exception):
    """Base class for all package errors."""


class ContractError(RefineRecError):
    """A precondition or invariant of an operation was violated."""


class DimensionError(ContractError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(RefineRecError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RefineRecError, ValueError):
    """Input data could not be ingested or processed."""


class NonFiniteError(ContractError):
    """A loss or gradient became NaN/inf during training."""
