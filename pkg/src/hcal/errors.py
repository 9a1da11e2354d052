"""Exception hierarchy shared by every module."""


class HCALError(Exception):
    """Base class for all library errors."""


class TaxonomyError(HCALError, ValueError):
    """Malformed or inconsistent label hierarchy."""


class DataError(HCALError, ValueError):
    """Dataset rows that fail validation."""


class ShapeError(HCALError, ValueError):
    """Operand shapes do not conform."""


class DomainError(HCALError, ValueError):
    """Operation undefined for the given input values (log of <= 0, ...)."""


class DegenerateVectorError(DomainError):
    """Vector norm too small to define a direction."""


class NumericalError(HCALError, ArithmeticError):
    """Non-finite value produced during computation."""


class CheckpointError(HCALError, ValueError):
    """Checkpoint file that cannot be restored."""


class ConfigError(HCALError, ValueError):
    """Invalid run or training configuration."""
