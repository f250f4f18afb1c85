"""Exception hierarchy shared by every module.

Validation problems (bad shapes, labels, files, configs) derive from
``ValidationError`` and map to CLI exit code 2; ``NumericalError`` maps to 3.
"""


class EgoZARError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(EgoZARError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class DegenerateBatchError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class InsufficientPointsError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class CorruptionError(FormatError):
    pass


class IngestionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericalError(EgoZARError, ArithmeticError):
    pass
