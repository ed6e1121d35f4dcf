"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation/contract problems exit 1,
numerical failures exit 2, file problems exit 3.
"""


class NlfError(Exception):
    exit_code = 1


class ValidationError(NlfError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class DegenerateError(ValidationError):
    """Input is geometrically degenerate (empty mask, collinear cloud, ...)."""


class NumericalError(NlfError, ArithmeticError):
    exit_code = 2


class CheckpointError(NlfError, OSError):
    exit_code = 3


class IncompatibleCheckpointError(CheckpointError):
    pass
