"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`REDError`,
and each family maps onto one CLI exit code (see :mod:`red_density.cli`).
"""


class REDError(Exception):
    """Base class for all package errors."""


class ContractError(REDError, ValueError):
    """A caller broke an operation's precondition (bad shape, empty input...)."""


class NumericError(REDError, ArithmeticError):
    """A numeric failure: singular transform, non-finite loss, degenerate test."""


class SingularTransformError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


class DegenerateTestError(NumericError):
    pass


class DataError(REDError, ValueError):
    """Problems with an input dataset."""


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class RaggedRowError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class MissingColumnError(DataError):
    pass


class LabelDomainError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class CheckpointError(REDError):
    """Base for checkpoint loading problems."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    """Checkpoint contents do not match a recorded digest."""


class ShapeMismatchError(ContractError):
    pass
