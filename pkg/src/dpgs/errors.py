"""Exception hierarchy shared by every module."""


class DPGSError(Exception):
    """Base class for all library errors."""


class InvalidInput(DPGSError, ValueError):
    pass


class NumericalError(DPGSError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContractViolation(DPGSError, AssertionError):
    pass


class FormatError(DPGSError, ValueError):
    pass


class IoError(DPGSError, OSError):
    pass


class UsageError(DPGSError):
    pass
