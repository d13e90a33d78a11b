"""Exception hierarchy shared by every vbcls module."""


class VBCLSError(Exception):
    """Base class for all errors raised by vbcls."""


class InvalidShapeError(VBCLSError, ValueError):
    pass


class StaleTapeError(VBCLSError, RuntimeError):
    pass


class NumericInstabilityError(VBCLSError, ArithmeticError):
    pass


class StateError(VBCLSError, RuntimeError):
    pass


class InvalidLabelError(VBCLSError, ValueError):
    pass


class ConfigurationError(VBCLSError, ValueError):
    pass


class UnknownDomainError(VBCLSError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DivergenceError(VBCLSError, ArithmeticError):
    """Non-finite loss during training; carries where it happened."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CorruptCheckpointError(VBCLSError, ValueError):
    pass


class EmptyDatasetError(VBCLSError, ValueError):
    pass


class DegenerateAlignmentError(VBCLSError, ArithmeticError):
    pass


class FormatError(VBCLSError, ValueError):
    pass


class ParseError(FormatError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class FileSystemError(VBCLSError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
