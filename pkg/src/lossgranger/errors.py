"""Exception hierarchy.

Everything raised on purpose by the package derives from :class:`LossGrangerError`.
The CLI maps :class:`UserError` subclasses to exit code 1 and everything else
to exit code 2.
"""


class LossGrangerError(Exception):
    pass


class UserError(LossGrangerError):
    """Bad input supplied by the caller (paths, shapes, arguments, files)."""


class InvalidArgumentError(UserError, ValueError):
    pass


class InputShapeError(UserError, ValueError):
    pass


class InvalidLabelError(UserError, ValueError):
    pass


class TapShapeError(UserError, ValueError):
    pass


class RankingError(UserError, ValueError):
    pass


class DatasetError(UserError, ValueError):
    pass


class ModelFormatError(UserError):
    """Model file could not be parsed; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(UserError):
    pass


class StaleTraceError(LossGrangerError):
    """A forward trace was used with a model it was not produced by."""


class NumericError(LossGrangerError, FloatingPointError):
    """Non-finite value in parameters, activations, gradients or losses."""


class GenerationError(LossGrangerError):
    pass


class ExplanationError(LossGrangerError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"sample {index}: {cause}")
        self.index = index
        self.cause = cause
