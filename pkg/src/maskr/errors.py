"""Exception types raised across the package."""


class MaskrError(Exception):
    """Base class for all package errors."""


class DimensionError(MaskrError, ValueError):
    pass


class InvalidConfigError(MaskrError, ValueError):
    pass


class DomainError(MaskrError, ValueError):
    pass


class EmptyMaskError(MaskrError, ValueError):
    pass


class TrainingDivergedError(MaskrError, RuntimeError):
    def __init__(self, step, message="non-finite gradient"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class DegenerateInputError(MaskrError, ValueError):
    pass


class NotTrainedError(MaskrError, RuntimeError):
    pass


class CorruptCodegramError(MaskrError, ValueError):
    pass


class FormatError(MaskrError, ValueError):
    pass


class AlignmentError(MaskrError, ValueError):
    pass


class ModelFaultError(MaskrError, RuntimeError):
    pass
