"""Exception types shared across the package."""


class CertDistillError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CertDistillError, ValueError):
    pass


class DegenerateBatchError(CertDistillError, ValueError):
    """Batch statistics requested on a batch that cannot provide them."""


class ParameterError(CertDistillError, ValueError):
    pass


class InputError(CertDistillError, ValueError):
    pass


class UsageError(CertDistillError, RuntimeError):
    pass


class ConfigurationError(CertDistillError, ValueError):
    pass


class FormatError(CertDistillError, ValueError):
    """Malformed on-disk container. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(CertDistillError, RuntimeError):
    pass
