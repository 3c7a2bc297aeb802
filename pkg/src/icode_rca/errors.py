class IcodeError(Exception):
    """
    Base class for every error raised by icode_rca.
    - exit_code: the process exit status main() reports for this error.
    """

    exit_code = 1


class ValidationError(IcodeError):
    """Invalid configuration, protocol arithmetic or precondition."""

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(ValidationError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class CheckpointError(ValidationError):
    """A model checkpoint is truncated, of another version, or has the wrong shape."""


class DivergenceError(IcodeError):
    """A numerical integration or training step produced non-finite or exploding values."""

    exit_code = 3

    def __init__(self, message, step=None, epoch=None, batch=None):
        self.reason = message
        self.step = step
        self.epoch = epoch
        self.batch = batch
        context = [
            f"{key}={value}"
            for key, value in (("epoch", epoch), ("batch", batch), ("step", step))
            if value is not None
        ]
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class ArtifactError(IcodeError):
    """A required file or directory is missing or cannot be read or written."""

    exit_code = 4
