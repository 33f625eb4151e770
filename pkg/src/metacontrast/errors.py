"""Exception types shared across the package."""


class MetacontrastError(Exception):
    """Base class for all package errors."""


class ShapeError(MetacontrastError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class OpDomainError(MetacontrastError):
    """Operand values fall outside an operation's mathematical domain
    (log of a non-positive value, division by zero, ...)."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class ConfigError(MetacontrastError):
    """Invalid or inconsistent configuration."""


class CheckpointError(MetacontrastError):
    """Malformed checkpoint/dataset file or config mismatch on load."""


class NumericalError(MetacontrastError):
    """A loss or gradient became non-finite during training.

    ``step`` carries the inner-loop step index when the failure occurred
    inside task adaptation, else None.
    """

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (inner step {step})"
        super().__init__(message)


class GradCheckFailure(MetacontrastError):
    """One or more finite-difference checks exceeded tolerance."""
