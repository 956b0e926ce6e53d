"""Exception hierarchy shared by all semnop modules."""


class SemnopError(Exception):
    """Base class for all semnop errors."""


class InvalidArgumentError(SemnopError):
    """A precondition on an argument was violated."""


class UnsupportedFormatError(SemnopError):
    """An input file is not in a supported format (e.g. non-8-bit PNG)."""


class FormatError(SemnopError):
    """A serialized artifact (model container, sidecar, manifest) is malformed."""


class DecodeError(SemnopError):
    """A byte sequence does not decode in the supported instruction subset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class VerificationFailureError(SemnopError):
    """The emulator hit a condition that makes verification impossible
    (stack window overflow, runaway execution)."""


class UnsupportedShapeError(SemnopError):
    """An input image is too small for the classifier."""


class UnfillableBlockError(SemnopError):
    """No semantic NOP sequence exists for the requested block size."""


class NumericalFailureError(SemnopError):
    """The optimizer produced a non-finite loss."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


class ConfigError(SemnopError):
    """A run configuration or dataset manifest is unusable."""
