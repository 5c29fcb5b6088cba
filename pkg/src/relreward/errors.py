"""Exception hierarchy shared by every module of the package."""


class RRFError(Exception):
    """Base class for all package errors."""


class ShapeError(RRFError, ValueError):
    """Array dimensions do not match what an operation expects."""


class ContractError(RRFError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(RRFError, ValueError):
    """Invalid configuration or unusable input data.

    ``key`` names the offending configuration entry when there is one.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class RangeError(RRFError, IndexError):
    """A diffusion step or trajectory index lies outside its valid range."""


class TrainingError(RRFError, FloatingPointError):
    """Training produced a non-finite loss or gradient.

    ``layer`` is the index of the offending layer when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class GenerationError(RRFError):
    """Dataset generation could not complete (e.g. unreachable goal)."""


class EvaluationError(RRFError):
    """An evaluation protocol has nothing to evaluate."""


class IntegrationError(RRFError, FloatingPointError):
    """SDE integration left the finite range; ``step`` is where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(RRFError, ValueError):
    """A serialized file is malformed; ``offset`` is the byte position."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DependencyError(RRFError):
    """A pipeline stage is missing artifacts produced by an earlier stage."""

    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("missing prerequisite artifact(s): " + ", ".join(self.missing))
