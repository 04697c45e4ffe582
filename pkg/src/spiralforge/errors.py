"""Exception hierarchy.

Every error carries a ``code`` (its class name) and an ``exit_code`` used by
the command line front end: 1 for usage/configuration errors, 2 for data or
format errors, 3 for numerical failures.
"""


class SpiralForgeError(Exception):
    exit_code = 2

    @property
    def code(self) -> str:
        return type(self).__name__


# -- configuration / usage -------------------------------------------------

class ConfigError(SpiralForgeError):
    exit_code = 1


class BoundsError(ConfigError, ValueError):
    """A parameter lies outside its admissible range."""

    def __init__(self, field, value, low=None, high=None, detail=None):
        self.field = field
        self.value = value
        msg = f"{field}={value!r}"
        if low is not None or high is not None:
            msg += f" outside [{low}, {high}]"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ZeroOrNegativeInput(BoundsError):
    pass


class ResultBelowOne(BoundsError):
    pass


class RadiusOutOfRange(BoundsError):
    pass


class DegenerateDensity(BoundsError):
    pass


class InvalidDims(ConfigError, ValueError):
    pass


# -- data / shapes ---------------------------------------------------------

class ShapeMismatch(SpiralForgeError, ValueError):
    pass


class CoordOutOfRange(SpiralForgeError, ValueError):
    pass


class EmptySplit(SpiralForgeError, ValueError):
    pass


class FormatError(SpiralForgeError, ValueError):
    pass


class BadWindowLength(ShapeMismatch):
    pass


class IndivisibleDims(ShapeMismatch):
    pass


class SeriesTooShort(ShapeMismatch):
    pass


class ImageSmallerThanWindow(ShapeMismatch):
    pass


# -- trajectory feasibility ------------------------------------------------

class InfeasibleReadout(SpiralForgeError, ValueError):
    pass


# -- metrics ---------------------------------------------------------------

class ZeroReference(SpiralForgeError, ValueError):
    pass


class ZeroReferenceEnergy(ZeroReference):
    pass


# -- search ----------------------------------------------------------------

class EvaluatorFailure(SpiralForgeError, RuntimeError):
    """Raised by an evaluator to mark a trial as failed."""


class ExhaustedRetries(SpiralForgeError, RuntimeError):
    pass


# -- numerics --------------------------------------------------------------

class NonFiniteLoss(EvaluatorFailure):
    exit_code = 3


# -- streaming -------------------------------------------------------------

class SourceStall(SpiralForgeError, TimeoutError):
    pass


class StageError(SpiralForgeError, RuntimeError):
    def __init__(self, stage, frame_index, cause):
        self.stage = stage
        self.frame_index = frame_index
        self.cause = cause
        super().__init__(f"stage {stage!r} failed on frame {frame_index}: {cause!r}")
