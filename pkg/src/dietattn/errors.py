"""Exception types shared across the library."""


class DietAttnError(Exception):
    """Base class for all library errors."""


class DimensionError(DietAttnError):
    """Operand shapes are incompatible. The message names both shapes."""


class ConfigError(DietAttnError):
    """An AttentionConfig or scheme parameter violates its invariants."""


class SchemeError(DietAttnError):
    """An operation was called for a position scheme it does not support."""


class NumericError(DietAttnError):
    """A numeric routine failed (non-finite value, SVD non-convergence)."""


class DivergenceError(DietAttnError):
    """Training loss exceeded the divergence limit.

    Carries the step index at which divergence was detected.
    """

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss


class StaleCacheError(DietAttnError):
    """A positional-bias cache was used after its parameters mutated."""


class InputError(DietAttnError):
    """Invalid model input (e.g. token index out of vocabulary range)."""


class MeasurementError(DietAttnError):
    """A benchmark measurement is unreliable (e.g. timer resolution)."""
