"""Exception types shared across the package."""


class GqlaError(Exception):
    """Base class for all package errors."""


class ShapeError(GqlaError, ValueError):
    """An array argument has the wrong shape or violates a structural precondition."""


class ParameterError(GqlaError, ValueError):
    """A scalar argument (rank, count, index set) is out of its valid range."""


class NumericError(GqlaError, RuntimeError):
    """A numerical routine failed to converge or produced non-finite values."""


class OutOfSubspaceError(GqlaError, ValueError):
    """A cache entry does not lie in the column space implied by the weights."""


class DegenerateCalibrationError(GqlaError, ValueError):
    """Calibration statistics are degenerate (e.g. a zero-energy side)."""


class CheckpointFormatError(GqlaError, ValueError):
    """A checkpoint file is malformed, truncated, or inconsistent with its manifest."""
