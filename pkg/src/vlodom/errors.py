"""Exception types shared across the package."""


class GimbalLockError(ValueError):
    """Euler decomposition requested too close to the pitch = +/-90 deg singularity."""


class EmptyMaskError(ValueError):
    """An operation that needs at least one valid pixel received none."""


class DegenerateWarpError(RuntimeError):
    """A warp left no valid pixel to average a photometric loss over."""


class DivergenceError(RuntimeError):
    """Optimization diverged. Carries the loss history up to the failure."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class DeterminismError(RuntimeError):
    """A function under finite-difference test returned different values on repeated calls."""


class CalibParseError(ValueError):
    """Malformed calibration or pose file. Carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class FormatError(ValueError):
    """A binary file does not match its expected layout."""
