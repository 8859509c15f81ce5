"""Exception types shared across the package.

The CLI maps these onto exit codes: usage and data errors exit 1,
a numerically diverged training run exits 2.
"""


class FormatError(Exception):
    """File is not a valid volume container (bad magic, malformed header)."""


class CorruptionError(Exception):
    """Container header and payload disagree (truncated or oversized payload)."""


class ValidationError(ValueError):
    """Data violates an invariant (wrong units, non-finite voxels, bad dims)."""


class ParameterError(ValueError):
    """Caller supplied an out-of-contract argument or config value."""


class BoundsError(IndexError):
    """Requested region falls outside the volume extent."""


class EmptyMaskError(ValueError):
    """An operation that needs foreground voxels found none."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or Inf loss component."""
