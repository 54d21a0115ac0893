"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see cli.py), so new error
conditions should reuse one of the classes below rather than raising
bare ValueErrors.
"""


class SwarmLensError(Exception):
    """Base class for all package errors."""


class ValidationError(SwarmLensError):
    """Bad argument values, shapes, or domain preconditions. Exit code 4."""


class ShapeError(ValidationError):
    """Tensor/image dimensions do not satisfy an operation's contract."""


class FormatError(SwarmLensError):
    """Malformed or truncated on-disk artifact (flo/pgm/ppm/checkpoint). Exit code 3."""


class UnsupportedFormatError(FormatError):
    """Recognized but unsupported file variant (e.g. ASCII P2/P3 netpbm)."""


class GraphError(SwarmLensError):
    """Autodiff graph contract violation (e.g. backward on a non-scalar)."""


class TrainingError(SwarmLensError):
    """Training diverged or could not proceed. Exit code 5."""
