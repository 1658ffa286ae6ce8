"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: usage problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class VoxelCycleError(Exception):
    """Base class for all package errors."""


class ShapeError(VoxelCycleError, ValueError):
    """Tensor or volume dimensions violate an operation's contract."""


class LabelError(VoxelCycleError, ValueError):
    """A label volume contains ids outside the declared class range."""


class NumericError(VoxelCycleError, ArithmeticError):
    """Non-finite values or otherwise degenerate numerics detected."""


class FormatError(VoxelCycleError, ValueError):
    """A serialized file is corrupt, truncated, or of unknown version."""


class SpecError(VoxelCycleError, ValueError):
    """A generation/training spec is internally inconsistent."""
