"""Exception types shared across the package.

Every error raised by fixedhead derives from FixedheadError, so callers
(notably the CLI) can catch one base class and turn it into a nonzero exit.
"""


class FixedheadError(Exception):
    """Base class for all fixedhead errors."""


class ShapeError(FixedheadError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(FixedheadError, RuntimeError):
    """An API precondition was violated (non-scalar loss, missing gradient, ...)."""


class LabelError(FixedheadError, ValueError):
    """A class label lies outside [0, num_classes)."""


class DegenerateStatisticsError(FixedheadError, ValueError):
    """Batch statistics are undefined (train-mode batchnorm over a single element)."""


class InvalidOrderError(FixedheadError, ValueError):
    """Hadamard order is not a power of two."""


class DimensionError(FixedheadError, ValueError):
    """Identity-style heads need at least as many channels as classes."""


class UnsupportedHeadError(FixedheadError, ValueError):
    """Operation only defined for a specific head variant."""


class FormatError(FixedheadError, ValueError):
    """On-disk bytes violate the expected file format."""


class SpecError(FixedheadError, ValueError):
    """An architecture description is semantically inconsistent."""


class SpecParseError(SpecError):
    """An architecture file is syntactically invalid or misses required fields."""


class ConfigError(FixedheadError, ValueError):
    """Invalid run configuration."""


class TrainingAborted(FixedheadError, RuntimeError):
    """Training stopped on a non-finite loss."""
