"""Exception taxonomy, mapped to CLI exit codes by enhanceval.cli."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EngineError):
    """Invalid input: bad file content, out-of-range values, broken preconditions."""


class FormatError(ValidationError):
    """Byte stream is not a single-file NIfTI-1 volume."""


class UnsupportedError(ValidationError):
    """Well-formed input using a feature we deliberately do not support."""


class TruncationError(ValidationError):
    """Data section shorter than the header promises."""


class LabelValueError(ValidationError):
    """Label map contains a value outside the class coding {0, 1, 2, 3}."""


class AlignmentError(ValidationError):
    """Two grids that must share a voxel lattice do not."""


class DegenerateInputError(ValidationError):
    """Input is structurally valid but degenerate for the requested operation."""


class InputOutputError(EngineError):
    """Missing, unreadable, or unwritable files and directories."""


class DegenerateStatisticsError(EngineError):
    """A statistic is undefined on this input (single class, zero variance, ...)."""


class SeparationError(DegenerateStatisticsError):
    """Logistic regression likelihood is unbounded (perfectly separated data)."""
