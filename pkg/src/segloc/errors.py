"""Exception types shared across the package."""


class SeglocError(Exception):
    """Base class for all package-specific errors."""


class CloudParseError(SeglocError):
    """A point-cloud file could not be parsed; carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class DegenerateSegmentError(SeglocError):
    """Segment has zero spatial extent (all points identical); cannot be normalized."""


class DegenerateGeometryError(SeglocError):
    """Point configuration is rank-deficient (collinear/coincident); no unique rigid fit."""


class NumericalBlowupError(SeglocError):
    """A forward pass produced non-finite values."""


class TrainingDivergedError(SeglocError):
    """Training loss became non-finite."""


class InsufficientClassesError(SeglocError):
    """Not enough classes with >= 2 members to form a batch or triplet."""


class ConfigError(SeglocError):
    """Invalid configuration value; message names the offending field."""
