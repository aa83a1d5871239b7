"""Error types raised across the pipeline."""


class ChamferOodError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ChamferOodError):
    """Unknown dataset/recipe names, bad config files, invalid option combinations."""


class IngestionError(ChamferOodError):
    """Dataset files missing or corrupt; message names the offending file."""


class ArgumentError(ChamferOodError, ValueError):
    """Invalid argument values (empty batches, bad counts, mismatched lengths)."""


class ShapeError(ArgumentError):
    """Array shape incompatible with the requested operation."""


class ConstraintError(ArgumentError):
    """A stated precondition cannot be satisfied (e.g. too few classes for pairwise-distinct seeds)."""


class DivergenceError(ChamferOodError):
    """Training produced a non-finite loss; message carries the epoch/batch index."""


class CheckpointError(ChamferOodError):
    """Checkpoint file truncated, corrupt, or written by an incompatible version."""


class UsageError(ChamferOodError):
    """API misuse, e.g. generating from an untrained model without the explicit flag."""
