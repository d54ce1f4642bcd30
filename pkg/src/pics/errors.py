"""Exception taxonomy shared across the pipeline.

Every stage raises one of these (or a subclass) so the CLI can map
failures onto a small set of exit codes without parsing messages.
"""


class PicsError(Exception):
    """Base class for all pipeline errors."""


class FormatError(PicsError):
    """A file on disk is malformed or uses an unsupported encoding."""


class ShapeError(PicsError):
    """Array shapes or dtypes are inconsistent with the operation."""


class ConfigError(PicsError):
    """A configuration value is out of range, unknown, or contradictory."""


class DataError(PicsError):
    """Dataset-level inconsistency: missing channels, duplicate records."""


class CheckpointError(PicsError):
    """A model checkpoint is unreadable or disagrees with its config."""
