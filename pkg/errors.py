"""Exception hierarchy shared by every stage of the pipeline.

Each error also derives from the closest builtin so callers can catch
either ``RegionMakeupError`` or e.g. ``ValueError``.
"""


class RegionMakeupError(Exception):
    """Base class for every error raised on purpose by this project."""


class InvalidFaceSpec(RegionMakeupError, ValueError):
    pass


class ShapeMismatch(RegionMakeupError, ValueError):
    pass


class DegenerateConfiguration(RegionMakeupError, ValueError):
    """Collinear landmarks, singular TPS systems, zero-norm embeddings..."""


class EmptyInput(RegionMakeupError, ValueError):
    pass


class DatasetError(RegionMakeupError, IOError):
    pass


class CheckpointError(RegionMakeupError, IOError):
    pass


class CheckpointMismatch(CheckpointError):
    """A checkpoint was built on top of a different frozen checkpoint."""


class ConfigError(RegionMakeupError, KeyError):
    def __str__(self):
        # KeyError quotes its message, which breaks the one-line CLI errors
        return str(self.args[0]) if self.args else ""
