"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data/file problems with 3, numeric failures with 4.
"""


class ShapeError(ValueError):
    """A tensor or parameter has the wrong rank or dimensions."""


class GraphReplayError(RuntimeError):
    """backward() was called twice on the same recorded graph."""


class NumericError(ArithmeticError):
    """A forward computation produced a non-finite value."""


class TrainingDivergedError(NumericError):
    """The training loss became NaN or infinite."""


class ConfigError(ValueError):
    """A configuration file or override could not be parsed or validated."""


class DataFormatError(ValueError):
    """An input file does not follow its documented format."""


class CheckpointError(DataFormatError):
    """A checkpoint file is malformed or does not match the expected model."""


class PackingError(RuntimeError):
    """Synthetic instance placement could not satisfy the overlap constraints."""
