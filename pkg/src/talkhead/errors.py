"""Exception hierarchy shared by all modules.

The CLI maps each family to its own exit code.
"""


class TalkHeadError(Exception):
    exit_code = 1


class ConfigError(TalkHeadError, ValueError):
    """Invalid configuration, dimensions or shapes."""

    exit_code = 2


class InputError(ConfigError):
    """A malformed input value (audio too short, bad one-hot, ...)."""


class TopologyError(ConfigError):
    pass


class SequenceLengthError(ConfigError):
    pass


class DataIOError(TalkHeadError, OSError):
    exit_code = 3


class MissingFileError(DataIOError):
    pass


class HeaderError(DataIOError):
    """Corrupt or unrecognised binary header."""


class VertexCountError(DataIOError):
    pass


class NumericError(TalkHeadError, ArithmeticError):
    exit_code = 4
