"""Exception hierarchy shared by every module."""


class AtinukeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AtinukeError, ValueError):
    """An invalid model or attention configuration.

    ``problems`` lists every violated constraint, not just the first one.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


class ShapeError(AtinukeError, ValueError):
    pass


class IndexRangeError(AtinukeError, IndexError):
    """An integer id or position outside the permitted range."""


class NumericError(AtinukeError, ArithmeticError):
    """A NaN or infinity where only finite values are allowed."""


class ContractError(AtinukeError, ValueError):
    pass


class CheckpointError(AtinukeError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class InconsistentCheckpointError(CheckpointError):
    pass


class NonFiniteCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass
