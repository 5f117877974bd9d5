"""Exception hierarchy shared by every module.

CLI exit codes are attached to the classes so callers can map failures
without string matching.
"""


class SvreidError(Exception):
    exit_code = 1


class ContractViolation(SvreidError, ValueError):
    """An operation was called with inputs outside its documented contract."""

    exit_code = 2


class ConfigError(SvreidError):
    exit_code = 2


class DataError(SvreidError):
    exit_code = 3


class SamplingError(DataError):
    pass


class ProtocolError(DataError):
    pass


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class DivergenceError(SvreidError):
    exit_code = 4
