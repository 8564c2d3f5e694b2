"""Exception hierarchy. Each error maps to a CLI exit code."""


class CftError(Exception):
    exit_code = 1


class ConfigError(CftError, ValueError):
    exit_code = 2


class DataError(CftError, ValueError):
    exit_code = 3


class EncodingError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(CftError, ArithmeticError):
    exit_code = 4
