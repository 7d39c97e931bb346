"""Exception hierarchy; each class maps to one CLI exit code."""


class TranxError(Exception):
    exit_code = 2


class UsageError(TranxError):
    exit_code = 1


class ContractError(TranxError, ValueError):
    """Input violates a documented precondition (shape, range, finiteness)."""

    exit_code = 2


class ConfigError(ContractError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class FormatError(ContractError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte offset {offset}: {message}")


class NumericError(TranxError, ArithmeticError):
    exit_code = 3


class DegenerateInputError(ContractError):
    pass
