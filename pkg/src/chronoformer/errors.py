"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numeric problems (including divergence) exit 3.
"""


class ChronoformerError(Exception):
    """Base class for every error raised by this package."""


class UsageError(ChronoformerError):
    pass


class ConfigError(UsageError, ValueError):
    pass


class ContractError(ChronoformerError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    pass


class MaskError(ContractError):
    pass


class DataError(ChronoformerError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(ChronoformerError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss
