"""Exception types shared across the package."""


class VeilvecError(Exception):
    """Base class for all veilvec errors."""


class ConfigError(VeilvecError):
    """Semantically invalid configuration (bad sizes, fractions, ranges)."""


class ParseError(VeilvecError):
    """Malformed input file. Carries the offending line number when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DataError(VeilvecError):
    """Input data violates an operation's precondition."""


class NumericalError(VeilvecError):
    """Non-finite values or a numerically degenerate computation."""
