"""Exception hierarchy. Each class carries the process exit code used by the CLI."""


class DbglaError(Exception):
    exit_code = 1


class ConfigError(DbglaError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Operand dimensions do not agree."""


class ValidationError(DbglaError, ValueError):
    exit_code = 3


class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericError(DbglaError, ArithmeticError):
    exit_code = 4


class StorageError(DbglaError, OSError):
    exit_code = 5
