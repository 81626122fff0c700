"""Exception hierarchy. The CLI maps each family to an exit code."""


class TemphenoError(Exception):
    """Base class for all package errors."""


class DataError(TemphenoError, ValueError):
    """Malformed or inconsistent input data."""


class ConfigError(TemphenoError, ValueError):
    """Invalid configuration. ``problems`` lists every violation found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MissingArtifactError(TemphenoError, FileNotFoundError):
    """A pipeline stage ran before the stage that produces its input."""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(
            f"missing artifact {path}; run `tempheno {producer}` first"
        )


class NumericError(TemphenoError, ArithmeticError):
    """Non-finite values or a degenerate numerical problem."""
