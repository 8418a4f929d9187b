"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or mismatched shapes supplied by the caller."""


class TraceFormatError(ValueError):
    """A trace or report file could not be parsed."""

    def __init__(self, message: str, path=None, lineno: int | None = None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class InvariantError(RuntimeError):
    """An internal consistency check failed."""
