"""Exception types shared across the package."""


class GridMismatchError(ValueError):
    """Two objects were built on different scenario grids or time meshes."""


class StateGridError(RuntimeError):
    """The state truncation box loses too much quadrature mass."""


class EmptyNodeError(RuntimeError):
    """A scenario node received no particles (possible in binned mode only)."""


class ConfigError(ValueError):
    """Invalid or missing run-configuration key.

    ``key`` names the offending entry and ``line`` the source line when the
    config came from a file.
    """

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"key '{key}': "
        super().__init__(prefix + message)
