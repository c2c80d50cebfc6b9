"""Exception types raised across the R-DiT toolkit."""


class RDitError(Exception):
    """Mix-in base so callers (the CLI) can catch every toolkit error at once."""


class DimensionError(RDitError, ValueError):
    """Shapes or grids that do not line up."""


class ContractError(RDitError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(RDitError, ValueError):
    """Invalid configuration values or unknown configuration keys."""


class SceneParseError(RDitError, ValueError):
    """Malformed scene record or geometry-bank file.

    ``field`` is a dotted path such as ``scenes[2].instances[0].subject_box``;
    ``line`` is the 1-based source line when the parser could locate it.
    """

    def __init__(self, message: str, field: str = None, line: int = None):
        location = []
        if field:
            location.append(f"field {field}")
        if line is not None:
            location.append(f"line {line}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.field = field
        self.line = line


class CheckpointError(RDitError, ValueError):
    """Checkpoint file with wrong magic, unknown version or truncated payload."""


class NumericError(RDitError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class SamplingError(RDitError, RuntimeError):
    """Rejection sampling ran out of attempts."""
