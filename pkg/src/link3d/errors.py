"""Exception types shared across the library."""


class BoundsError(ValueError):
    """A coordinate component lies outside the packable range."""


class DuplicateCoordError(ValueError):
    """The same voxel coordinate appears more than once."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class ConfigError(ValueError):
    """Invalid or unsupported configuration."""


class FileFormatError(ValueError):
    """An input file does not match the expected binary layout."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
