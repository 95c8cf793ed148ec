"""Exception hierarchy shared across the package."""


class Tsp3dError(Exception):
    """Base class for all package errors."""


class InvalidInput(Tsp3dError, ValueError):
    pass


class EmptyScene(InvalidInput):
    pass


class EmptyGrid(InvalidInput):
    pass


class EmptyText(InvalidInput):
    pass


class EmptyPrediction(InvalidInput):
    pass


class ShapeError(Tsp3dError, ValueError):
    pass


class LevelError(Tsp3dError, ValueError):
    pass


class LevelUnderflow(LevelError):
    pass


class InvalidK(InvalidInput):
    pass


class ConfigError(Tsp3dError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class InvalidEps(InvalidInput):
    pass


class NumericError(Tsp3dError, ArithmeticError):
    """A non-finite value or an out-of-domain probability was produced."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class DeterminismError(Tsp3dError, RuntimeError):
    pass


class GenerationError(Tsp3dError, RuntimeError):
    pass


class CheckpointError(Tsp3dError, IOError):
    pass
