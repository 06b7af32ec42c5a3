"""Exception types raised across the package."""


class HomolensError(Exception):
    """Base class for all package errors."""


class InvalidSpec(HomolensError, ValueError):
    """A network, loss, or schedule description violates its construction rules."""


class DimensionMismatch(HomolensError, ValueError):
    pass


class ZeroNormalizedLayer(HomolensError, FloatingPointError):
    """A normalized layer (or one of its rows) has numerically zero norm."""


class ZeroWeightNorm(HomolensError, FloatingPointError):
    pass


class UndefinedRatio(HomolensError, ArithmeticError):
    """The loss derivative at the unit-norm point vanishes, so the alignment ratio is undefined."""


class WeightCollapse(HomolensError, FloatingPointError):
    def __init__(self, msg, t=None):
        super().__init__(msg)
        self.t = t


class NonFiniteUpdate(HomolensError, FloatingPointError):
    def __init__(self, msg, t=None):
        super().__init__(msg)
        self.t = t


class IndexOutOfRange(HomolensError, IndexError):
    pass


class InvalidConstants(HomolensError, ValueError):
    pass


class InvalidNoiseRate(HomolensError, ValueError):
    pass


class NonZeroBayesRequired(HomolensError, ValueError):
    """The experiment needs a task whose best achievable sphere loss is strictly positive."""


class ConfigError(HomolensError, ValueError):
    pass
