"""Exception types shared across the package."""


class SmoothNetError(Exception):
    """Base class for all package errors."""


class OrderTooHigh(SmoothNetError):
    pass


class NoReferenceFound(SmoothNetError):
    pass


class CertificationFailed(SmoothNetError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class ShapeMismatch(SmoothNetError, ValueError):
    pass


class NonFiniteIntermediate(SmoothNetError, FloatingPointError):
    pass


class PreconditionFailed(SmoothNetError, ValueError):
    pass


class OutOfDomain(SmoothNetError, ValueError):
    pass


class IndexOutOfRange(SmoothNetError, IndexError):
    pass


class BudgetInfeasible(SmoothNetError):
    """A builder's parameters are numerically unrealizable; ``stage`` names the builder."""

    def __init__(self, message: str, stage: str = ""):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class DerivativeOracleMissing(SmoothNetError):
    pass


class EmptyRegion(SmoothNetError, ValueError):
    pass


class DegenerateInput(SmoothNetError, ValueError):
    pass


class ActivationNotReLU(SmoothNetError, ValueError):
    pass


class DivergedLoss(SmoothNetError, FloatingPointError):
    pass


class AllCellsDiverged(SmoothNetError):
    pass


class ConfigError(SmoothNetError, ValueError):
    pass
