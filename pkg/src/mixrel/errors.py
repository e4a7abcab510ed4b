"""Exception types raised across the package."""


class MixrelError(Exception):
    """Base class for all package errors."""


class DenominatorZero(MixrelError):
    pass


class MalformedEncoding(MixrelError, ValueError):
    pass


class NoSuccessors(MixrelError):
    pass


class CounterReused(MixrelError):
    pass


class PayloadTooLarge(MixrelError):
    pass


class ReplayDetected(MixrelError):
    pass


class IntegrityFailed(MixrelError):
    """Raised after the tag was recorded with flag=false."""

    def __init__(self, tag: bytes, msg: str = "integrity check failed"):
        super().__init__(msg)
        self.tag = tag


class NotAMeasurement(MixrelError):
    pass


class IsAMeasurement(MixrelError):
    pass


class ProofInvalid(MixrelError):
    pass


class OpeningInvalid(MixrelError):
    pass


class CommitmentMissing(MixrelError):
    pass


class EmptyInput(MixrelError, ValueError):
    pass


class DegenerateCounters(MixrelError, ValueError):
    pass


class ConfigInvalid(MixrelError, ValueError):
    pass


class LayerTooSmall(MixrelError):
    pass


class PlacementInfeasible(MixrelError, ValueError):
    pass


class UnknownFigure(MixrelError, KeyError):
    pass
