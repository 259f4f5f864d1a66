"""Exception types raised across the package."""


class FedGenError(ValueError):
    """Base class; every subclass maps to CLI exit code 2."""


class ImpossibleSchedule(FedGenError):
    pass


class RankDeficient(FedGenError):
    pass


class BoundaryDimension(FedGenError):
    pass


class BatchTooSmall(FedGenError):
    pass


class RegimeGap(FedGenError):
    pass


class DimensionViolation(FedGenError):
    pass


class InvalidConfig(FedGenError):
    pass
