"""Exception hierarchy shared by every stage of the pipeline."""


class HDVError(Exception):
    """Base class for all pipeline errors."""


class ParseError(HDVError):
    pass


class ValidationError(HDVError, ValueError):
    pass


class IoError(HDVError, OSError):
    pass


class InsufficientPoints(HDVError):
    pass


class DegenerateNeighborhood(HDVError):
    pass


class CalibrationError(HDVError):
    pass


class MetadataRequired(HDVError):
    pass


class TargetTooLarge(HDVError):
    pass


class ShapeError(HDVError, ValueError):
    pass


class AssignmentError(HDVError, ValueError):
    pass


class ContractError(HDVError):
    pass


class ZeroSupervision(HDVError):
    pass


class AbsentClass(HDVError):
    pass


class EmptySlice(HDVError):
    pass


class SpecTooSparse(HDVError):
    pass


class DivergenceError(HDVError):
    """Raised when training produces a non-finite loss."""
