"""Exception types raised by the simulator and estimator."""


class ParameterError(ValueError):
    """An OTFS frame or pilot parameter violates a structural constraint."""


class LayoutError(ParameterError):
    """A pilot layout does not fit inside the frame grid."""


class EstimationError(RuntimeError):
    """Base class for numerical failures inside an estimation pipeline."""


class DegenerateSubspaceError(EstimationError):
    """The signal subspace is rank deficient for the requested path count."""


class NearCollinearAnglesError(EstimationError):
    """Steering vectors are too close to collinear for a stable projection."""


class NoPathError(EstimationError):
    """A path search produced no usable candidate."""


class DeskScaleError(ParameterError):
    """A frame is too large for a dense effective-channel computation."""
