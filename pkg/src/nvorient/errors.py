"""Exception hierarchy shared by the library and the CLI."""


class NVError(Exception):
    """Base class for all nvorient errors."""


class ConfigError(NVError, ValueError):
    pass


class InconsistentProjectionError(NVError, ValueError):
    """A projection exceeds the total-field magnitude it belongs to."""


class InconsistentSplittingError(NVError, ValueError):
    """A splitting cannot be produced by any projection in [0, |B_total|]."""


class ConvergenceError(NVError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class FitError(NVError, RuntimeError):
    pass


class UnresolvedPeaksError(FitError):
    def __init__(self, message, found=None):
        super().__init__(message)
        self.found = found


class GridError(NVError, ValueError):
    pass


class DegenerateGeometryError(NVError, ValueError):
    pass


class InconsistentConstraintsError(NVError, ValueError):
    pass


class BoundsTooTightError(NVError, RuntimeError):
    pass


class UnidentifiableError(NVError, ValueError):
    def __init__(self, message, directions=None):
        super().__init__(message)
        self.directions = directions


class SamplingError(NVError, RuntimeError):
    pass
