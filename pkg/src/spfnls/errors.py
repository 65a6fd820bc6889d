"""Exception hierarchy shared by all modules."""


class SpfnlsError(Exception):
    """Base class for library errors."""


class ConfigError(SpfnlsError, ValueError):
    pass


class UnstableRegimeError(SpfnlsError, ValueError):
    """mu <= gamma: no stable standing wave."""


class NoWaveError(SpfnlsError, ValueError):
    pass


class ResolutionError(SpfnlsError, ValueError):
    pass


class GridMismatchError(SpfnlsError, ValueError):
    pass


class BlowupError(SpfnlsError, RuntimeError):
    def __init__(self, msg, time=None):
        super().__init__(msg if time is None else f"{msg} at t={time:.6g}")
        self.time = time


class DiscretizationError(SpfnlsError, RuntimeError):
    pass


class DegenerateSpectrumError(SpfnlsError, RuntimeError):
    pass


class CouplingError(SpfnlsError, RuntimeError):
    """Two consumers of one noise path saw different increments."""


class UnsupportedError(SpfnlsError, TypeError):
    pass
