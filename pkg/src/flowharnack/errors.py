"""Exception hierarchy shared by all modules."""


class FlowHarnackError(Exception):
    """Base class for every error raised by the package."""


class ChartMismatchError(FlowHarnackError, ValueError):
    """Fields defined on different grids were combined."""


class DegenerateMetricError(FlowHarnackError):
    def __init__(self, message, time=None):
        super().__init__(message if time is None else f"{message} (t={time:.6g})")
        self.time = time


class CFLError(FlowHarnackError):
    def __init__(self, dt, limit):
        super().__init__(f"time step {dt:.3e} exceeds stability limit {limit:.3e}")
        self.dt = dt
        self.limit = limit


class PositivityError(FlowHarnackError):
    def __init__(self, time, minimum):
        super().__init__(f"solution lost positivity at t={time:.6g} (min={minimum:.3e})")
        self.time = time
        self.minimum = minimum


class TrajectoryRangeError(FlowHarnackError, ValueError):
    """A time outside the stored trajectory (or an endpoint where an interior time is needed)."""


class NormalizationError(FlowHarnackError, ValueError):
    def __init__(self, mass, tol):
        super().__init__(f"density not normalized: mass={mass:.12g} (tol {tol:.1e})")
        self.mass = mass


class ConvergenceError(FlowHarnackError):
    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class ConfigError(FlowHarnackError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingAuxError(FlowHarnackError, ValueError):
    """ExtendedRicci needs the scalar field it is coupled to."""
