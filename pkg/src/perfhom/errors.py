"""Exception hierarchy shared by all modules."""


class PerfhomError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PerfhomError, ValueError):
    """Malformed or inconsistent input configuration."""


class RegimeError(PerfhomError, ValueError):
    """The requested scaling does not give an admissible hole size."""


class GeometryError(PerfhomError, ValueError):
    """A perforation violates the geometric assumptions."""


class CellProblemError(PerfhomError):
    """A cell problem could not be solved or its constant extracted."""


class CriterionError(PerfhomError, ValueError):
    """Window parameters are incompatible with the field being checked."""


class MeshError(PerfhomError):
    """Mesh generation or refinement failed."""


class SolverError(PerfhomError):
    """A finite-element solve failed (singular system, no convergence)."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class ResolutionError(PerfhomError):
    """Discretisation error is too large relative to the measured quantity."""


class StageError(PerfhomError):
    """A scenario stage failed; carries the stage name and epsilon."""

    def __init__(self, stage, eps, cause):
        super().__init__(f"stage {stage!r} failed at eps={eps:g}: {cause}")
        self.stage = stage
        self.eps = eps
        self.cause = cause
