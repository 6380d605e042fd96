"""Exception types shared across the package."""


class RieszLabError(Exception):
    """Base class for package-specific failures."""


class DegreeError(RieszLabError, ValueError):
    """Form degree outside the valid range for the requested operation."""


class AliasingError(RieszLabError, ValueError):
    """Grid resolution below the Nyquist limit of the requested weight."""


class WeightSpecError(RieszLabError, ValueError):
    """Weight specification is not a periodic trigonometric polynomial."""


class KernelOverlapError(RieszLabError, ValueError):
    """Singular operator function applied to a form with kernel overlap."""


class ConsistencyError(RieszLabError, RuntimeError):
    """Internal cross-check failed (adjointness / symmetry of assembly)."""


class CurvatureError(RieszLabError, ValueError):
    """Curvature admissibility hypothesis violated for the requested run."""


class ConfigError(RieszLabError, ValueError):
    """Experiment configuration failed validation; message names the field."""


class SimulationError(RieszLabError, RuntimeError):
    """Path generation failed its guards (step size, discard budget)."""
