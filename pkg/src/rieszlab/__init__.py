"""rieszlab: Riesz transforms on forms over weighted model manifolds.

Two engines compute the same objects. A dense spectral oracle diagonalizes
the weighted Hodge Laplacian on the grid and applies operator functions
exactly per mode; a Monte Carlo engine runs the stopped diffusion in the
half-space and evaluates the martingale-transform representation formulas.
The verification suite cross-validates every identity, inequality, and
constant the two engines share.
"""

from .errors import (
    AliasingError,
    ConfigError,
    ConsistencyError,
    CurvatureError,
    DegreeError,
    KernelOverlapError,
    RieszLabError,
    SimulationError,
    WeightSpecError,
)
from .geometry import (
    DiscreteKForm,
    GradientCoupling,
    Model,
    TrigPolynomial,
    WeightedManifold,
    WeitzenboeckField,
    build_manifold,
    codifferential,
    component_count,
    exterior_derivative,
    gradient_coupling,
    inner_product,
    lp_norm,
    weitzenboeck_field,
)

__version__ = "0.1.0"
