"""Model manifolds, discrete forms, and the weighted exterior calculus.

The two models are the flat circle and the flat square torus, both with the
metric inherited from [0, 2*pi)^dim and a smooth positive weight exp(-phi)
multiplying the volume measure. phi is restricted to trigonometric
polynomials so that its derivatives are available exactly; every derivative
of grid data is spectral, hence exact for band-limited input.

Forms are stored componentwise in the global coordinate frame:

* circle:  k=0 -> (f,),  k=1 -> (f,) meaning f dx
* torus:   k=0 -> (f,),  k=1 -> (f1, f2),  k=2 -> (f,) meaning f dx1^dx2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import AliasingError, DegreeError, WeightSpecError
from .fourier import grid_points, spectral_derivative

__all__ = [
    "Model",
    "TrigPolynomial",
    "WeightedManifold",
    "DiscreteKForm",
    "WeitzenboeckField",
    "GradientCoupling",
    "build_manifold",
    "component_count",
    "exterior_derivative",
    "codifferential",
    "weitzenboeck_field",
    "weitzenboeck_at",
    "gradient_coupling",
    "pointwise_norm",
    "lp_norm",
    "inner_product",
    "form_to_csv_rows",
]


class Model:
    CIRCLE = "circle"
    TORUS2 = "torus2"


_DIM = {Model.CIRCLE: 1, Model.TORUS2: 2}

# components per degree, indexed by model dimension
_NCOMP = {1: {0: 1, 1: 1}, 2: {0: 1, 1: 2, 2: 1}}


def component_count(model: str, degree: int) -> int:
    dim = _DIM[model]
    try:
        return _NCOMP[dim][degree]
    except KeyError:
        raise DegreeError(f"degree {degree} invalid on a {dim}-dimensional model")


@dataclass(frozen=True)
class TrigPolynomial:
    """Finite trigonometric polynomial sum_j c_j cos(n_j.x) + s_j sin(n_j.x).

    ``terms`` is a sequence of (frequency tuple, cos amplitude, sin amplitude).
    Frequencies must be integer vectors; that is what makes the weight periodic.
    """

    terms: tuple = ()

    @staticmethod
    def validate(terms: Iterable, dim: int) -> "TrigPolynomial":
        normalized = []
        for term in terms:
            freq, c_amp, s_amp = term
            if np.isscalar(freq):
                freq = (freq,)
            freq = tuple(freq)
            if len(freq) != dim:
                raise WeightSpecError(
                    f"frequency {freq} has {len(freq)} entries, expected {dim}"
                )
            for f in freq:
                if float(f) != int(f):
                    raise WeightSpecError(
                        f"frequency {freq} is not integral; weight would not be periodic"
                    )
            if not (np.isfinite(c_amp) and np.isfinite(s_amp)):
                raise WeightSpecError("weight amplitudes must be finite")
            normalized.append((tuple(int(f) for f in freq), float(c_amp), float(s_amp)))
        return TrigPolynomial(tuple(normalized))

    @property
    def max_frequency(self) -> int:
        m = 0
        for freq, _, _ in self.terms:
            m = max(m, max(abs(f) for f in freq))
        return m

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at points of shape (..., dim)."""
        pts = np.atleast_2d(points)
        out = np.zeros(pts.shape[:-1])
        for freq, c_amp, s_amp in self.terms:
            phase = pts @ np.asarray(freq, dtype=float)
            if c_amp:
                out += c_amp * np.cos(phase)
            if s_amp:
                out += s_amp * np.sin(phase)
        return out

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """First derivatives, shape (..., dim)."""
        pts = np.atleast_2d(points)
        out = np.zeros(pts.shape)
        for freq, c_amp, s_amp in self.terms:
            fv = np.asarray(freq, dtype=float)
            phase = pts @ fv
            d_phase = -c_amp * np.sin(phase) + s_amp * np.cos(phase)
            out += d_phase[..., None] * fv
        return out

    def hessian(self, points: np.ndarray) -> np.ndarray:
        """Second derivatives, shape (..., dim, dim)."""
        pts = np.atleast_2d(points)
        dim = pts.shape[-1]
        out = np.zeros(pts.shape[:-1] + (dim, dim))
        for freq, c_amp, s_amp in self.terms:
            fv = np.asarray(freq, dtype=float)
            phase = pts @ fv
            dd_phase = -c_amp * np.cos(phase) - s_amp * np.sin(phase)
            out += dd_phase[..., None, None] * np.outer(fv, fv)
        return out


@dataclass(frozen=True)
class WeightedManifold:
    """A discretized model manifold with weight phi and measure exp(-phi) dv."""

    model: str
    resolution: int
    weight: TrigPolynomial
    phi: np.ndarray = field(repr=False)            # (grid,) samples of phi
    phi_grad: np.ndarray = field(repr=False)        # (grid, dim)
    phi_hess: np.ndarray = field(repr=False)        # (grid, dim, dim)
    measure_weights: np.ndarray = field(repr=False)  # (grid,) quadrature for mu

    @property
    def dim(self) -> int:
        return _DIM[self.model]

    @property
    def grid_shape(self) -> tuple:
        return (self.resolution,) * self.dim

    @property
    def npoints(self) -> int:
        return self.resolution ** self.dim

    @property
    def cell_volume(self) -> float:
        return (2.0 * np.pi / self.resolution) ** self.dim

    @property
    def total_mass(self) -> float:
        """mu(M) = integral of exp(-phi) dv by the grid quadrature."""
        return float(self.measure_weights.sum())

    def points(self) -> np.ndarray:
        """Grid coordinates, shape (npoints, dim), row-major over axes."""
        axes = [grid_points(self.resolution)] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def cache_key(self) -> tuple:
        return (self.model, self.resolution, self.weight.terms)


@dataclass
class DiscreteKForm:
    """Degree-k form as one grid of reals per basis covector.

    components has shape (ncomp, n) on the circle and (ncomp, n, n) on the
    torus, matching the component conventions in the module docstring.
    """

    degree: int
    components: np.ndarray

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=float)
        if not np.all(np.isfinite(self.components)):
            raise ValueError("form components must be finite")

    @property
    def ncomp(self) -> int:
        return self.components.shape[0]

    def copy(self) -> "DiscreteKForm":
        return DiscreteKForm(self.degree, self.components.copy())

    def flat(self) -> np.ndarray:
        """Component-major flattening used by the spectral module."""
        return self.components.reshape(self.ncomp, -1).ravel()

    @staticmethod
    def from_flat(degree: int, vec: np.ndarray, manifold: WeightedManifold) -> "DiscreteKForm":
        ncomp = component_count(manifold.model, degree)
        comps = np.asarray(vec).reshape((ncomp,) + manifold.grid_shape)
        return DiscreteKForm(degree, comps)

    @staticmethod
    def zero(degree: int, manifold: WeightedManifold) -> "DiscreteKForm":
        ncomp = component_count(manifold.model, degree)
        return DiscreteKForm(degree, np.zeros((ncomp,) + manifold.grid_shape))


@dataclass(frozen=True)
class WeitzenboeckField:
    """Zeroth-order curvature term of the Bochner identity on a flat model.

    On flat models the curvature operator on forms vanishes, so the field is
    built entirely from the Hessian of the weight: zero on functions, the
    Hessian itself on 1-forms, and trace(Hess phi) = Laplacian(phi) on the
    top degree of the torus.
    """

    degree: int
    matrices: np.ndarray          # (npoints, ncomp, ncomp), symmetric
    lower_bound: float

    @property
    def sup_norm(self) -> float:
        return float(np.abs(np.linalg.eigvalsh(self.matrices)).max())


@dataclass(frozen=True)
class GradientCoupling:
    """Constant matrix sending stacked covariant derivatives of a k-form to d(omega).

    The stacked gradient has dim+1 channels (the manifold directions plus the
    half-space direction); the flattened index is component-major, i.e.
    ``index = component * (dim + 1) + channel``. The half-space channel never
    contributes to the exterior derivative, so its columns are zero.
    """

    degree: int
    matrix: np.ndarray            # (ncomp_out, ncomp_in * (dim+1))
    op_norm: float

    def channel_block(self, channel: int, dim: int) -> np.ndarray:
        """Matrix acting on one derivative channel, shape (ncomp_out, ncomp_in)."""
        ncomp_in = self.matrix.shape[1] // (dim + 1)
        return self.matrix[:, [c * (dim + 1) + channel for c in range(ncomp_in)]]


def build_manifold(model: str, resolution: int, weight_spec: Iterable = ()) -> WeightedManifold:
    """Build a discretized model manifold from a trigonometric weight spec.

    weight_spec is an iterable of (frequency, cos amplitude, sin amplitude)
    terms; an empty spec gives the unweighted manifold. The resolution must be
    a power of two, at least 8, and above the Nyquist limit of the weight.
    """
    if model not in _DIM:
        raise ValueError(f"unknown model {model!r}")
    dim = _DIM[model]
    poly = TrigPolynomial.validate(weight_spec, dim)
    # aliasing is checked first: a spec the grid cannot represent is the more
    # fundamental failure than a merely small grid
    if 2 * poly.max_frequency >= resolution:
        raise AliasingError(
            f"resolution {resolution} is at or below the Nyquist limit of the "
            f"weight (max frequency {poly.max_frequency}); increase it beyond "
            f"{2 * poly.max_frequency}"
        )
    if resolution < 8 or resolution & (resolution - 1) != 0:
        raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")

    pts_axes = [grid_points(resolution)] * dim
    mesh = np.meshgrid(*pts_axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)

    phi = poly(pts)
    grad = poly.gradient(pts)
    hess = poly.hessian(pts)
    cell = (2.0 * np.pi / resolution) ** dim
    weights = np.exp(-phi) * cell

    return WeightedManifold(
        model=model,
        resolution=resolution,
        weight=poly,
        phi=phi,
        phi_grad=grad,
        phi_hess=hess,
        measure_weights=weights,
    )


def _d_real(values: np.ndarray, axis: int) -> np.ndarray:
    return spectral_derivative(values, axis=axis).real


def exterior_derivative(manifold: WeightedManifold, omega: DiscreteKForm) -> DiscreteKForm:
    """Exterior derivative d, spectral and exact for band-limited forms."""
    k = omega.degree
    dim = manifold.dim
    if k >= dim:
        raise DegreeError(f"d undefined on degree {k} over a {dim}-dimensional model")
    c = omega.components
    if dim == 1:
        return DiscreteKForm(1, _d_real(c, axis=1))
    if k == 0:
        f = c[0]
        return DiscreteKForm(1, np.stack([_d_real(f, 0), _d_real(f, 1)]))
    # k == 1 on the torus: (d omega)_{12} = d1 omega_2 - d2 omega_1
    curl = _d_real(c[1], 0) - _d_real(c[0], 1)
    return DiscreteKForm(2, curl[None])


def codifferential(manifold: WeightedManifold, omega: DiscreteKForm) -> DiscreteKForm:
    """Weighted codifferential, the mu-adjoint of d.

    Continuum form: the unweighted codifferential plus contraction with
    grad(phi); on the circle f dx maps to -f' + phi' f. Discretized in the
    conjugated form -exp(phi) D (exp(-phi) .), which is the exact matrix
    adjoint of the spectral d under the grid quadrature (so Laplacian
    assemblies come out symmetric to roundoff) and agrees with the sampled
    continuum formula to spectral accuracy. On flat models the two coincide
    identically.
    """
    k = omega.degree
    dim = manifold.dim
    if k < 1:
        raise DegreeError("codifferential undefined on 0-forms")
    c = omega.components
    shape = manifold.grid_shape
    if manifold.weight.terms:
        damp = np.exp(-manifold.phi).reshape(shape)
        boost = np.exp(manifold.phi).reshape(shape)
    else:
        damp = boost = None

    def conj_d(values, axis):
        if damp is None:
            return -_d_real(values, axis)
        return -boost * _d_real(damp * values, axis)

    if dim == 1:
        return DiscreteKForm(0, conj_d(c[0], 0)[None])
    if k == 1:
        div = conj_d(c[0], 0) + conj_d(c[1], 1)
        return DiscreteKForm(0, div[None])
    # k == 2: g dx1^dx2 -> exp(phi)[d2(exp(-phi) g) dx1 - d1(exp(-phi) g) dx2]
    g = c[0]
    comp1 = -conj_d(g, 1)
    comp2 = conj_d(g, 0)
    return DiscreteKForm(1, np.stack([comp1, comp2]))


def weitzenboeck_field(manifold: WeightedManifold, degree: int) -> WeitzenboeckField:
    """Curvature endomorphism entering the drift of the transport functional."""
    dim = manifold.dim
    if not 0 <= degree <= dim:
        raise DegreeError(f"degree {degree} invalid on a {dim}-dimensional model")
    npts = manifold.npoints
    if degree == 0:
        mats = np.zeros((npts, 1, 1))
    elif degree == 1:
        mats = manifold.phi_hess.copy()
    else:
        trace = np.trace(manifold.phi_hess, axis1=1, axis2=2)
        mats = trace[:, None, None] * np.eye(1)
    eigs = np.linalg.eigvalsh(mats)
    lower = float(eigs.min()) if npts else 0.0
    return WeitzenboeckField(degree=degree, matrices=mats, lower_bound=lower)


def weitzenboeck_at(manifold: WeightedManifold, degree: int, points: np.ndarray) -> np.ndarray:
    """Evaluate the curvature endomorphism at arbitrary points, shape (m, nc, nc).

    Analytic in the weight polynomial, so no grid interpolation is involved;
    the path engine relies on this for off-grid states.
    """
    dim = manifold.dim
    pts = np.atleast_2d(points)
    m = pts.shape[0]
    if degree == 0:
        return np.zeros((m, 1, 1))
    hess = manifold.weight.hessian(pts)
    if degree == 1:
        return hess
    trace = np.trace(hess, axis1=-2, axis2=-1)
    return trace[:, None, None] * np.ones((1, 1, 1))


def gradient_coupling(manifold: WeightedManifold, degree: int) -> GradientCoupling:
    """Constant coupling matrix between stacked gradients and d, with its norm.

    The operator norm is computed from the matrix itself (largest singular
    value, i.e. the exact maximum over the unit sphere of stacked gradients)
    rather than assumed from the block pattern.
    """
    dim = manifold.dim
    if degree >= dim:
        raise DegreeError(f"no exterior derivative from degree {degree} on dim {dim}")
    ncomp_in = component_count(manifold.model, degree)
    ncomp_out = component_count(manifold.model, degree + 1)
    nch = dim + 1
    mat = np.zeros((ncomp_out, ncomp_in * nch))

    def idx(comp: int, channel: int) -> int:
        return comp * nch + channel

    if degree == 0:
        for j in range(dim):
            mat[j, idx(0, j)] = 1.0
    else:
        # torus 1-forms: (d omega)_{12} = d1 omega_2 - d2 omega_1
        mat[0, idx(1, 0)] = 1.0
        mat[0, idx(0, 1)] = -1.0
    norm = float(np.linalg.svd(mat, compute_uv=False)[0])
    return GradientCoupling(degree=degree, matrix=mat, op_norm=norm)


def pointwise_norm(omega: DiscreteKForm) -> np.ndarray:
    """Euclidean norm of the component vector at each grid point."""
    c = omega.components
    return np.sqrt((c * c).sum(axis=0))


def lp_norm(manifold: WeightedManifold, omega: DiscreteKForm, p: float) -> float:
    """L^p norm with respect to the weighted measure, flat component norm."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    mag = pointwise_norm(omega).ravel()
    w = manifold.measure_weights
    return float((np.abs(mag) ** p @ w) ** (1.0 / p))


def inner_product(manifold: WeightedManifold, a: DiscreteKForm, b: DiscreteKForm) -> float:
    """Weighted L^2 pairing of two forms of the same degree."""
    if a.degree != b.degree:
        raise DegreeError("pairing requires equal degrees")
    prod = (a.components * b.components).sum(axis=0).ravel()
    return float(prod @ manifold.measure_weights)


def form_to_csv_rows(manifold: WeightedManifold, omega: DiscreteKForm):
    """Yield CSV rows: grid coordinates followed by component values."""
    pts = manifold.points()
    comps = omega.components.reshape(omega.ncomp, -1)
    for i in range(manifold.npoints):
        yield tuple(pts[i]) + tuple(comps[:, i])
