"""Half-space extensions and the precomputed integrand fields of the path engine.

The subordinated extension of a form omega to M x [0, inf) is computed per
eigenmode as coefficient * exp(-y sqrt(a + lambda)), together with as many
y-derivatives as needed. Fields consumed by the Monte Carlo engine are
tabulated on (x-grid) x (y-grid) and interpolated along paths: periodic
linear in x, linear in log y (linear in y on the first cell touching 0), and
defined as zero above the top of the y-grid where the modes have decayed
below the tabulation floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegreeError, KernelOverlapError
from .geometry import DiscreteKForm, WeightedManifold, component_count
from .spectral import SpectralDecomposition, decompose

__all__ = [
    "HalfSpaceExtension",
    "build_extension",
    "derived_mode_field",
    "geometric_y_grid",
    "FieldInterpolator",
    "ModeField",
    "tabulate_field",
    "stacked_gradient_tables",
]

_DEFAULT_RATIO = 1.2
_Y0 = 1e-3


def geometric_y_grid(y_max: float, ratio: float = _DEFAULT_RATIO, y0: float = _Y0) -> np.ndarray:
    """y = 0 plus a geometric ladder from y0 up to at least y_max."""
    if y_max <= y0:
        return np.array([0.0, y0, y_max if y_max > y0 else 2 * y0])
    count = int(math.ceil(math.log(y_max / y0) / math.log(ratio))) + 1
    ladder = y0 * ratio ** np.arange(count)
    ladder[-1] = max(ladder[-1], y_max)
    return np.concatenate([[0.0], ladder])


@dataclass
class ModeField:
    """A form-valued field on M x [0,inf) expanded in one degree's eigenbasis.

    values(x, y) = sum_i coeff_i exp(-y rate_i) shape_i(x), where the shapes
    are grid forms of the field's own degree (not necessarily eigenforms of
    that degree; e.g. the raised field d(Q_a omega) uses shapes d(v_i)).
    """

    degree: int
    rates: np.ndarray                      # (nmodes,)
    coefficients: np.ndarray               # (nmodes,)
    shapes: np.ndarray                     # (nmodes, ncomp, *grid)

    def at_height(self, y: float, derivative: int = 0) -> np.ndarray:
        """Field values on the grid at one height; shape (ncomp, *grid)."""
        scale = self.coefficients * np.exp(-self.rates * y) * (-self.rates) ** derivative
        return np.tensordot(scale, self.shapes, axes=(0, 0))


@dataclass
class HalfSpaceExtension:
    """Tabulated subordinated extension with vertical derivatives.

    values[j] is the form at height y_grid[j]; dy and dyy hold the first and
    second vertical derivatives on the same nodes. The boundary row
    reproduces the input form exactly by construction.
    """

    manifold: WeightedManifold
    degree: int
    a: float
    y_grid: np.ndarray
    values: np.ndarray       # (ny, ncomp, *grid)
    dy: np.ndarray
    dyy: np.ndarray

    def boundary_form(self) -> DiscreteKForm:
        return DiscreteKForm(self.degree, self.values[0].copy())


def _mode_field_from_form(
    dec: SpectralDecomposition, a: float, omega: DiscreteKForm, drop_tol: float = 1e-14
) -> ModeField:
    coeffs = dec.coefficients(omega)
    scale = float(np.abs(coeffs).max(initial=0.0))
    keep = np.abs(coeffs) > drop_tol * max(scale, 1.0)
    if a == 0.0:
        kernel = dec.eigenvalues < dec.kernel_tolerance
        overlap = float(np.abs(coeffs[kernel]).max(initial=0.0))
        if overlap > 1e-10 * max(scale, 1.0):
            raise KernelOverlapError(
                "a = 0 extension of a form with kernel overlap does not decay; "
                "project the input first"
            )
        keep &= ~kernel
    idx = np.nonzero(keep)[0]
    manifold = dec.manifold
    ncomp = component_count(manifold.model, dec.degree)
    shapes = np.empty((idx.size, ncomp) + manifold.grid_shape)
    for j, i in enumerate(idx):
        shapes[j] = dec.eigenform(int(i)).components
    rates = np.sqrt(a + dec.eigenvalues[idx])
    return ModeField(dec.degree, rates, coeffs[idx], shapes)


def derived_mode_field(
    manifold: WeightedManifold,
    a: float,
    omega: DiscreteKForm,
    kind: str = "value",
) -> ModeField:
    """Mode expansion of Q_a omega or of its raised/lowered derivative field.

    kind "value" keeps the extension itself; "raised" applies the exterior
    derivative to each mode shape (degree k+1); "lowered" applies the
    codifferential (degree k-1). Vertical decay rates come from the base
    degree in every case, matching the commutation of the operators with
    functions of the Laplacian.
    """
    from .geometry import codifferential, exterior_derivative

    dec = decompose(manifold, omega.degree)
    base = _mode_field_from_form(dec, a, omega)
    if kind == "value":
        return base
    if kind == "raised":
        if omega.degree >= manifold.dim:
            raise DegreeError("cannot raise from the top degree")
        op = exterior_derivative
        new_degree = omega.degree + 1
    elif kind == "lowered":
        if omega.degree == 0:
            raise DegreeError("cannot lower from degree zero")
        op = codifferential
        new_degree = omega.degree - 1
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    ncomp = component_count(manifold.model, new_degree)
    shapes = np.empty((base.rates.size, ncomp) + manifold.grid_shape)
    for j in range(base.rates.size):
        shapes[j] = op(manifold, DiscreteKForm(omega.degree, base.shapes[j])).components
    return ModeField(new_degree, base.rates, base.coefficients, shapes)


def build_extension(
    manifold: WeightedManifold,
    a: float,
    omega: DiscreteKForm,
    y_max: float,
    ratio: float = _DEFAULT_RATIO,
) -> HalfSpaceExtension:
    """Subordinated extension of omega up to y_max on the geometric ladder."""
    dec = decompose(manifold, omega.degree)
    mode = _mode_field_from_form(dec, a, omega)
    ys = geometric_y_grid(y_max, ratio=ratio)
    shape = (ys.size, mode.shapes.shape[1]) + manifold.grid_shape
    values = np.empty(shape)
    dy = np.empty(shape)
    dyy = np.empty(shape)
    for j, y in enumerate(ys):
        values[j] = mode.at_height(y, 0)
        dy[j] = mode.at_height(y, 1)
        dyy[j] = mode.at_height(y, 2)
    # exact boundary row: resynthesis of the full coefficient vector
    values[0] = dec.synthesize(dec.coefficients(omega)).components
    return HalfSpaceExtension(
        manifold=manifold,
        degree=omega.degree,
        a=a,
        y_grid=ys,
        values=values,
        dy=dy,
        dyy=dyy,
    )


class FieldInterpolator:
    """Fast path-side evaluation of a tabulated (x, y) field.

    Periodic linear interpolation in the manifold coordinates crossed with
    linear-in-log-y vertical interpolation; zero above the table. Accepts
    unwrapped coordinates.
    """

    def __init__(self, manifold: WeightedManifold, y_grid: np.ndarray, tables: np.ndarray):
        # tables: (ny, ncomp, *grid); dtype preserved (complex for bundle fields)
        self.dim = manifold.dim
        self.res = manifold.resolution
        self.y_grid = np.asarray(y_grid, dtype=float)
        self.tables = np.ascontiguousarray(tables)
        self.ncomp = tables.shape[1]
        self.y0 = self.y_grid[1]
        self.log_y0 = math.log(self.y0)
        # uniform in log space beyond the first node
        self.log_step = math.log(self.y_grid[2] / self.y_grid[1])
        self.ny = self.y_grid.size
        self.y_top = float(self.y_grid[-1])
        self._dx = 2.0 * np.pi / self.res

    def _y_cell(self, y: np.ndarray):
        idx = np.empty(y.shape, dtype=np.int64)
        frac = np.empty(y.shape)
        below = y <= self.y0
        idx[below] = 0
        with np.errstate(divide="ignore"):
            frac[below] = np.clip(y[below] / self.y0, 0.0, 1.0)
        above = ~below
        t = (np.log(y[above]) - self.log_y0) / self.log_step
        cell = np.floor(t).astype(np.int64)
        cell = np.clip(cell, 0, self.ny - 3)
        idx[above] = cell + 1
        lo = np.log(self.y_grid[idx[above]])
        hi = np.log(self.y_grid[idx[above] + 1])
        frac[above] = (np.log(y[above]) - lo) / (hi - lo)
        return idx, np.clip(frac, 0.0, 1.0)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluate at unwrapped positions; returns (npaths, ncomp)."""
        y = np.asarray(y, dtype=float)
        inside = y < self.y_top
        out = np.zeros((y.size, self.ncomp), dtype=self.tables.dtype)
        if not inside.any():
            return out
        xi = np.atleast_2d(x)[inside]
        yi = y[inside]
        iy, fy = self._y_cell(yi)
        gx = (xi / self._dx) % self.res
        ix = np.floor(gx).astype(np.int64)
        fx = gx - ix
        ixp = (ix + 1) % self.res
        if self.dim == 1:
            i0 = ix[:, 0]
            i1 = ixp[:, 0]
            f0 = fx[:, 0]
            lo = self.tables[iy, :, i0] * (1 - f0[:, None]) + self.tables[iy, :, i1] * f0[:, None]
            hi = (
                self.tables[iy + 1, :, i0] * (1 - f0[:, None])
                + self.tables[iy + 1, :, i1] * f0[:, None]
            )
            vals = lo * (1 - fy[:, None]) + hi * fy[:, None]
        else:
            a0, a1 = ix[:, 0], ixp[:, 0]
            b0, b1 = ix[:, 1], ixp[:, 1]
            u, v = fx[:, 0][:, None], fx[:, 1][:, None]
            def plane(level):
                t = self.tables
                return (
                    t[level, :, a0, b0] * (1 - u) * (1 - v)
                    + t[level, :, a1, b0] * u * (1 - v)
                    + t[level, :, a0, b1] * (1 - u) * v
                    + t[level, :, a1, b1] * u * v
                )
            vals = plane(iy) * (1 - fy[:, None]) + plane(iy + 1) * fy[:, None]
        out[inside] = vals
        return out


def tabulate_field(
    manifold: WeightedManifold,
    mode: ModeField,
    y_grid: np.ndarray,
    derivative: int = 0,
) -> FieldInterpolator:
    tables = np.stack([mode.at_height(float(y), derivative) for y in y_grid])
    return FieldInterpolator(manifold, y_grid, tables)


class GridFormEvaluator:
    """Periodic linear interpolation of a grid form at arbitrary points."""

    def __init__(self, manifold: WeightedManifold, components: np.ndarray):
        self.dim = manifold.dim
        self.res = manifold.resolution
        self.tables = np.ascontiguousarray(components)
        self.ncomp = components.shape[0]
        self._dx = 2.0 * np.pi / self.res

    def __call__(self, x: np.ndarray) -> np.ndarray:
        xi = np.atleast_2d(x)
        gx = (xi / self._dx) % self.res
        ix = np.floor(gx).astype(np.int64)
        fx = gx - ix
        ixp = (ix + 1) % self.res
        t = self.tables
        if self.dim == 1:
            i0, i1, f0 = ix[:, 0], ixp[:, 0], fx[:, 0][:, None]
            return t[:, i0].T * (1 - f0) + t[:, i1].T * f0
        a0, a1 = ix[:, 0], ixp[:, 0]
        b0, b1 = ix[:, 1], ixp[:, 1]
        u, v = fx[:, 0][:, None], fx[:, 1][:, None]
        return (
            t[:, a0, b0].T * (1 - u) * (1 - v)
            + t[:, a1, b0].T * u * (1 - v)
            + t[:, a0, b1].T * (1 - u) * v
            + t[:, a1, b1].T * u * v
        )


def stacked_gradient_tables(
    manifold: WeightedManifold, mode: ModeField, y_grid: np.ndarray
) -> list:
    """Interpolators for every derivative channel of a mode field.

    Returns dim+1 interpolators, one per channel of the stacked gradient
    (manifold directions first, then the vertical direction), each producing
    (npaths, ncomp) arrays.
    """
    from .fourier import spectral_derivative

    channels = []
    for axis in range(manifold.dim):
        shapes = spectral_derivative(mode.shapes, axis=2 + axis).real
        ch_mode = ModeField(mode.degree, mode.rates, mode.coefficients, shapes)
        channels.append(tabulate_field(manifold, ch_mode, y_grid, derivative=0))
    channels.append(tabulate_field(manifold, mode, y_grid, derivative=1))
    return channels
