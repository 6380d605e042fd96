"""Spectral differentiation on uniform periodic grids.

All derivative operators in the package go through :func:`spectral_derivative`
so that the untwisted calculus and the holonomy-twisted calculus share one code
path: with a frequency shift of exactly 0.0 the complex multiplier arrays are
identical and the two pipelines produce bit-identical floating point results.
"""

from __future__ import annotations

import numpy as np

__all__ = ["wavenumbers", "spectral_derivative", "derivative_matrix", "grid_points"]


def grid_points(resolution: int) -> np.ndarray:
    """Uniform nodes x_j = 2*pi*j/n on [0, 2*pi)."""
    return 2.0 * np.pi * np.arange(resolution) / resolution


def wavenumbers(resolution: int) -> np.ndarray:
    """Integer Fourier frequencies in FFT ordering (0, 1, ..., -1)."""
    return np.fft.fftfreq(resolution, d=1.0 / resolution)


def spectral_derivative(
    values: np.ndarray,
    axis: int,
    order: int = 1,
    shift: float = 0.0,
) -> np.ndarray:
    """Differentiate along one periodic axis by Fourier multiplier (i(k+shift))^order.

    Always runs the complex-to-complex transform (real input is upcast first),
    which keeps the shifted and unshifted paths bit-compatible. Returns a
    complex array; callers with real data take ``.real``.

    For even grids with shift == 0 the unmatched Nyquist mode is annihilated on
    odd-order derivatives, the usual convention for real band-limited data.
    """
    v = np.asarray(values)
    if not np.iscomplexobj(v):
        v = v.astype(np.complex128)
    n = v.shape[axis]
    k = wavenumbers(n) + shift
    mult = (1j * k) ** order
    if shift == 0.0 and n % 2 == 0 and order % 2 == 1:
        mult[n // 2] = 0.0
    shape = [1] * v.ndim
    shape[axis] = n
    vhat = np.fft.fft(v, axis=axis)
    vhat *= mult.reshape(shape)
    return np.fft.ifft(vhat, axis=axis)


def derivative_matrix(resolution: int, order: int = 1, shift: float = 0.0) -> np.ndarray:
    """Dense matrix of :func:`spectral_derivative` acting on grid vectors.

    Real for shift == 0, complex otherwise. Exact (to roundoff) agreement with
    the FFT application is relied on by the operator assembly.
    """
    eye = np.eye(resolution)
    mat = spectral_derivative(eye, axis=0, order=order, shift=shift)
    if shift == 0.0:
        return mat.real.copy()
    return mat
