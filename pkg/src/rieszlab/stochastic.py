"""Monte Carlo engine for the stopped half-space diffusion and its functionals.

The driving pair is a diffusion X on the model manifold and an independent
one-dimensional Brownian motion B started at y0 and absorbed at 0. Two time
normalizations are supported:

* convention "A" (default): generator (Laplacian - grad phi . grad) + d2/dy2,
  both components at speed 2. The quadratic variation of B is 2 dt, the
  occupation density of B before absorption is (y ^ z), the transport
  functional obeys dM/dt = -R M, and the discount is exp(-a t).
* convention "B": everything at half speed (B is a standard Brownian motion,
  occupation density 2 (y ^ z)), with the transport rate and the discount
  halved to match.

Under either convention the discounted transported field
exp(-a_eff t) M*_t omega_a(X_t, B_t) is driftless; martingale_drift_check is
the arbiter and runs as a gate in the verify suite.

Stochastic integrals are accumulated in the discounted form

    J_t = exp(-a_eff t) M_t int_0^t exp(+a_eff s) M_s^{-1} V dB_s,

updated per step as J <- exp(-a_eff dt) P (J + V dB) with P the one-step
transport propagator. This is the exact pathwise rearrangement of the
terminal transport factor applied to the completed Ito sum; the recursion is
adapted (no stopping-time-anticipating product is ever formed) and exists
because the literal integrand exp(+a_eff s) overflows on long excursions.

Paths draw from counter-keyed per-path substreams, so a trajectory is a pure
function of (seed, path index) and results are bit-identical under any
partition of paths across workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import CurvatureError, SimulationError
from .geometry import (
    DiscreteKForm,
    WeightedManifold,
    component_count,
    gradient_coupling,
    inner_product,
    weitzenboeck_at,
    weitzenboeck_field,
)
from .halfspace import (
    FieldInterpolator,
    GridFormEvaluator,
    derived_mode_field,
    geometric_y_grid,
    stacked_gradient_tables,
    tabulate_field,
)
from .spectral import decompose

__all__ = [
    "CONVENTION_SPEED",
    "ENGINE_Y_RATIO",
    "Accumulator",
    "EngineResult",
    "PathSample",
    "RieszEstimate",
    "run_paths",
    "simulate_paths",
    "martingale_drift_check",
    "identity_estimator",
    "riesz_estimator",
    "riesz_potential_estimator",
    "subordination_moments",
    "weak_pairing",
    "truncation_mass",
    "field_cutoff_height",
]

# generator scale s: the joint generator is s * ((Lap - grad phi . grad) + d2/dy2)
CONVENTION_SPEED = {"A": 1.0, "B": 0.5}

# vertical tabulation ratio for engine fields; finer than the reporting
# ladder so interpolation bias stays well below the estimator gates
ENGINE_Y_RATIO = 1.04

_CHUNK_ROWS = 2048
_DEFAULT_BATCH = 8192
# discount exponent beyond which an excursion wipes the accumulators (1e-12)
_KILL_LOG = 27.6
_DISCARD_BUDGET = 1e-4


# ---------------------------------------------------------------------------
# accumulator specifications


@dataclass
class Accumulator:
    """One terminal functional accumulated along every path.

    kinds:
      "ito"      J-recursion against dB with a transport propagator
      "noise"    like "ito" but contracted against every noise channel
                 through a constant coupling (the subordination majorant)
      "reversed" forward-streamed reversed-time functional: backward-Ito dB
                 term minus the trapezoid vertical Lebesgue term
      "square"   running square function of the stacked gradient channels
      "lebesgue" plain time integral of a scalar field along the path
    """

    name: str
    kind: str
    degree: Optional[int] = None
    ncomp: int = 1
    value_field: Optional[FieldInterpolator] = None
    dy_field: Optional[FieldInterpolator] = None
    channel_fields: Optional[list] = None
    coupling: Optional[np.ndarray] = None   # (nchannels, ncomp_out, ncomp_in)
    scalar_fn: Optional[Callable] = None    # lebesgue: fn(x, B) -> (m,)
    phase: Optional[np.ndarray] = None      # holonomy angles per axis
    complex_valued: bool = False

    @property
    def dtype(self):
        if self.complex_valued or self.phase is not None:
            return np.complex128
        return np.float64


@dataclass
class EngineResult:
    """Per-path terminal data; reductions happen downstream in fixed order."""

    n_paths: int
    tau: np.ndarray
    x_tau: np.ndarray
    terminals: dict
    censored: np.ndarray
    discarded: np.ndarray

    def ok(self) -> np.ndarray:
        return ~self.discarded


@dataclass
class PathSample:
    """Recorded trajectory with transport matrices and literal Ito sums.

    times/x/b include the initial state; db holds the effective Ito increment
    of each step (the final one truncated at the barrier). transports maps a
    degree to the running matrix M_t and inverse_transports to its inverse,
    both integrated by the one-step Cayley propagator. ito maps accumulator
    names to the literal integral int exp(+a_eff s) M^-1 V dB (only safe on
    bounded horizons), and terminals holds the streamed discounted form for
    cross-validation.
    """

    dt: float
    tau: float
    crossed: bool
    times: np.ndarray
    x: np.ndarray
    b: np.ndarray
    db: np.ndarray
    transports: dict
    inverse_transports: dict
    ito: dict
    terminals: dict


@dataclass
class RieszEstimate:
    """Estimator output: weak pairings and/or a pointwise grid estimate."""

    mode: str
    a: float
    degree: int
    y0: float
    dt: float
    n_paths: int
    seed: int
    convention: str
    pairings: Optional[np.ndarray] = None
    pairing_errors: Optional[np.ndarray] = None
    pointwise: Optional[np.ndarray] = None
    bandwidth: Optional[float] = None
    effective_counts: Optional[np.ndarray] = None
    unreliable_points: int = 0
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# per-path substreams


class _Streams:
    """Chunked per-path normal buffers over counter-keyed substreams.

    Path i draws from Philox keyed by (seed, global index); consumption is
    strictly sequential per path, so a trajectory is a pure function of its
    key regardless of batching or scheduling. With antithetic pairing, odd
    paths share the even partner's key and flip the barrier noise downstream.
    """

    def __init__(self, seed: int, offset: int, n: int, width: int,
                 antithetic: bool = False, chunk: int = _CHUNK_ROWS):
        self.width = width
        self.chunk = chunk
        keys = [
            (offset + i) & ~1 if antithetic else (offset + i) for i in range(n)
        ]
        self._gens = [
            np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(k)]))
            for k in keys
        ]
        self._buf = np.empty((n, chunk, width), dtype=np.float32)
        self._cursor = np.full(n, chunk, dtype=np.int64)

    def take(self, idx: np.ndarray) -> np.ndarray:
        """One row of normals for each selected path, as float64."""
        need = idx[self._cursor[idx] >= self.chunk]
        for i in need:
            self._buf[i] = self._gens[i].standard_normal(
                (self.chunk, self.width), dtype=np.float32
            )
        self._cursor[need] = 0
        rows = self._buf[idx, self._cursor[idx], :]
        self._cursor[idx] += 1
        return rows.astype(np.float64)


# ---------------------------------------------------------------------------
# small helpers


def _cayley(h: np.ndarray) -> np.ndarray:
    """(I + h/2)^{-1} (I - h/2) for stacked matrices of size 1 or 2.

    One-step implicit-midpoint propagator of dM/dt = -r M with h = r dt;
    exactly invertible (the inverse is the same formula at -h), so the
    product of a propagator and its inverse is the identity to roundoff.
    """
    nc = h.shape[-1]
    if nc == 1:
        x = h[..., 0, 0]
        return ((1.0 - 0.5 * x) / (1.0 + 0.5 * x))[..., None, None]
    half = 0.5 * h
    a = 1.0 + half[..., 0, 0]
    b = half[..., 0, 1]
    c = half[..., 1, 0]
    d = 1.0 + half[..., 1, 1]
    det = a * d - b * c
    num00 = 1.0 - half[..., 0, 0]
    num01 = -half[..., 0, 1]
    num10 = -half[..., 1, 0]
    num11 = 1.0 - half[..., 1, 1]
    out = np.empty_like(h)
    out[..., 0, 0] = (d * num00 - b * num10) / det
    out[..., 0, 1] = (d * num01 - b * num11) / det
    out[..., 1, 0] = (-c * num00 + a * num10) / det
    out[..., 1, 1] = (-c * num01 + a * num11) / det
    return out


def _apply(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Stacked matrix @ vector; mats real, vecs possibly complex."""
    if mats.shape[-1] == 1:
        return mats[..., 0, 0][:, None] * vecs
    return np.einsum("pij,pj->pi", mats, vecs)


def _phi_floor(manifold: WeightedManifold) -> float:
    if not manifold.weight.terms:
        return 0.0
    fine = max(manifold.resolution * 4, 256)
    axes = [np.linspace(0, 2 * np.pi, fine, endpoint=False)] * manifold.dim
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    return float(manifold.weight(pts).min())


def _sample_stationary(
    manifold: WeightedManifold, streams: _Streams, idx: np.ndarray, phi_min: float
) -> np.ndarray:
    """Exact rejection sampling from the normalized weighted measure."""
    dim = manifold.dim
    out = np.empty((idx.size, dim))
    pending = np.arange(idx.size)
    flat = not manifold.weight.terms
    while pending.size:
        rows = streams.take(idx[pending])
        proposal = 2.0 * np.pi * ndtr(rows[:, :dim])
        if flat:
            out[pending] = proposal
            break
        accept_u = ndtr(rows[:, dim])
        ratio = np.exp(-(manifold.weight(proposal) - phi_min))
        good = accept_u <= ratio
        out[pending[good]] = proposal[good]
        pending = pending[~good]
    return out


def truncation_mass(y0: float, t_max: float, convention: str = "A") -> float:
    """Probability that absorption has not happened by t_max."""
    s = CONVENTION_SPEED[convention]
    return float(math.erf(y0 / (2.0 * math.sqrt(s * t_max))))


def field_cutoff_height(a: float, min_rate: float, floor: float = 1e-8) -> float:
    """Height above which tabulated fields are treated as zero.

    Pairing contributions above z decay like exp(-2 sqrt(a + lambda_min) z),
    so the cut is placed where that factor reaches the floor.
    """
    rate = math.sqrt(max(a, 0.0) + max(min_rate, 0.0))
    if rate <= 0:
        raise SimulationError("cannot place a field cutoff without decay (a=0 on the kernel)")
    return max(-math.log(floor) / (2.0 * rate), 3.0)


# ---------------------------------------------------------------------------
# the batch engine


def run_paths(
    manifold: WeightedManifold,
    a: float,
    y0: float,
    dt: float,
    n_paths: int,
    seed: int,
    accumulators: Sequence[Accumulator],
    convention: str = "A",
    *,
    y_ret: Optional[float] = None,
    t_max: Optional[float] = None,
    batch_size: int = _DEFAULT_BATCH,
    workers: int = 1,
    antithetic: bool = False,
) -> EngineResult:
    """Drive n_paths to absorption, returning per-path terminal functionals.

    y_ret enables the exact excursion shortcut: when B exceeds 2*y_ret the
    return time to y_ret is drawn from the closed-form first-passage law; the
    discount accrued over the excursion either wipes the accumulators (long
    excursions; the manifold point is then resampled from the exact
    stationary law) or the manifold component is advanced explicitly for the
    sampled duration. Requires every tabulated field to vanish above y_ret.

    t_max censors paths still alive at that time (for a = 0 runs, where the
    absorption time has infinite mean and no discount is available).
    """
    _validate_run(y0, dt, n_paths, convention)
    if y_ret is not None and a == 0 and any(
        acc.kind in ("ito", "noise", "reversed") for acc in accumulators
    ):
        raise SimulationError(
            "the excursion shortcut needs a positive discount to wipe "
            "transported accumulators; run a = 0 without y_ret (use t_max)"
        )
    if workers > 1:
        edges = np.linspace(0, n_paths, workers + 1).astype(int)
        jobs = [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
        result = _empty_result(n_paths, manifold.dim, accumulators)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    _job, manifold, a, y0, dt, lo, hi, seed, accumulators,
                    convention, y_ret, t_max, batch_size, antithetic,
                )
                for lo, hi in jobs
            ]
            for (lo, hi), fut in zip(jobs, futures):
                part = fut.result()
                _splice(result, part, lo, hi)
        _check_discards(result)
        return result
    result = _job(
        manifold, a, y0, dt, 0, n_paths, seed, accumulators, convention,
        y_ret, t_max, batch_size, antithetic,
    )
    _check_discards(result)
    return result


def _validate_run(y0, dt, n_paths, convention):
    if y0 <= 0:
        raise SimulationError("y0 must be positive")
    if dt > y0 * y0 / 100.0:
        raise SimulationError(
            f"dt = {dt} too large for y0 = {y0}; the barrier bias guard "
            f"requires dt <= y0^2/100 = {y0 * y0 / 100.0:g}"
        )
    if n_paths < 1:
        raise SimulationError("n_paths must be at least 1")
    if convention not in CONVENTION_SPEED:
        raise SimulationError(f"unknown convention {convention!r}")


def _empty_result(n_paths, dim, accumulators) -> EngineResult:
    terminals = {}
    for acc in accumulators:
        if acc.kind in ("square", "lebesgue"):
            terminals[acc.name] = np.zeros(n_paths)
        else:
            terminals[acc.name] = np.zeros((n_paths, acc.ncomp), dtype=acc.dtype)
    return EngineResult(
        n_paths=n_paths,
        tau=np.zeros(n_paths),
        x_tau=np.zeros((n_paths, dim)),
        terminals=terminals,
        censored=np.zeros(n_paths, dtype=bool),
        discarded=np.zeros(n_paths, dtype=bool),
    )


def _splice(result: EngineResult, part: EngineResult, lo: int, hi: int) -> None:
    result.tau[lo:hi] = part.tau
    result.x_tau[lo:hi] = part.x_tau
    result.censored[lo:hi] = part.censored
    result.discarded[lo:hi] = part.discarded
    for name in result.terminals:
        result.terminals[name][lo:hi] = part.terminals[name]


def _check_discards(result: EngineResult) -> None:
    frac = result.discarded.mean()
    if frac > _DISCARD_BUDGET:
        raise SimulationError(
            f"{int(result.discarded.sum())} paths ({frac:.3%}) discarded for "
            "non-finite field interpolation; budget is 0.01%"
        )


def _job(
    manifold, a, y0, dt, lo, hi, seed, accumulators, convention,
    y_ret, t_max, batch_size, antithetic,
) -> EngineResult:
    n = hi - lo
    result = _empty_result(n, manifold.dim, accumulators)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        _run_batch(
            manifold, a, y0, dt, seed, lo + start, stop - start, accumulators,
            convention, y_ret, t_max, result, start, antithetic,
        )
    return result


def _run_batch(
    manifold: WeightedManifold,
    a: float,
    y0: float,
    dt: float,
    seed: int,
    key_offset: int,
    n: int,
    accumulators: Sequence[Accumulator],
    convention: str,
    y_ret: Optional[float],
    t_max: Optional[float],
    result: EngineResult,
    out_base: int,
    antithetic: bool,
) -> None:
    s = CONVENTION_SPEED[convention]
    dim = manifold.dim
    width = dim + 2
    streams = _Streams(seed, key_offset, n, width, antithetic=antithetic)
    phi_min = _phi_floor(manifold)
    flat = not manifold.weight.terms
    degrees = [] if flat else sorted(
        {acc.degree for acc in accumulators if acc.degree is not None and acc.degree > 0}
    )

    X = _sample_stationary(manifold, streams, np.arange(n), phi_min)
    B = np.full(n, float(y0))
    t = np.zeros(n)
    exc_left = np.zeros(n)  # remaining pinned-B excursion time
    J = {
        acc.name: np.zeros((n, acc.ncomp), dtype=acc.dtype)
        for acc in accumulators
        if acc.kind in ("ito", "noise", "reversed")
    }
    S = {acc.name: np.zeros(n) for acc in accumulators if acc.kind in ("square", "lebesgue")}

    alive = np.arange(n)
    a_eff = s * a
    sqrt_sig = math.sqrt(2.0 * s)
    y_jump = 2.0 * y_ret if y_ret is not None else None
    odd_flip = ((key_offset + np.arange(n)) % 2 == 1) if antithetic else None

    while alive.size:
        rows = streams.take(alive)
        z = rows[:, :dim]
        zb = rows[:, dim]
        if antithetic:
            zb = np.where(odd_flip[alive], -zb, zb)
        u = ndtr(rows[:, dim + 1])

        Xa = X[alive]
        Ba = B[alive]
        Bn = Ba + sqrt_sig * math.sqrt(dt) * zb
        bridge = np.exp(-Ba * np.maximum(Bn, 0.0) / (s * dt))
        crossed = (Bn <= 0.0) | (u < bridge)
        in_exc = exc_left[alive] > 0.0
        if in_exc.any():
            # pinned-barrier excursion stepping: fields vanish up there, so
            # only elapsed time, transport, and the manifold motion matter
            crossed &= ~in_exc
            deff = np.where(crossed, Ba / (Ba + np.abs(Bn)), 1.0) * dt
            deff = np.where(in_exc, np.minimum(exc_left[alive], dt), deff)
            dB = np.where(crossed, -Ba, Bn - Ba)
            dB = np.where(in_exc, 0.0, dB)
            B_right = np.where(crossed, 0.0, Bn)
            B_right = np.where(in_exc, Ba, B_right)
            exc_new = np.where(in_exc, exc_left[alive] - deff, 0.0)
            finished = in_exc & (exc_new <= 1e-15)
            B_right = np.where(finished, y_ret, B_right)
            exc_left[alive] = np.where(finished, 0.0, exc_new)
        else:
            theta = np.where(crossed, Ba / (Ba + np.abs(Bn)), 1.0)
            deff = theta * dt
            dB = np.where(crossed, -Ba, Bn - Ba)
            B_right = np.where(crossed, 0.0, Bn)

        noise = sqrt_sig * np.sqrt(deff)[:, None] * z
        if flat:
            Xn = Xa + noise
        else:
            Xn = Xa + noise - s * manifold.weight.gradient(Xa) * deff[:, None]

        props = {}
        for k in degrees:
            rbar = 0.5 * (
                weitzenboeck_at(manifold, k, Xa) + weitzenboeck_at(manifold, k, Xn)
            )
            props[k] = _cayley(s * deff[:, None, None] * rbar)

        disc = np.exp(-a_eff * deff)
        bad = np.zeros(alive.size, dtype=bool)

        for acc in accumulators:
            if acc.kind in ("ito", "noise"):
                if acc.kind == "ito":
                    incr = acc.value_field(Xa, Ba) * dB[:, None]
                else:
                    incr = np.zeros((alive.size, acc.ncomp))
                    for ch in range(dim):
                        vch = acc.channel_fields[ch](Xa, Ba)
                        incr += (vch @ acc.coupling[ch].T) * noise[:, ch][:, None]
                    vy = acc.channel_fields[dim](Xa, Ba)
                    incr += (vy @ acc.coupling[dim].T) * dB[:, None]
                j = J[acc.name][alive] + incr
                if acc.degree in props:
                    j = _apply(props[acc.degree], j)
                j = j * disc[:, None]
                if acc.phase is not None:
                    j = j * np.exp(-1j * ((Xn - Xa) @ acc.phase))[:, None]
                bad |= ~np.isfinite(j).all(axis=1)
                J[acc.name][alive] = j
            elif acc.kind == "reversed":
                vr = acc.value_field(Xn, B_right)
                vyr = acc.dy_field(Xn, B_right)
                vyl = acc.dy_field(Xa, Ba)
                w = vr * (-dB[:, None]) - 0.5 * deff[:, None] * (vyr + vyl)
                g = J[acc.name][alive]
                if acc.degree in props:
                    g = _apply(props[acc.degree], g)
                g = g * disc[:, None] + w
                bad |= ~np.isfinite(g).all(axis=1)
                J[acc.name][alive] = g
            elif acc.kind == "square":
                total = np.zeros(alive.size)
                for ch in range(dim + 1):
                    vch = acc.channel_fields[ch](Xa, Ba)
                    total += (np.abs(vch) ** 2).sum(axis=1)
                S[acc.name][alive] += total * (2.0 * s) * deff
            else:  # lebesgue
                if acc.scalar_fn is not None:
                    vals = acc.scalar_fn(Xa, Ba)
                else:
                    vals = acc.value_field(Xa, Ba)[:, 0].real
                S[acc.name][alive] += vals * deff

        X[alive] = Xn
        B[alive] = B_right
        t[alive] += deff

        if bad.any():
            result.discarded[out_base + alive[bad]] = True
            crossed = crossed | bad

        done = crossed
        if t_max is not None:
            done = done | (t[alive] >= t_max)
        if done.any():
            gdx = alive[done]
            odx = out_base + gdx
            result.tau[odx] = t[gdx]
            result.x_tau[odx] = np.mod(X[gdx], 2.0 * np.pi)
            result.censored[odx] = ~crossed[done]
            for acc in accumulators:
                if acc.kind in ("ito", "noise", "reversed"):
                    result.terminals[acc.name][odx] = J[acc.name][gdx]
                elif acc.kind == "square":
                    result.terminals[acc.name][odx] = np.sqrt(S[acc.name][gdx])
                else:
                    result.terminals[acc.name][odx] = S[acc.name][gdx]
            alive = alive[~done]

        if y_jump is not None and alive.size:
            sel = (B[alive] >= y_jump) & (exc_left[alive] <= 0.0)
            if sel.any():
                _excursion_trigger(
                    manifold, s, a_eff, streams, alive[sel], float(y_ret),
                    X, B, t, exc_left, J, phi_min,
                )


def _excursion_trigger(
    manifold, s, a_eff, streams, idx, y_ret, X, B, t, exc_left, J, phi_min,
):
    """Handle paths that just climbed past 2*y_ret.

    The return time to y_ret over a gap h for a speed-2s Brownian motion is
    distributed as h^2 / (2 s Z^2). Long returns (discount beyond the kill
    threshold, or past the mixing horizon when there is no discount but also
    nothing transported) wipe the accumulators and resample the manifold
    point from the exact stationary law. Short ones pin the barrier for the
    sampled duration; the main loop keeps advancing the manifold component
    and the transport discount with the fields at zero.
    """
    h = B[idx] - y_ret
    rows = streams.take(idx)
    zsafe = np.abs(rows[:, 0]) + 1e-300
    D = h * h / (2.0 * s * zsafe * zsafe)

    if a_eff > 0:
        kill = a_eff * D > _KILL_LOG
    else:
        # valid only without transported accumulators (guarded in run_paths):
        # X is resampled once the excursion outlasts mixing
        kill = s * D > 34.0
    if kill.any():
        kdx = idx[kill]
        for name in J:
            J[name][kdx] = 0.0
        X[kdx] = _sample_stationary(manifold, streams, kdx, phi_min)
        t[kdx] += D[kill]
        B[kdx] = y_ret
    live = ~kill
    if live.any():
        exc_left[idx[live]] = D[live]


# ---------------------------------------------------------------------------
# recorded single-path simulation (diagnostics and reversal tests)


def simulate_paths(
    manifold: WeightedManifold,
    a: float,
    y0: float,
    dt: float,
    n_paths: int,
    seed: int,
    accumulators: Sequence[Accumulator] = (),
    convention: str = "A",
    t_max: Optional[float] = None,
    key_offset: int = 0,
) -> list:
    """Recorded trajectories with transport matrices and literal Ito sums.

    Consumes the per-path substreams exactly like the batch engine (one
    normal row per step), so a recorded path and the corresponding streamed
    path coincide. The literal Ito accumulators carry exp(+a_eff s) inside
    and are only safe on moderate horizons; estimator-scale runs should use
    run_paths. Intended for diagnostics: transport monitors, reversal tests,
    and cross-validation of the streaming recursion.
    """
    _validate_run(y0, dt, n_paths, convention)
    s = CONVENTION_SPEED[convention]
    dim = manifold.dim
    width = dim + 2
    phi_min = _phi_floor(manifold)
    flat = not manifold.weight.terms
    degrees = sorted({acc.degree for acc in accumulators if acc.degree is not None})
    a_eff = s * a
    sqrt_sig = math.sqrt(2.0 * s)
    out = []
    for i in range(n_paths):
        streams = _Streams(seed, key_offset + i, 1, width)
        one = np.array([0])
        x = [_sample_stationary(manifold, streams, one, phi_min)[0]]
        b = [float(y0)]
        dbs = []
        times = [0.0]
        mats = {k: [np.eye(component_count(manifold.model, k))] for k in degrees}
        invs = {k: [np.eye(component_count(manifold.model, k))] for k in degrees}
        itos = {
            acc.name: [np.zeros(acc.ncomp, dtype=acc.dtype)]
            for acc in accumulators
            if acc.kind == "ito"
        }
        terminals = {
            acc.name: np.zeros(acc.ncomp, dtype=acc.dtype)
            for acc in accumulators
            if acc.kind == "ito"
        }
        t_now = 0.0
        crossed = False
        while True:
            rows = streams.take(one)
            z = rows[0, :dim]
            zb = rows[0, dim]
            u = float(ndtr(rows[0, dim + 1]))
            Ba = b[-1]
            Bn = Ba + sqrt_sig * math.sqrt(dt) * zb
            bridge = math.exp(-Ba * max(Bn, 0.0) / (s * dt))
            crossed = bool(Bn <= 0.0 or u < bridge)
            theta = Ba / (Ba + abs(Bn)) if crossed else 1.0
            deff = theta * dt
            dB = -Ba if crossed else (Bn - Ba)
            Xa = x[-1]
            noise = sqrt_sig * math.sqrt(deff) * z
            if flat:
                Xn = Xa + noise
            else:
                Xn = Xa + noise - s * manifold.weight.gradient(Xa[None])[0] * deff
            props = {}
            for k in degrees:
                rbar = 0.5 * (
                    weitzenboeck_at(manifold, k, Xa[None])[0]
                    + weitzenboeck_at(manifold, k, Xn[None])[0]
                )
                props[k] = _cayley((s * deff * rbar)[None])[0]
                mats[k].append(props[k] @ mats[k][-1])
                invs[k].append(invs[k][-1] @ _cayley((-s * deff * rbar)[None])[0])
            disc = math.exp(-a_eff * deff)
            for acc in accumulators:
                if acc.kind != "ito":
                    continue
                V = acc.value_field(Xa[None], np.array([Ba]))[0]
                minv = invs[acc.degree][-2] if acc.degree in invs else np.eye(acc.ncomp)
                itos[acc.name].append(
                    itos[acc.name][-1] + math.exp(a_eff * t_now) * (minv @ V) * dB
                )
                j = terminals[acc.name] + V * dB
                if acc.degree in props:
                    j = props[acc.degree] @ j
                terminals[acc.name] = j * disc
            x.append(Xn)
            b.append(0.0 if crossed else Bn)
            dbs.append(dB)
            t_now += deff
            times.append(t_now)
            if crossed or (t_max is not None and t_now >= t_max):
                break
        out.append(
            PathSample(
                dt=dt,
                tau=t_now,
                crossed=crossed,
                times=np.array(times),
                x=np.array(x),
                b=np.array(b),
                db=np.array(dbs),
                transports={k: np.array(v) for k, v in mats.items()},
                inverse_transports={k: np.array(v) for k, v in invs.items()},
                ito={k: np.array(v) for k, v in itos.items()},
                terminals=terminals,
            )
        )
    return out


# ---------------------------------------------------------------------------
# drift gate


def martingale_drift_check(
    manifold: WeightedManifold,
    a: float,
    degree: int,
    omega: DiscreteKForm,
    y0: float,
    dt: float,
    n_paths: int,
    seed: int,
    convention: str = "A",
    horizon: float = 1.0,
    mismatch: bool = False,
) -> dict:
    """Mean per-unit-time drift of the discounted transported extension.

    Evolves paths over a fixed horizon, accumulating increments of
    N_t = exp(-a_eff t) M*_t omega_a(X_t, B_t) (components stacked). Under a
    consistent convention the drift vanishes; with ``mismatch`` the transport
    rate and discount of the other convention are applied to the same
    dynamics, which is the negative control.
    """
    if a < 0:
        raise ValueError("a must be nonnegative")
    rk = weitzenboeck_field(manifold, degree)
    if rk.lower_bound < -a - 1e-12:
        raise CurvatureError(
            f"degree {degree}: curvature lower bound {rk.lower_bound:.4f} < -a = {-a}"
        )
    s_dyn = CONVENTION_SPEED[convention]
    s_val = CONVENTION_SPEED["B" if convention == "A" else "A"] if mismatch else s_dyn

    dec = decompose(manifold, degree)
    lam = dec.eigenvalues
    coeffs = dec.coefficients(omega)
    nz = np.abs(coeffs) > 1e-12 * max(1.0, np.abs(coeffs).max())
    lam_min = float(lam[nz].min()) if nz.any() else 0.0
    y_top = field_cutoff_height(a, lam_min, floor=1e-12) + y0 + 2.0
    mode = derived_mode_field(manifold, a, omega, "value")
    ygrid = geometric_y_grid(y_top, ratio=ENGINE_Y_RATIO)
    value_field = tabulate_field(manifold, mode, ygrid)

    dim = manifold.dim
    ncomp = component_count(manifold.model, degree)
    width = dim + 2
    streams = _Streams(seed, 0, n_paths, width)
    phi_min = _phi_floor(manifold)
    flat = not manifold.weight.terms
    s = s_dyn
    sqrt_sig = math.sqrt(2.0 * s)
    a_eff = s_val * a

    X = _sample_stationary(manifold, streams, np.arange(n_paths), phi_min)
    B = np.full(n_paths, float(y0))
    t = np.zeros(n_paths)
    M = np.tile(np.eye(ncomp), (n_paths, 1, 1))
    alive = np.arange(n_paths)

    def observable(Xc, Bc, tc, Mc):
        vals = value_field(Xc, Bc)
        # N = exp(-a_eff t) M^T v, stacked per component
        mv = np.einsum("pji,pj->pi", Mc, vals) if ncomp > 1 else Mc[:, 0, 0][:, None] * vals
        return np.exp(-a_eff * tc)[:, None] * mv

    sums = np.zeros(ncomp)
    sq = np.zeros(ncomp)
    count = 0

    N_prev = observable(X, B, t, M)
    while alive.size:
        rows = streams.take(alive)
        z = rows[:, :dim]
        zb = rows[:, dim]
        u = ndtr(rows[:, dim + 1])
        Xa = X[alive]
        Ba = B[alive]
        Bn = Ba + sqrt_sig * math.sqrt(dt) * zb
        bridge = np.exp(-Ba * np.maximum(Bn, 0.0) / (s * dt))
        crossed = (Bn <= 0.0) | (u < bridge)
        noise = sqrt_sig * math.sqrt(dt) * z
        if flat:
            Xn = Xa + noise
        else:
            Xn = Xa + noise - s * manifold.weight.gradient(Xa) * dt
        if not flat and degree > 0:
            rbar = 0.5 * (
                weitzenboeck_at(manifold, degree, Xa) + weitzenboeck_at(manifold, degree, Xn)
            )
            # transport rate follows s_val under mismatch: it belongs to the
            # functional being tested, not to the dynamics
            Mn = np.einsum("pij,pjk->pik", _cayley(s_val * dt * rbar), M[alive])
        else:
            Mn = M[alive]
        # full-step increments only; stopped paths drop their partial step
        ok = ~crossed
        if ok.any():
            X[alive[ok]] = Xn[ok]
            B[alive[ok]] = Bn[ok]
            t[alive[ok]] += dt
            M[alive[ok]] = Mn[ok]
            N_new = observable(X[alive[ok]], B[alive[ok]], t[alive[ok]], M[alive[ok]])
            dN = (N_new - N_prev[ok]).real
            sums += dN.sum(axis=0)
            sq += (dN * dN).sum(axis=0)
            count += dN.shape[0]
        stop = crossed | (t[alive] >= horizon)
        alive = alive[~stop]
        if alive.size:
            N_prev = observable(X[alive], B[alive], t[alive], M[alive])

    if count == 0:
        raise SimulationError("no increments collected; shrink dt or grow the horizon")
    mean = sums / count
    var = sq / count - mean**2
    drift = mean / dt
    drift_se = np.sqrt(np.maximum(var, 0.0) / count) / dt
    norm2 = math.sqrt(inner_product(manifold, omega, omega))
    return {
        "drift": drift,
        "drift_se": drift_se,
        "max_abs_drift": float(np.abs(drift).max()),
        "max_se": float(drift_se.max()),
        "omega_l2": norm2,
        "increments": count,
        "convention": convention,
        "mismatch": mismatch,
    }


# ---------------------------------------------------------------------------
# estimators


def weak_pairing(
    manifold: WeightedManifold,
    result: EngineResult,
    name: str,
    test_forms: Sequence[DiscreteKForm],
    factor: float,
) -> tuple:
    """Pair per-path terminals against test forms at the exit point.

    The estimator of the mu-pairing is factor * mu(M) * mean of the pointwise
    pairing, since exit points are distributed per the normalized stationary
    measure. Reduction order is fixed (path-index order) for determinism.
    """
    ok = result.ok()
    term = result.terminals[name][ok]
    x_tau = result.x_tau[ok]
    scale = factor * manifold.total_mass
    complex_out = np.iscomplexobj(term) or any(
        np.iscomplexobj(eta.components) for eta in test_forms
    )
    values = np.empty(len(test_forms), dtype=complex if complex_out else float)
    errors = np.empty(len(test_forms))
    for j, eta in enumerate(test_forms):
        ev = GridFormEvaluator(manifold, eta.components)(x_tau)
        pair = (term * np.conj(ev)).sum(axis=1)
        n = pair.size
        mean = pair.sum() / n
        if complex_out:
            var = float((np.abs(pair - mean) ** 2).sum() / n)
            values[j] = scale * mean
        else:
            pair = pair.real
            mean = mean.real if np.iscomplexobj(mean) else mean
            var = float((pair * pair).sum() / n - mean * mean)
            values[j] = scale * mean
        errors[j] = abs(scale) * math.sqrt(max(var, 0.0) / n)
    return values, errors


def _pointwise_regression(
    manifold: WeightedManifold,
    result: EngineResult,
    name: str,
    factor: float,
    min_samples: int = 30,
) -> tuple:
    """Periodic Gaussian kernel regression of terminals onto the exit point."""
    ok = result.ok()
    term = result.terminals[name][ok]
    x_tau = result.x_tau[ok]
    n = x_tau.shape[0]
    dim = manifold.dim
    # circular spread via the resultant length, per axis
    r = np.abs(np.exp(1j * x_tau).mean(axis=0))
    sigma = np.sqrt(np.maximum(-2.0 * np.log(np.maximum(r, 1e-12)), 1e-4))
    h = float(1.06 * sigma.mean() * n ** (-0.2))
    grid = manifold.points()
    npts = grid.shape[0]
    ncomp = term.shape[1]
    num = np.zeros((npts, ncomp), dtype=term.dtype)
    den = np.zeros(npts)
    den_sq = np.zeros(npts)
    chunk = max(1, int(2e7 // max(npts, 1)))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        diff = x_tau[lo:hi, None, :] - grid[None, :, :]
        diff = (diff + np.pi) % (2.0 * np.pi) - np.pi
        d2 = (diff * diff).sum(axis=-1)
        w = np.exp(-0.5 * d2 / (h * h))
        num += w.T @ term[lo:hi]
        den += w.sum(axis=0)
        den_sq += (w * w).sum(axis=0)
    est = factor * num / den[:, None]
    n_eff = den * den / np.maximum(den_sq, 1e-300)
    unreliable = int((n_eff < min_samples).sum())
    shaped = est.T.reshape((ncomp,) + manifold.grid_shape)
    return shaped, h, n_eff, unreliable


def _prepare_riesz_fields(manifold, a, omega, kind):
    dec = decompose(manifold, omega.degree)
    coeffs = dec.coefficients(omega)
    nz = np.abs(coeffs) > 1e-12 * max(1.0, float(np.abs(coeffs).max()))
    lam_min = float(dec.eigenvalues[nz].min()) if nz.any() else 0.0
    y_top = field_cutoff_height(a, lam_min)
    mode = derived_mode_field(manifold, a, omega, kind)
    ygrid = geometric_y_grid(y_top, ratio=ENGINE_Y_RATIO)
    return mode, ygrid, lam_min


def _require_curvature(manifold: WeightedManifold, degree: int, a: float) -> None:
    bound = weitzenboeck_field(manifold, degree).lower_bound
    if bound < -a - 1e-12:
        raise CurvatureError(
            f"degree {degree}: curvature lower bound {bound:.4f} is below -a = {-a}; "
            "the representation hypothesis fails"
        )


def identity_estimator(
    manifold: WeightedManifold,
    a: float,
    degree: int,
    omega: DiscreteKForm,
    y0: float,
    dt: float,
    n_paths: int,
    seed: int,
    test_forms: Sequence[DiscreteKForm],
    convention: str = "A",
    workers: int = 1,
    t_max: Optional[float] = None,
) -> RieszEstimate:
    """Recover the identity: pairings of the transported vertical-derivative
    integral reproduce the weighted pairing of omega with each test form."""
    _require_curvature(manifold, degree, a)
    mode, ygrid, lam_min = _prepare_riesz_fields(manifold, a, omega, "value")
    tail = math.exp(-y0 * math.sqrt(a + lam_min))
    if tail > 0.01:
        raise SimulationError(
            f"y0 = {y0} too small: boundary tail factor {tail:.3f} exceeds 0.01"
        )
    acc = Accumulator(
        name="identity",
        kind="ito",
        degree=degree,
        ncomp=component_count(manifold.model, degree),
        value_field=tabulate_field(manifold, mode, ygrid, derivative=1),
    )
    y_ret = float(ygrid[-1]) if a > 0 else None
    result = run_paths(
        manifold, a, y0, dt, n_paths, seed, [acc], convention,
        y_ret=y_ret, t_max=t_max, workers=workers,
    )
    values, errors = weak_pairing(manifold, result, "identity", test_forms, 2.0)
    return RieszEstimate(
        mode="weak", a=a, degree=degree, y0=y0, dt=dt, n_paths=n_paths,
        seed=seed, convention=convention, pairings=values, pairing_errors=errors,
        extra={"censored": int(result.censored.sum())},
    )


def riesz_estimator(
    manifold: WeightedManifold,
    a: float,
    degree: int,
    direction: str,
    omega: DiscreteKForm,
    y0: float,
    dt: float,
    n_paths: int,
    seed: int,
    mode: str = "weak",
    test_forms: Sequence[DiscreteKForm] = (),
    convention: str = "A",
    workers: int = 1,
    t_max: Optional[float] = None,
    antithetic: bool = False,
) -> RieszEstimate:
    """Martingale-transform estimator of the Riesz transform of omega.

    direction "up" estimates the degree-raising transform (integrand: the
    exterior derivative of the subordinated extension transported at degree
    k+1); "down" the lowering one. mode "weak" pairs against test forms;
    "pointwise" kernel-regresses the terminal vectors on the exit point.
    """
    from .spectral import RieszDirection

    if direction == RieszDirection.UP:
        target_degree = degree + 1
        kind = "raised"
    elif direction == RieszDirection.DOWN:
        target_degree = degree - 1
        kind = "lowered"
    else:
        raise ValueError(f"unknown direction {direction!r}")
    _require_curvature(manifold, target_degree, a)
    if a == 0 and t_max is None:
        raise SimulationError(
            "a = 0 runs need an explicit t_max (absorption has infinite mean); "
            "the censoring mass is reported in the estimate"
        )
    field_mode, ygrid, _ = _prepare_riesz_fields(manifold, a, omega, kind)
    acc = Accumulator(
        name="riesz",
        kind="ito",
        degree=target_degree,
        ncomp=component_count(manifold.model, target_degree),
        value_field=tabulate_field(manifold, field_mode, ygrid),
    )
    y_ret = float(ygrid[-1]) if a > 0 else None
    result = run_paths(
        manifold, a, y0, dt, n_paths, seed, [acc], convention,
        y_ret=y_ret, t_max=t_max, workers=workers, antithetic=antithetic,
    )
    est = RieszEstimate(
        mode=mode, a=a, degree=degree, y0=y0, dt=dt, n_paths=n_paths,
        seed=seed, convention=convention,
        extra={"censored": int(result.censored.sum()), "direction": direction},
    )
    if t_max is not None:
        est.extra["truncation_mass"] = truncation_mass(y0, t_max, convention)
    if mode == "weak":
        est.pairings, est.pairing_errors = weak_pairing(
            manifold, result, "riesz", test_forms, -2.0
        )
    elif mode == "pointwise":
        est.pointwise, est.bandwidth, est.effective_counts, est.unreliable_points = (
            _pointwise_regression(manifold, result, "riesz", -2.0)
        )
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return est


def riesz_potential_estimator(
    manifold: WeightedManifold,
    a: float,
    degree: int,
    omega: DiscreteKForm,
    y0: float,
    dt: float,
    n_paths: int,
    seed: int,
    test_forms: Sequence[DiscreteKForm],
    convention: str = "A",
    workers: int = 1,
    t_max: Optional[float] = None,
) -> RieszEstimate:
    """Estimator of the inverse square root (degree unchanged): the transported
    integral of the subordinated extension itself against dB, scaled by -2."""
    _require_curvature(manifold, degree, a)
    mode, ygrid, _ = _prepare_riesz_fields(manifold, a, omega, "value")
    acc = Accumulator(
        name="potential",
        kind="ito",
        degree=degree,
        ncomp=component_count(manifold.model, degree),
        value_field=tabulate_field(manifold, mode, ygrid),
    )
    y_ret = float(ygrid[-1]) if a > 0 else None
    result = run_paths(
        manifold, a, y0, dt, n_paths, seed, [acc], convention,
        y_ret=y_ret, t_max=t_max, workers=workers,
    )
    values, errors = weak_pairing(manifold, result, "potential", test_forms, -2.0)
    return RieszEstimate(
        mode="weak", a=a, degree=degree, y0=y0, dt=dt, n_paths=n_paths,
        seed=seed, convention=convention, pairings=values, pairing_errors=errors,
        extra={"censored": int(result.censored.sum())},
    )


def subordination_moments(
    manifold: WeightedManifold,
    a: float,
    degree: int,
    omega: DiscreteKForm,
    y0: float,
    dt: float,
    n_paths: int,
    seed: int,
    p_list: Sequence[float],
    convention: str = "A",
    workers: int = 1,
) -> dict:
    """Moments of the coupled transform and its square function, with bounds.

    For each p: the p-norm (over paths) of the full-noise transported
    integral I and of the square function SF, the subordination bound
    |I|_p <= 3 sqrt(p(2p-1)) |A| |SF|_p, and the moment bound
    mu(M)^(1/p) |SF|_p <= B_p |omega|_p. Relative standard errors above 20%
    raise a heavy-tail warning flag on the row.
    """
    from .geometry import lp_norm
    from .spectral import square_function_moment_bound, subordination_constant

    for p in p_list:
        if p <= 1:
            raise ValueError(f"p must exceed 1, got {p}")
    _require_curvature(manifold, degree, a)
    coupling = gradient_coupling(manifold, degree)
    dim = manifold.dim
    blocks = np.stack([coupling.channel_block(ch, dim) for ch in range(dim + 1)])
    mode, ygrid, _ = _prepare_riesz_fields(manifold, a, omega, "value")
    channels = stacked_gradient_tables(manifold, mode, ygrid)
    up_ncomp = component_count(manifold.model, degree + 1)
    acc_i = Accumulator(
        name="coupled",
        kind="noise",
        degree=degree + 1,
        ncomp=up_ncomp,
        channel_fields=channels,
        coupling=blocks,
    )
    acc_j = Accumulator(name="square", kind="square", channel_fields=channels)
    y_ret = float(ygrid[-1]) if a > 0 else None
    result = run_paths(
        manifold, a, y0, dt, n_paths, seed, [acc_i, acc_j], convention,
        y_ret=y_ret, workers=workers,
    )
    ok = result.ok()
    inorm = np.linalg.norm(result.terminals["coupled"][ok], axis=1)
    jnorm = result.terminals["square"][ok]
    mass = manifold.total_mass
    rows = []
    for p in p_list:
        row = {"p": float(p)}
        for label, data in (("I", inorm), ("J", jnorm)):
            powered = data**p
            mean_p = float(powered.mean())
            se_p = float(powered.std(ddof=1) / math.sqrt(powered.size))
            root = mean_p ** (1.0 / p)
            se_root = se_p * root / (p * mean_p) if mean_p > 0 else 0.0
            row[f"{label}_p"] = root
            row[f"{label}_p_se"] = se_root
            row[f"{label}_heavy_tail"] = bool(se_p > 0.2 * mean_p)
        row["subordination_bound"] = (
            subordination_constant(p) * coupling.op_norm * row["J_p"]
        )
        row["subordination_ok"] = bool(row["I_p"] <= row["subordination_bound"])
        bp = square_function_moment_bound(p)
        row["moment_bound"] = bp * lp_norm(manifold, omega, p)
        row["J_p_weighted"] = mass ** (1.0 / p) * row["J_p"]
        row["moment_ok"] = bool(row["J_p_weighted"] <= row["moment_bound"])
        rows.append(row)
    return {
        "rows": rows,
        "coupling_norm": coupling.op_norm,
        "n_paths": int(ok.sum()),
        "seed": seed,
        "convention": convention,
    }
