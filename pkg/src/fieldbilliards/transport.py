"""Collisionless transport along specular backward characteristics.

The distribution is evaluated by pulling initial data back along the
cycle and damping it with the accumulated absorption:

    f(t, x, v) = exp(-I) * f0(X(0), V(0)),   I = integral_0^t nu(s, X, V) ds,

where (X, V) is the backward specular flow through (t, x, v).  The decay
integral rides on the engine's per-step Simpson accumulator, so it sees
the same discrete trajectory as the flow itself.  There is no gain term:
this module covers the damped free stream and its reflection symmetry,
nothing downstream of that.

Specular invariance f(t,x,v) = f(t,x,R_x v) holds by construction away
from grazing launches -- both states share one generalized characteristic
-- so the mismatch reported by check_specular_invariance measures the
compatibility defect of the initial data (exactly that, at t = 0) plus
integrator asymmetry, not a property that could drift independently.

Velocity moments use tensor Gauss-Hermite quadrature with the Gaussian
weight folded back in, truncated at |v| <= 8.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import characteristics, geometry
from .characteristics import PhaseState
from .field import Field
from .geometry import Array, Domain

SPEED_TRUNCATION = 8.0
DEFAULT_ORDER = 16
MIN_ORDER = 8


# ------------------------------------------------------------ initial data


@dataclass(frozen=True)
class InitialData:
    """Initial distribution f0(x, v), vectorized over leading axes."""

    kind: str                      # "maxwellian-perturbation" | "user-analytic"
    f0: Callable[[Array, Array], Array]
    compatible: bool


def _mu(v: Array) -> Array:
    vsq = np.sum(np.square(v), axis=-1)
    return (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * vsq)


def maxwellian() -> InitialData:
    """The global Maxwellian; depends on v only through |v|."""
    return maxwellian_perturbation(amp=0.0)


def maxwellian_perturbation(amp: float = 0.2, width: float = 1.0) -> InitialData:
    """f0 = (1 + amp * exp(-|x|^2/width^2)) * mu(v).

    Radial in v, so f0(x, v) = f0(x, R_x v) identically and the data is
    compatible for every domain.  amp > -1 keeps it nonnegative.
    """
    if amp <= -1.0:
        raise ValueError("amp must exceed -1 to keep f0 nonnegative")
    w2 = float(width) ** 2

    def f0(x, v):
        xsq = np.sum(np.square(x), axis=-1)
        return (1.0 + amp * np.exp(-xsq / w2)) * _mu(v)

    return InitialData(kind="maxwellian-perturbation", f0=f0, compatible=True)


def user_initial_data(f0: Callable[[Array, Array], Array],
                      compatible: bool) -> InitialData:
    """Wrap arbitrary initial data; the caller vouches for the flag."""
    return InitialData(kind="user-analytic", f0=f0, compatible=compatible)


def compatibility_defect(domain: Domain, data: InitialData,
                         count: int = 200, seed: int = 0,
                         speed: tuple = (0.2, 3.0)) -> float:
    """Max |f0(x,v) - f0(x,R_x v)| over sampled incoming boundary states."""
    rng = np.random.default_rng(seed)
    states = sample_gamma(domain, rng, count, t=0.0, speed=speed,
                          side="minus")
    worst = 0.0
    for st in states:
        v_ref = characteristics.reflect(domain, st.x, st.v)
        worst = max(worst, abs(float(data.f0(st.x, st.v))
                               - float(data.f0(st.x, v_ref))))
    return worst


# -------------------------------------------------------- absorption rates


@dataclass(frozen=True)
class AbsorptionRate:
    """Absorption rate nu(s, x, v), vectorized like the engine integrands.

    speed_bound is the constant C in nu <= C(1+|v|) when one is known.
    signed rates (the field-shifted form) opt out of the nonnegativity
    invariant; everything else is expected to stay >= 0.
    """

    kind: str
    nu: Callable[[Array, Array, Array], Array]
    speed_bound: float | None = None
    signed: bool = False


def zero_rate() -> AbsorptionRate:
    def nu(s, x, v):
        return np.zeros(np.shape(s))
    return AbsorptionRate(kind="zero", nu=nu, speed_bound=0.0)


def constant_rate(c: float) -> AbsorptionRate:
    if c < 0.0:
        raise ValueError("constant rate must be nonnegative")

    def nu(s, x, v):
        return np.full(np.shape(s), float(c))
    return AbsorptionRate(kind="constant", nu=nu, speed_bound=float(c))


def soft_speed_rate(c: float = 1.0) -> AbsorptionRate:
    """nu = c * sqrt(1+|v|^2); obeys the bound with constant c."""
    if c < 0.0:
        raise ValueError("rate scale must be nonnegative")

    def nu(s, x, v):
        vsq = np.sum(np.square(v), axis=-1)
        return c * np.sqrt(1.0 + vsq)
    return AbsorptionRate(kind="soft-speed", nu=nu, speed_bound=float(c))


def field_shifted_rate(base: AbsorptionRate, field: Field) -> AbsorptionRate:
    """base - (v/2) . E(s, x): the drift-corrected rate.  Sign-free."""

    def nu(s, x, v):
        return base.nu(s, x, v) - 0.5 * np.sum(v * field.E(s, x), axis=-1)
    return AbsorptionRate(kind="field-shifted", nu=nu, speed_bound=None,
                          signed=True)


def rate_bound_check(rate: AbsorptionRate, domain: Domain,
                     count: int = 400, seed: int = 0,
                     t_range: tuple = (0.0, 2.0),
                     speed_scale: float = 2.0) -> dict:
    """Sample nu over (s, x, v) and report min value and max nu/(1+|v|)."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(t_range[0], t_range[1], count)
    X = _interior_points(domain, rng, count)
    V = rng.normal(0.0, speed_scale, (count, 3))
    vals = np.asarray(rate.nu(s, X, V), float)
    ratio = np.abs(vals) / (1.0 + np.linalg.norm(V, axis=1))
    return {"min": float(vals.min()), "max_ratio": float(ratio.max()),
            "signed": rate.signed}


# ---------------------------------------------------------------- sampling


def _interior_points(domain: Domain, rng, count: int,
                     shrink: float = 0.95) -> Array:
    # star-shaped fill about the origin: radial fraction of the boundary ray
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    frac = shrink * rng.uniform(0.0, 1.0, count) ** (1.0 / 3.0)
    pts = np.empty((count, 3))
    for i in range(count):
        pts[i] = frac[i] * geometry.boundary_point_radial(domain, dirs[i])
    return pts


def sample_gamma(domain: Domain, rng, count: int, t: float,
                 speed: tuple = (0.3, 2.0), min_normal_cos: float = 0.15,
                 side: str = "both") -> list[PhaseState]:
    """Boundary phase states away from grazing.

    side "minus" forces n.v < 0 (incoming), "plus" the opposite sign,
    "both" keeps whatever the draw produced.
    """
    if side not in ("minus", "plus", "both"):
        raise ValueError(f"unknown side {side!r}")
    pts = geometry.sample_boundary(domain, count,
                                   seed=int(rng.integers(2 ** 31)))
    states = []
    for x in pts:
        n = domain.normal(x)
        while True:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            if abs(d @ n) >= min_normal_cos:
                break
        if side == "minus" and d @ n > 0:
            d = d - 2.0 * (d @ n) * n
        elif side == "plus" and d @ n < 0:
            d = d - 2.0 * (d @ n) * n
        v = rng.uniform(speed[0], speed[1]) * d
        states.append(PhaseState(t=t, x=x, v=v))
    return states


# -------------------------------------------------------------- evaluation


def evaluate_f(domain: Domain, field: Field, f0: InitialData,
               nu: AbsorptionRate, state: PhaseState,
               max_bounces: int = 1000) -> float:
    """Damped pullback of the initial data along the backward cycle."""
    if state.t < 0.0:
        raise ValueError("evaluation time precedes the initial slice")
    if state.t == 0.0:
        return float(f0.f0(state.x, state.v))
    cyc = characteristics.build_cycle(
        domain, field, state, 0.0, max_bounces,
        store=False, integrands=(nu.nu,))
    decay = float(cyc.accum[0])
    end = cyc.final_state
    return float(np.exp(-decay) * f0.f0(end.x, end.v))


def evaluate_f_batch(domain: Domain, field: Field, f0: InitialData,
                     nu: AbsorptionRate, t: Array, X: Array, V: Array,
                     max_bounces: int = 1000) -> Array:
    """Vectorized evaluate_f; stalled launches keep their last state."""
    t = np.atleast_1d(np.asarray(t, float))
    X = np.atleast_2d(np.asarray(X, float))
    V = np.atleast_2d(np.asarray(V, float))
    if np.all(t == 0.0):
        return np.asarray(f0.f0(X, V), float)
    cycles = characteristics.build_cycles(
        domain, field, t, X, V, 0.0, max_bounces, integrands=(nu.nu,))
    endX = np.stack([c.final_state.x for c in cycles])
    endV = np.stack([c.final_state.v for c in cycles])
    decay = np.array([c.accum[0] for c in cycles])
    return np.exp(-decay) * np.asarray(f0.f0(endX, endV), float)


def check_specular_invariance(domain: Domain, field: Field, f0: InitialData,
                              nu: AbsorptionRate,
                              samples: list[PhaseState]) -> float:
    """Max |f(t,x,v) - f(t,x,R_x v)| over boundary samples.

    Zero up to roundoff for compatible data (the two states pull back
    through the same characteristic); at t = 0 it equals the raw
    compatibility defect of f0.
    """
    worst = 0.0
    for st in samples:
        v_ref = characteristics.reflect(domain, st.x, st.v)
        fa = evaluate_f(domain, field, f0, nu, st)
        fb = evaluate_f(domain, field, f0, nu,
                        PhaseState(t=st.t, x=st.x, v=v_ref))
        worst = max(worst, abs(fa - fb))
    return worst


# ----------------------------------------------------------------- moments


@dataclass(frozen=True)
class MomentField:
    t: float
    x: Array          # (N, 3) grid points
    density: Array    # (N,)
    momentum: Array   # (N, 3)
    order: int


def hermite_nodes(order: int) -> tuple[Array, Array]:
    """Tensor Gauss-Hermite velocity nodes and plain-measure weights.

    Nodes are v = sqrt(2) z with z the 1-d Hermite abscissae; the weights
    fold the Gaussian back in (w e^{z^2} per axis) and carry the sqrt(2)^3
    Jacobian, so sum(W * F(V)) approximates the unweighted integral of F.
    Nodes beyond the speed truncation are dropped.
    """
    z, w = np.polynomial.hermite.hermgauss(order)
    u = w * np.exp(z * z)                       # O(1) per-axis factors
    Z = np.stack(np.meshgrid(z, z, z, indexing="ij"), axis=-1).reshape(-1, 3)
    W = (u[:, None, None] * u[None, :, None] * u[None, None, :]).reshape(-1)
    V = np.sqrt(2.0) * Z
    W = 2.0 ** 1.5 * W
    keep = np.linalg.norm(V, axis=1) <= SPEED_TRUNCATION
    return V[keep], W[keep]


def moments(domain: Domain, field: Field, f0: InitialData,
            nu: AbsorptionRate, t: float, x_grid: Array,
            order: int = DEFAULT_ORDER, min_order: int = MIN_ORDER,
            max_bounces: int = 1000) -> MomentField:
    """Density and momentum of f(t, x, .) on a grid of positions."""
    if order < min_order:
        raise ValueError(f"quadrature order {order} below minimum {min_order}")
    x_grid = np.atleast_2d(np.asarray(x_grid, float))
    V, W = hermite_nodes(order)
    k = len(V)
    density = np.empty(len(x_grid))
    momentum = np.empty((len(x_grid), 3))
    for i, x in enumerate(x_grid):
        Xi = np.tile(x, (k, 1))
        if t == 0.0:
            vals = np.asarray(f0.f0(Xi, V), float)
        else:
            vals = evaluate_f_batch(domain, field, f0, nu,
                                    np.full(k, float(t)), Xi, V,
                                    max_bounces=max_bounces)
        density[i] = W @ vals
        momentum[i] = (W * vals) @ V
    return MomentField(t=float(t), x=x_grid, density=density,
                       momentum=momentum, order=order)


def write_moments_csv(path, mf: MomentField) -> None:
    header = "x1,x2,x3,density,mom1,mom2,mom3"
    table = np.column_stack([mf.x, mf.density, mf.momentum])
    np.savetxt(path, table, delimiter=",", header=header, comments="")
