"""Time-dependent external fields E(t, x) with analytic derivatives.

Field kinds: zero, constant, outward-radial (E = g(t) x with optional
sinusoidal modulation of the gain), and user-analytic (caller-supplied
callables for E and all derivatives through second order).

All callables are vectorized: t of shape (...,) with x of shape (..., 3)
produce E of shape (..., 3); the Jacobian grad_x_E has shape (..., 3, 3)
with entry [i, j] = dE_i/dx_j; hess_x_E has shape (..., 3, 3, 3) with
entry [i, j, k] = d^2 E_i / dx_j dx_k.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from .errors import MalformedField
from .geometry import Domain, sample_boundary

Array = np.ndarray


@dataclasses.dataclass(eq=False)
class Field:
    """Immutable field with analytic derivatives through second order."""

    kind: str
    params: dict
    E: Callable[[Array, Array], Array]
    dE_dt: Callable[[Array, Array], Array]
    grad_x_E: Callable[[Array, Array], Array]
    dtt_E: Callable[[Array, Array], Array]
    dt_grad_E: Callable[[Array, Array], Array]
    hess_x_E: Callable[[Array, Array], Array]


@dataclasses.dataclass(frozen=True)
class FieldCertificate:
    """Sampled sign-condition margin and C^2 norm bound."""

    C_E: float
    c2_norm: float
    holds_sign: bool


# ------------------------------------------------------------- constructors


def _shape(t: Array, x: Array) -> tuple:
    return np.broadcast_shapes(np.shape(t), np.shape(x)[:-1])


def zero_field() -> Field:
    def vec(t, x):
        return np.zeros(_shape(t, x) + (3,))

    def mat(t, x):
        return np.zeros(_shape(t, x) + (3, 3))

    def ten(t, x):
        return np.zeros(_shape(t, x) + (3, 3, 3))

    return Field("zero", {}, vec, vec, mat, vec, mat, ten)


def constant_field(e) -> Field:
    e = np.asarray(e, float)
    if e.shape != (3,) or not np.all(np.isfinite(e)):
        raise MalformedField("constant field needs a finite 3-vector")

    def E(t, x):
        return np.broadcast_to(e, _shape(t, x) + (3,)).copy()

    def vec0(t, x):
        return np.zeros(_shape(t, x) + (3,))

    def mat0(t, x):
        return np.zeros(_shape(t, x) + (3, 3))

    def ten0(t, x):
        return np.zeros(_shape(t, x) + (3, 3, 3))

    return Field("constant", {"e": tuple(e)}, E, vec0, mat0, vec0, mat0, ten0)


def outward_radial(
    gain: float = 1.0,
    mod_amp: float = 0.0,
    mod_omega: float = 0.0,
    mod_phase: float = 0.0,
) -> Field:
    """E(t, x) = g(t) x with g(t) = gain + mod_amp sin(mod_omega t + phase).

    Linear in x, so it is smooth on all of R^3 and E.n > 0 on the boundary
    of any domain star-shaped about the origin whenever g(t) > 0.
    """
    g0, a, om, ph = float(gain), float(mod_amp), float(mod_omega), float(mod_phase)
    if not all(map(np.isfinite, (g0, a, om, ph))):
        raise MalformedField("radial field parameters must be finite")

    def g(t):
        return g0 + a * np.sin(om * np.asarray(t, float) + ph)

    def gp(t):
        return a * om * np.cos(om * np.asarray(t, float) + ph)

    def gpp(t):
        return -a * om * om * np.sin(om * np.asarray(t, float) + ph)

    def E(t, x):
        x = np.asarray(x, float)
        return np.asarray(g(t))[..., None] * x

    def dE_dt(t, x):
        x = np.asarray(x, float)
        return np.asarray(gp(t))[..., None] * x

    def grad_x_E(t, x):
        sh = _shape(t, x)
        out = np.zeros(sh + (3, 3))
        gv = np.broadcast_to(np.asarray(g(t)), sh)
        for i in range(3):
            out[..., i, i] = gv
        return out

    def dtt_E(t, x):
        x = np.asarray(x, float)
        return np.asarray(gpp(t))[..., None] * x

    def dt_grad_E(t, x):
        sh = _shape(t, x)
        out = np.zeros(sh + (3, 3))
        gv = np.broadcast_to(np.asarray(gp(t)), sh)
        for i in range(3):
            out[..., i, i] = gv
        return out

    def hess_x_E(t, x):
        return np.zeros(_shape(t, x) + (3, 3, 3))

    return Field(
        "outward-radial",
        {"gain": g0, "mod_amp": a, "mod_omega": om, "mod_phase": ph},
        E, dE_dt, grad_x_E, dtt_E, dt_grad_E, hess_x_E,
    )


def user_analytic(
    name: str,
    E: Callable,
    dE_dt: Callable,
    grad_x_E: Callable,
    dtt_E: Callable,
    dt_grad_E: Callable,
    hess_x_E: Callable,
) -> Field:
    """Wrap caller-supplied analytic callables (shapes as module docstring)."""
    return Field(
        "user-analytic", {"name": name},
        E, dE_dt, grad_x_E, dtt_E, dt_grad_E, hess_x_E,
    )


def radial_plus_uniform(gain: float, e) -> Field:
    """Registry preset: E = gain * x + e (uniform bias on a radial field)."""
    rad = outward_radial(gain)
    e = np.asarray(e, float)

    def E(t, x):
        return rad.E(t, x) + e

    return Field(
        "user-analytic",
        {"name": "radial-plus-uniform", "gain": float(gain), "e": tuple(e)},
        E, rad.dE_dt, rad.grad_x_E, rad.dtt_E, rad.dt_grad_E, rad.hess_x_E,
    )


#: named analytic fields reachable from config files
FIELD_REGISTRY: dict[str, Callable[..., Field]] = {
    "radial-plus-uniform": radial_plus_uniform,
}


# ------------------------------------------------------------- verification


def field_derivative_check(field: Field, n_samples: int = 32,
                           seed: int = 0) -> float:
    """Max relative error of analytic derivatives vs central differences.

    Samples (t, x) in [0, 2] x ball(1.5); each first derivative of E and
    each second derivative (differenced from the analytic firsts) is
    compared at step 1e-5 with relative normalization by the sampled field
    scale.
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 2.0, size=n_samples)
    x = rng.normal(size=(n_samples, 3))
    x *= (1.5 * rng.uniform(0, 1, n_samples) ** (1 / 3) /
          np.linalg.norm(x, axis=-1))[:, None]
    h = 1e-5
    scale = max(1.0, float(np.max(np.abs(field.E(t, x)))))
    errs = []

    def rel(a, b):
        return float(np.max(np.abs(a - b))) / scale

    # time derivatives
    fd_t = (field.E(t + h, x) - field.E(t - h, x)) / (2 * h)
    errs.append(rel(fd_t, field.dE_dt(t, x)))
    fd_tt = (field.dE_dt(t + h, x) - field.dE_dt(t - h, x)) / (2 * h)
    errs.append(rel(fd_tt, field.dtt_E(t, x)))
    # space derivatives, one axis at a time
    an_grad = field.grad_x_E(t, x)
    an_hess = field.hess_x_E(t, x)
    an_tgrad = field.dt_grad_E(t, x)
    for j in range(3):
        dx = np.zeros(3)
        dx[j] = h
        fd_g = (field.E(t, x + dx) - field.E(t, x - dx)) / (2 * h)
        errs.append(rel(fd_g, an_grad[..., :, j]))
        fd_h = (field.grad_x_E(t, x + dx) - field.grad_x_E(t, x - dx)) / (2 * h)
        errs.append(rel(fd_h, an_hess[..., :, :, j]))
    fd_tg = (field.grad_x_E(t + h, x) - field.grad_x_E(t - h, x)) / (2 * h)
    errs.append(rel(fd_tg, an_tgrad))
    return max(errs)


def certify_field(
    field: Field,
    domain: Domain,
    t_grid: Array | None = None,
    boundary_samples: int = 2048,
    seed: int = 0,
) -> FieldCertificate:
    """Sample the boundary sign condition and the C^2 norm of the field.

    C_E is the sampled min of E.n over boundary points x time grid, minus a
    1e-9 safety margin; holds_sign iff that margin is positive.  c2_norm is
    the sampled max magnitude over E and all derivatives through second
    order on the closure.
    """
    if boundary_samples < 1:
        raise ValueError("boundary_samples >= 1 required")
    if t_grid is None:
        t_grid = np.linspace(0.0, 2.0, 16)
    t_grid = np.atleast_1d(np.asarray(t_grid, float))

    if field_derivative_check(field, n_samples=8, seed=seed) > 1e-6:
        raise MalformedField("analytic derivatives inconsistent with FD")

    xb = sample_boundary(domain, boundary_samples)
    n = domain.normal(xb)
    tt = t_grid[:, None]  # (T, 1) against (B, 3)
    en = np.einsum("tbi,bi->tb", field.E(tt, xb), n)
    C_E = float(np.min(en)) - 1e-9

    # closure samples: boundary shells scaled inward
    shells = xb[None, :, :] * np.linspace(0.02, 1.0, 6)[:, None, None]
    xs = shells.reshape(-1, 3)
    sup = 0.0
    for fn in (field.E, field.dE_dt, field.grad_x_E,
               field.dtt_E, field.dt_grad_E, field.hess_x_E):
        vals = fn(tt[:, None], xs)
        sup = max(sup, float(np.max(np.abs(vals))))
    return FieldCertificate(C_E=C_E, c2_norm=sup, holds_sign=bool(C_E > 0.0))
