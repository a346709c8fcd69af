"""Kinetic boundary weight alpha, its cutoff, and verification checks.

The weight measures distance to the grazing set through

    beta^2 = |v . grad xi(x)|^2 + xi(x)^2 - 2 (v . hess xi(x) v) xi(x)
             - 2 (E(t, xbar) . grad xi(xbar)) xi(x)

with xbar the nearest boundary point, and alpha = chi_eps(beta) with a
monotone C^2 cutoff chi_eps that is the identity on [0, eps/4] and the
constant C_eps = 3 eps / 8 from eps/2 on.  Outside the tube alpha takes
the plateau value.  The default eps is the domain's delta_prime, so the
plateau is consistent across the tube boundary (outside the tube
beta >= |xi| >= delta_prime already lands chi on its constant branch).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import MCVarianceTooHigh
from .characteristics import PhaseState, SpecularCycle
from .field import Field
from .geometry import Domain, project_to_boundary, sample_boundary

Array = np.ndarray


# ------------------------------------------------------------------- cutoff


def chi(x: Array, eps: float) -> Array:
    """Monotone C^2 cutoff: identity on [0, eps/4], 3 eps/8 from eps/2 on.

    On the blend interval the slope is 1 - S(u) with S the quintic
    smoothstep, so chi' in [0, 1] everywhere and chi'' is continuous.
    """
    x = np.asarray(x, float)
    a = 0.25 * eps
    u = np.clip((x - a) / a, 0.0, 1.0)
    blend = a + a * (u - (2.5 * u**4 - 3.0 * u**5 + u**6))
    return np.where(x <= a, x, blend)


def chi_constant(eps: float) -> float:
    """Plateau value C_eps = 3 eps / 8."""
    return 0.375 * eps


# -------------------------------------------------------------------- types


@dataclasses.dataclass(frozen=True)
class AlphaWeight:
    """The weight at one phase point, with its cutoff bookkeeping."""

    beta_sq: float
    alpha: float
    in_tube: bool
    cutoff_params: tuple          # (eps, C_eps, delta_prime)


# ------------------------------------------------------------ batched alpha


def _project_batch(domain: Domain, X: Array) -> Array:
    """Nearest boundary points for a batch of tube points (Newton, vectorized).

    Newton on the stationarity system (y - x - lam grad xi(y), xi(y)) for
    all rows at once, seeded radially; rows that fail to converge fall
    back to the scalar projector.
    """
    X = np.atleast_2d(np.asarray(X, float))
    N = X.shape[0]
    r = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(r > 1e-12, r, 1.0)
    D = np.where(r > 1e-12, X / safe, np.array([1.0, 0.0, 0.0]))
    # radial seed: scale each direction to the boundary
    lam_r = np.ones(N)
    for _ in range(60):
        val = domain.xi(D * lam_r[:, None])
        g = domain.grad_xi(D * lam_r[:, None])
        der = np.einsum("ni,ni->n", g, D)
        step = np.where(np.abs(der) > 1e-300, val / der, 0.0)
        lam_new = lam_r - np.clip(step, -0.25 * lam_r, 0.25 * lam_r)
        lam_r = np.maximum(lam_new, 1e-12)
        if np.max(np.abs(val)) < 1e-13:
            break
    Y = D * lam_r[:, None]
    g = domain.grad_xi(Y)
    lam = np.einsum("ni,ni->n", Y - X, g) / np.einsum("ni,ni->n", g, g)

    ok = np.zeros(N, bool)
    for _ in range(30):
        g = domain.grad_xi(Y)
        F = np.concatenate([Y - X - lam[:, None] * g,
                            domain.xi(Y)[:, None]], axis=1)
        res = np.max(np.abs(F), axis=1)
        ok = res < 1e-12 * (1.0 + domain.diameter)
        if np.all(ok):
            break
        H = domain.hess_xi(Y)
        J = np.zeros((N, 4, 4))
        J[:, :3, :3] = np.eye(3) - lam[:, None, None] * H
        J[:, :3, 3] = -g
        J[:, 3, :3] = g
        step = np.linalg.solve(J, -F[:, :, None])[:, :, 0]
        Y = Y + step[:, :3]
        lam = lam + step[:, 3]
    if not np.all(ok):
        for i in np.nonzero(~ok)[0]:
            Y[i], _ = project_to_boundary(domain, X[i])
    return Y


def alpha_batch(
    domain: Domain,
    field: Field,
    t: Array,
    X: Array,
    V: Array,
    cutoff: float | None = None,
) -> tuple[Array, Array, Array]:
    """Vectorized weight evaluation: (alpha, beta_sq, in_tube) per row.

    The tube membership test is |xi(x)| < delta_prime; outside it alpha is
    the plateau constant and beta_sq is reported as xi^2 (the plateau
    entry level, not used by callers there).
    """
    t = np.atleast_1d(np.asarray(t, float))
    X = np.atleast_2d(np.asarray(X, float))
    V = np.atleast_2d(np.asarray(V, float))
    t = np.broadcast_to(t, (X.shape[0],))

    dp = domain.delta_prime()
    eps = dp if cutoff is None else float(cutoff)
    xi = domain.xi(X)
    in_tube = np.abs(xi) < dp

    beta_sq = np.full(X.shape[0], np.nan)
    alpha = np.full(X.shape[0], chi_constant(eps))

    idx = np.nonzero(in_tube)[0]
    if idx.size:
        Xi, Vi, ti = X[idx], V[idx], t[idx]
        xii = xi[idx]
        g = domain.grad_xi(Xi)
        H = domain.hess_xi(Xi)
        Y = _project_batch(domain, Xi)
        gy = domain.grad_xi(Y)
        Ey = field.E(ti, Y)
        vg = np.einsum("ni,ni->n", Vi, g)
        vHv = np.einsum("ni,nij,nj->n", Vi, H, Vi)
        Eg = np.einsum("ni,ni->n", Ey, gy)
        bsq = vg**2 + xii**2 - 2.0 * vHv * xii - 2.0 * Eg * xii
        beta_sq[idx] = bsq
        alpha[idx] = chi(np.sqrt(np.maximum(bsq, 0.0)), eps)
    beta_sq[~in_tube] = xi[~in_tube] ** 2
    return alpha, beta_sq, in_tube


def alpha_weight(
    domain: Domain,
    field: Field,
    state: PhaseState,
    cutoff: float | None = None,
) -> AlphaWeight:
    """The weight at one phase point (see module docstring)."""
    a, bsq, tube = alpha_batch(domain, field, [state.t], state.x[None],
                               state.v[None], cutoff=cutoff)
    dp = domain.delta_prime()
    eps = dp if cutoff is None else float(cutoff)
    return AlphaWeight(
        beta_sq=float(bsq[0]), alpha=float(a[0]), in_tube=bool(tube[0]),
        cutoff_params=(eps, chi_constant(eps), dp))


# spec name for the op
alpha = alpha_weight


# ------------------------------------------------------- velocity lemma


def _cycle_rows(cycle: SpecularCycle):
    """Stack dense rows (s, x, v) of all arcs, descending in s."""
    if not cycle.arcs:
        raise ValueError("cycle carries no dense arcs (store=False?)")
    s = np.concatenate([a.s for a in cycle.arcs])
    x = np.concatenate([a.x for a in cycle.arcs])
    v = np.concatenate([a.v for a in cycle.arcs])
    return s, x, v


def verify_velocity_lemma(
    domain: Domain,
    field: Field,
    cycle: SpecularCycle,
    C_trial: float,
    cutoff: float | None = None,
) -> tuple[bool, float]:
    """Check the two-sided weight comparison along the cycle's dense output.

    For every dense sample s the inequalities

        exp(-C I(s)) alpha(s) <= alpha(t) <= exp(+C I(s)) alpha(s),
        I(s) = int_s^t (|V| + 1),

    are tested against the cycle origin time t with C = C_trial, and
    tight_C is the smallest constant for which both hold over the whole
    cycle: the sup over samples of |log(alpha(t)/alpha(s))| / I(s)
    (computed directly; it is the bisection limit in closed form).
    """
    s, x, v = _cycle_rows(cycle)
    a, _, _ = alpha_batch(domain, field, s, x, v, cutoff=cutoff)

    speed1 = np.linalg.norm(v, axis=1) + 1.0
    # cumulative int_s^t (|V|+1) via trapezoid on the descending rows
    ds = -(np.diff(s))
    seg = 0.5 * (speed1[1:] + speed1[:-1]) * ds
    I = np.concatenate([[0.0], np.cumsum(seg)])

    a0 = max(float(a[0]), 1e-300)
    mask = I > 0.0
    if not np.any(mask):
        return True, 0.0
    logdev = np.abs(np.log(np.maximum(a[mask], 1e-300)) - math.log(a0))
    ratios = logdev / I[mask]
    tight_C = float(np.max(ratios))
    return bool(tight_C <= C_trial), tight_C


# ------------------------------------------------------------ kernel check


def kernel_integral_check(
    domain: Domain,
    field: Field,
    y: Array,
    v: Array,
    s: float,
    beta_exp: float,
    kappa: float,
    theta: float,
    mc_samples: int,
    seed: int,
    cutoff: float | None = None,
    n_streams: int = 8,
) -> tuple[float, float, float]:
    """Monte-Carlo the singular kernel integral against its bound shape.

    lhs ~ int exp(-theta |v-u|^2) |v-u|^{kappa-2} alpha(s, y, u)^{-beta} du
    by importance sampling: u = v + rho w with rho^2 ~ Gamma((kappa+1)/2,
    1/theta) and w uniform on S^2, so that

        lhs = 4 pi Z_rho E[alpha^{-beta}],
        Z_rho = Gamma((kappa+1)/2) / (2 theta^{(kappa+1)/2}).

    rhs_bound_shape = 1 / (|v|^2 |xi(y)| + c(y))^{(beta-1)/2} + 1 with
    c(y) = xi(y)^2 - C_E xi(y), the field constant taken from a coarse
    boundary scan.  Sampling runs in deterministic seed-split streams;
    raises MCVarianceTooHigh when the relative standard error of the mean
    exceeds 10%.
    """
    if not (1.0 < beta_exp < 3.0):
        raise ValueError("beta_exp must lie in (1, 3)")
    if not (0.0 < kappa <= 1.0):
        raise ValueError("kappa must lie in (0, 1]")
    y = np.asarray(y, float)
    v = np.asarray(v, float)
    shape = 0.5 * (kappa + 1.0)

    # deterministic recombination: fixed per-stream sample counts
    counts = np.full(n_streams, mc_samples // n_streams)
    counts[: mc_samples % n_streams] += 1
    streams = np.random.SeedSequence(seed).spawn(n_streams)

    vals_sum, sq_sum, n_tot = 0.0, 0.0, 0
    for ss, cnt in zip(streams, counts):
        if cnt == 0:
            continue
        rng = np.random.default_rng(ss)
        rho = np.sqrt(rng.gamma(shape, 1.0 / theta, size=cnt))
        w = rng.normal(size=(cnt, 3))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        u = v[None, :] + rho[:, None] * w
        a, _, _ = alpha_batch(domain, field, np.full(cnt, float(s)),
                              np.broadcast_to(y, (cnt, 3)), u,
                              cutoff=cutoff)
        f = np.maximum(a, 1e-300) ** (-beta_exp)
        vals_sum += float(np.sum(f))
        sq_sum += float(np.sum(f * f))
        n_tot += cnt

    mean = vals_sum / n_tot
    var = max(sq_sum / n_tot - mean * mean, 0.0)
    rel_se = math.sqrt(var / n_tot) / mean if mean > 0 else np.inf
    if rel_se > 0.10:
        raise MCVarianceTooHigh(
            f"relative SE {rel_se:.3f} > 0.10 at {n_tot} samples")

    Z_rho = math.gamma(shape) / (2.0 * theta**shape)
    lhs = 4.0 * math.pi * Z_rho * mean

    xi_y = float(domain.xi(y))
    C_E = _coarse_C_E(domain, field, float(s))
    c_y = xi_y * xi_y - C_E * xi_y
    vv = float(np.dot(v, v))
    base = vv * abs(xi_y) + c_y
    rhs = 1.0 / base ** (0.5 * (beta_exp - 1.0)) + 1.0
    return lhs, rhs, lhs / rhs


def _coarse_C_E(domain: Domain, field: Field, s: float) -> float:
    """min E.n over a coarse boundary sample at time s (clamped >= 0)."""
    xb = sample_boundary(domain, 256)
    n = domain.normal(xb)
    en = np.einsum("ni,ni->n", field.E(np.full(xb.shape[0], s), xb), n)
    return max(float(np.min(en)), 0.0)
