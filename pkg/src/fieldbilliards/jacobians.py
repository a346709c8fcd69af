"""Sensitivities of backward cycles: segments, bounces, chains, bound matrices.

The cycle map (t, x, v) -> (X_cl(s), V_cl(s)) is differentiated three ways
that must agree:

  * directly, by the engine's joint variational integration (cycle.U);
  * by assembling the chain of per-segment blocks and per-bounce transfer
    matrices recorded on the cycle (chain_total);
  * by finite differences of rebuilt cycles (the test suites).

Per-arc propagation integrates the linear system dX' = dV, dV' = grad_E dX
along the arc's dense rows (cubic Hermite state reconstruction, one RK4
step per row interval, matching the engine's own stepping order).  All
seven sensitivity columns satisfy the same homogeneous system; the launch
time column only differs through its initial value (-v, -E).

bound_matrix builds the per-bounce comparison matrices J(r) = I + M a b^T
in exact rational arithmetic together with their eigendecomposition; the
sole non-unit eigenvalue is 1 + 10 M r.
"""

from __future__ import annotations

import dataclasses
from fractions import Fraction

import numpy as np

from . import characteristics, weight
from ._engine import _bounce_transfer, _init_sens
from .errors import InsufficientBounces
from .field import Field
from .geometry import Domain

Array = np.ndarray


# --------------------------------------------------------------- segments


def _grad_field(field: Field, s: float, x: Array) -> Array:
    return np.asarray(field.grad_x_E(np.asarray(s), x), float)


def propagate_variational(domain: Domain, field: Field,
                          arc: characteristics.Arc, U0: Array) -> Array:
    """Propagate a 6x7 (or 6xk) sensitivity along a bounce-free arc.

    Integrates dX' = dV, dV' = grad_E(s, X) dX with one RK4 step per dense
    row interval; X at stage midpoints comes from cubic Hermite
    interpolation of the stored rows.
    """
    U = np.array(U0, float)
    if U.shape[0] != 6:
        raise ValueError("initial sensitivity must have 6 rows")
    s, X, V = arc.s, arc.x, arc.v

    def step_matrix(sa, xa, va, sb, xb, vb):
        # one RK4 step of U' = A(s) U across [sa, sb] (sb < sa backward)
        h = sb - sa
        xm = 0.5 * (xa + xb) + (h / 8.0) * (va - vb)
        Ga = _grad_field(field, sa, xa)
        Gm = _grad_field(field, sa + 0.5 * h, xm)
        Gb = _grad_field(field, sb, xb)

        def apply(G, W):
            out = np.empty_like(W)
            out[0:3] = W[3:6]
            out[3:6] = G @ W[0:3]
            return out

        k1 = apply(Ga, U)
        k2 = apply(Gm, U + 0.5 * h * k1)
        k3 = apply(Gm, U + 0.5 * h * k2)
        k4 = apply(Gb, U + h * k3)
        return U + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    for k in range(len(s) - 1):
        U = step_matrix(s[k], X[k], V[k], s[k + 1], X[k + 1], V[k + 1])
    return U


# ---------------------------------------------------------------- bounces


@dataclasses.dataclass(frozen=True)
class BounceBlock:
    """Boundary-anchored differential of one incoming arc plus reflection.

    B maps fixed-time variations (dt, dx, dv) at the arc start to the
    event variations (ds*, dx*, dv_out at the moving hit time); w is its
    first row (hit-time derivative), dt_ratio = ds*/dt the autonomous-limit
    diagnostic, and U_post the fixed-time post-bounce 6x7 block for chain
    composition.
    """

    s_star: float
    B: Array            # (7, 7)
    w: Array            # (7,)
    dt_ratio: float
    U_post: Array       # (6, 7)
    v_out: Array


def bounce_jacobian(domain: Domain, field: Field,
                    record: characteristics.BounceRecord,
                    arc: characteristics.Arc) -> BounceBlock:
    """Differential of the hit-plus-reflection map across one incoming arc.

    The arc must end at the record's bounce.  Derivatives are taken with
    respect to the arc's own start data (t, x, v); the hit-time row uses
    the implicit function theorem on xi(X(s*)) = 0.
    """
    speed = float(np.linalg.norm(record.v_in))
    if record.v_perp < 1e-8 * (1.0 + speed):
        raise characteristics.GrazingStall(
            f"v_perp = {record.v_perp:.3e} at the grazing floor")
    if abs(arc.s[-1] - record.t_ell) > 1e-9 * (1.0 + abs(record.t_ell)):
        raise ValueError("arc does not end at the record's bounce time")
    t0, x0, v0 = float(arc.s[0]), arc.x[0], arc.v[0]
    U0 = _init_sens(field, t0, x0, v0)
    U_hit = propagate_variational(domain, field, arc, U0)
    w, U_post, v_out, _ = _bounce_transfer(
        domain, field, record.t_ell, record.x_ell, record.v_in, U_hit)
    Ux_star = U_post[0:3] + np.outer(v_out, w)
    Uv_star = U_post[3:6] + np.outer(
        field.E(np.asarray(record.t_ell), record.x_ell), w)
    B = np.vstack([w[None, :], Ux_star, Uv_star])
    return BounceBlock(s_star=record.t_ell, B=B, w=w,
                       dt_ratio=float(w[0]), U_post=U_post, v_out=v_out)


def _transfer_matrix(domain: Domain, field: Field, s: float, x: Array,
                     v_in: Array) -> Array:
    """Fixed-time bounce transfer as an explicit 6x6 matrix."""
    _, T, _, _ = _bounce_transfer(domain, field, s, x, v_in, np.eye(6))
    return T


# ------------------------------------------------------------------ chains


@dataclasses.dataclass(frozen=True)
class JacobianChain:
    """Ordered factorization of the cycle sensitivity at time s.

    blocks[0] is the 6x7 launch block; the remaining factors alternate
    6x6 bounce transfers and 6x6 segment blocks, ordered from the launch
    to the s-plane.  total is their right-to-left product; dt_ell holds
    the per-bounce hit-time gradients (d_x t_ell, d_v t_ell).
    """

    s: float
    blocks: list
    total: Array        # (6, 7)
    dt_ell: list        # [(3,), (3,)] pairs


def chain_total(domain: Domain, field: Field,
                cycle: characteristics.SpecularCycle,
                s: float) -> JacobianChain:
    """Assemble the cycle sensitivity at time s from stored blocks."""
    if any(abs(s - b.t_ell) <= 1e-12 * (1.0 + abs(s)) for b in cycle.bounces):
        raise ValueError("target time coincides with a bounce time")
    needs_rebuild = (
        cycle.U is None
        or abs(s - cycle.s_end) > 1e-12 * (1.0 + abs(s))
        or any(b.Mseg is None for b in cycle.bounces))
    if needs_rebuild:
        cycle = characteristics.build_cycle(
            domain, field, cycle.origin, s, sens=True)
    blocks = [_init_sens(field, cycle.origin.t, cycle.origin.x,
                         cycle.origin.v)]
    for rec in cycle.bounces:
        blocks.append(rec.Mseg)
        blocks.append(_transfer_matrix(domain, field, rec.t_ell, rec.x_ell,
                                       rec.v_in))
    blocks.append(cycle.Mseg_final)
    total = blocks[0]
    for Bk in blocks[1:]:
        total = Bk @ total
    dt_ell = [(b.w7[1:4].copy(), b.w7[4:7].copy()) for b in cycle.bounces]
    return JacobianChain(s=s, blocks=blocks, total=total, dt_ell=dt_ell)


# ------------------------------------------------------------ bound matrices


@dataclasses.dataclass(frozen=True)
class BoundMatrix:
    """Exact rank-one bounce bound J = I + M a b^T with eigendecomposition.

    Entries are Fractions; J = P Lam P_inv holds exactly, with
    Lam = diag(1, 1, 1, 1, 1, 1 + 10 M r).
    """

    r: Fraction
    M: Fraction
    kind: str
    J: Array            # (6, 6) object array of Fractions
    P: Array
    Lam: Array
    P_inv: Array


def _frac_matrix(rows):
    out = np.empty((len(rows), len(rows[0])), dtype=object)
    for i, row in enumerate(rows):
        for j, val in enumerate(row):
            out[i, j] = Fraction(val)
    return out


def bound_matrix(r: float, M: float, speed: float = 1.0,
                 kind: str = "III") -> BoundMatrix:
    """Per-bounce comparison matrix for the given bounce class.

    For classes II/III, r is the velocity ratio v_perp/|v| and speed the
    launch speed |v|; for class I, r is v_perp itself and speed is unused.
    """
    if r <= 0 or M <= 0:
        raise ValueError("r and M must be positive")
    rf, Mf = Fraction(r), Fraction(M)
    one = Fraction(1)
    if kind == "I":
        a = [one, one, one, rf, one, one]
        b = [5 * rf, rf, rf, one, rf, rf]
        P = _frac_matrix([
            [Fraction(-1, 5), one, Fraction(0), Fraction(0), Fraction(0), Fraction(0)],
            [Fraction(-1, 5), Fraction(0), one, Fraction(0), Fraction(0), Fraction(0)],
            [-1 / (5 * rf), Fraction(0), Fraction(0), one, Fraction(0), Fraction(0)],
            [Fraction(-1, 5), Fraction(0), Fraction(0), Fraction(0), one, Fraction(0)],
            [Fraction(-1, 5), Fraction(0), Fraction(0), Fraction(0), Fraction(0), one],
            [one, one, one, rf, one, one],
        ]).T
        P_inv = _frac_matrix([
            [Fraction(-1, 2), Fraction(9, 10), Fraction(-1, 10), -1 / (10 * rf), Fraction(-1, 10), Fraction(-1, 10)],
            [Fraction(-1, 2), Fraction(-1, 10), Fraction(9, 10), -1 / (10 * rf), Fraction(-1, 10), Fraction(-1, 10)],
            [-rf / 2, -rf / 10, -rf / 10, Fraction(9, 10), -rf / 10, -rf / 10],
            [Fraction(-1, 2), Fraction(-1, 10), Fraction(-1, 10), -1 / (10 * rf), Fraction(9, 10), Fraction(-1, 10)],
            [Fraction(-1, 2), Fraction(-1, 10), Fraction(-1, 10), -1 / (10 * rf), Fraction(-1, 10), Fraction(9, 10)],
            [Fraction(1, 2), Fraction(1, 10), Fraction(1, 10), 1 / (10 * rf), Fraction(1, 10), Fraction(1, 10)],
        ])
    elif kind in ("II", "III"):
        sf = Fraction(speed)
        if sf <= 0:
            raise ValueError("speed must be positive for classes II/III")
        a = [1 / sf ** 2, 1 / sf, 1 / sf, rf, one, one]
        b = [5 * rf * sf ** 2, rf * sf, rf * sf, one, rf, rf]
        P = _frac_matrix([
            [-1 / (5 * sf), one, Fraction(0), Fraction(0), Fraction(0), Fraction(0)],
            [-1 / (5 * sf), Fraction(0), one, Fraction(0), Fraction(0), Fraction(0)],
            [-1 / (5 * sf ** 2 * rf), Fraction(0), Fraction(0), one, Fraction(0), Fraction(0)],
            [-1 / (5 * sf ** 2), Fraction(0), Fraction(0), Fraction(0), one, Fraction(0)],
            [-1 / (5 * sf ** 2), Fraction(0), Fraction(0), Fraction(0), Fraction(0), one],
            [1 / sf ** 2, 1 / sf, 1 / sf, rf, one, one],
        ]).T
        P_inv = _frac_matrix([
            [-sf / 2, Fraction(9, 10), Fraction(-1, 10), -1 / (10 * sf * rf), -1 / (10 * sf), -1 / (10 * sf)],
            [-sf / 2, Fraction(-1, 10), Fraction(9, 10), -1 / (10 * sf * rf), -1 / (10 * sf), -1 / (10 * sf)],
            [-sf ** 2 * rf / 2, -sf * rf / 10, -sf * rf / 10, Fraction(9, 10), -rf / 10, -rf / 10],
            [-sf ** 2 / 2, -sf / 10, -sf / 10, -1 / (10 * rf), Fraction(9, 10), Fraction(-1, 10)],
            [-sf ** 2 / 2, -sf / 10, -sf / 10, -1 / (10 * rf), Fraction(-1, 10), Fraction(9, 10)],
            [sf ** 2 / 2, sf / 10, sf / 10, 1 / (10 * rf), Fraction(1, 10), Fraction(1, 10)],
        ])
    else:
        raise ValueError(f"unknown bounce class {kind!r}")

    J = np.empty((6, 6), dtype=object)
    for i in range(6):
        for j in range(6):
            J[i, j] = (one if i == j else Fraction(0)) + Mf * a[i] * b[j]
    Lam = np.empty((6, 6), dtype=object)
    for i in range(6):
        for j in range(6):
            Lam[i, j] = Fraction(0)
        Lam[i, i] = one
    Lam[5, 5] = one + 10 * Mf * rf

    # exactness guard: the displayed eigendecomposition must reproduce J
    recon = P @ Lam @ P_inv
    ident = P @ P_inv
    for i in range(6):
        for j in range(6):
            if recon[i, j] != J[i, j]:
                raise AssertionError("P Lam P_inv != J in exact arithmetic")
            if ident[i, j] != (one if i == j else Fraction(0)):
                raise AssertionError("P P_inv != I in exact arithmetic")
    return BoundMatrix(r=rf, M=Mf, kind=kind, J=J, P=P, Lam=Lam, P_inv=P_inv)


# -------------------------------------------------------- smallness report


def _wall_force(domain: Domain, field: Field, s: float, x: Array,
                v: Array) -> float:
    """Normal acceleration of the wall distance at a boundary point.

    F_perp = -(v_t . hess_xi . v_t)/|grad_xi| - E.n with v_t the tangential
    velocity; negative curvature term on a strictly convex boundary.
    """
    g = domain.grad_xi(x)
    m = float(np.linalg.norm(g))
    n = g / m
    vt = v - float(n @ v) * n
    E = np.asarray(field.E(np.asarray(s), x), float)
    return -float(vt @ domain.hess_xi(x) @ vt) / m - float(E @ n)


def smallness_checks(domain: Domain, field: Field, cycles) -> dict:
    """Cancellation and bounce-count diagnostics over one or more cycles.

    Per bounce pair (ell, ell+1): dt = t_ell - t_ell+1,
    cancel = |F_perp(t_ell+1)| dt^2 / (2 v_perp_ell+1) - dt, and the v_perp
    increment.  Log-log slopes of |cancel| and |dv_perp| against dt are
    fitted when the dt values spread by at least a factor 2.  The report
    also carries the bounce-count control ell_star * alpha / (|t - s|
    (|v|^2 + 1)) per cycle.
    """
    if isinstance(cycles, characteristics.SpecularCycle):
        cycles = [cycles]
    rows = []
    number_control = []
    for cyc in cycles:
        if len(cyc.bounces) < 2:
            raise InsufficientBounces(
                f"need >= 2 bounces, got {len(cyc.bounces)}")
        for prev, nxt in zip(cyc.bounces[:-1], cyc.bounces[1:]):
            dt = prev.t_ell - nxt.t_ell
            F = _wall_force(domain, field, nxt.t_ell, nxt.x_ell, nxt.v_out)
            cancel = abs(F) * dt * dt / (2.0 * nxt.v_perp) - dt
            rows.append({
                "ell": nxt.ell,
                "t_ell": nxt.t_ell,
                "dt": dt,
                "v_perp": nxt.v_perp,
                "cancel": cancel,
                "dv_perp": abs(nxt.v_perp - prev.v_perp),
            })
        aw = weight.alpha_weight(domain, field, cyc.origin)
        span = abs(cyc.origin.t - cyc.s_end)
        speed2 = float(np.dot(cyc.origin.v, cyc.origin.v))
        ell_star = cyc.ell_star(cyc.s_end)
        number_control.append(ell_star * aw.alpha / (span * (speed2 + 1.0)))

    dts = np.array([r["dt"] for r in rows])
    report = {"rows": rows, "number_control": number_control,
              "cancel_slope": None, "dvperp_slope": None}

    def fit(vals):
        # below 1e-11 the values are integrator noise, not signal
        mask = vals > 1e-11
        if mask.sum() < 3 or dts[mask].max() < 2.0 * dts[mask].min():
            return None
        return float(np.polyfit(np.log(dts[mask]), np.log(vals[mask]), 1)[0])

    report["cancel_slope"] = fit(np.abs(np.array([r["cancel"] for r in rows])))
    report["dvperp_slope"] = fit(np.array([r["dv_perp"] for r in rows]))
    return report
