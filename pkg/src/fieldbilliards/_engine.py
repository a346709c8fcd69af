"""Batched backward trajectory engine (package-private).

Integrates the characteristics ODE

    dX/ds = V,   dV/ds = E(s, X)

backward in time for a batch of launches in lockstep: one RK4 step per
iteration for every live launch, with per-launch clocks and per-launch step
sizes (each launch's discrete path is therefore independent of the batch it
rides in).  Boundary events (xi(X) crossing 0 from below) are detected per
step by the endpoint sign plus a cubic-Hermite interior-maximum test that
catches double crossings, then located by safeguarded Newton in the hit
time evaluated on true partial RK4 steps, and resolved by specular
reflection.

Optional extras carried through the same RK4 stages:
  * cumulative sensitivity U (6x7): d(X, V)(s) / d(t0, x0, v0), with the
    per-bounce transfer applied at events;
  * per-segment sensitivity M (6x6): reset to the identity after every
    bounce (consumed by the per-bounce Jacobian assembly);
  * path integrals of user integrands phi(s, X, V), accumulated per step
    with a Simpson rule on Hermite-interpolated midpoints.

Limitations by design: bounces with |n.v| below the grazing floor stall the
launch (flagged, or raised by the scalar wrappers); interior dips of xi
shallower than ~1e-12 are below event resolution and are passed through.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import NoConvergence, StepFailure
from .field import Field
from .geometry import Domain

Array = np.ndarray

H_BASE = 1e-3          # fixed base step
H_SPEED = 0.05         # speed-limited step: h <= H_SPEED/(1+|v|)
POS_TOL = 1e-12        # xi threshold that counts as "outside"
NEWTON_TOL = 1e-14     # event residual target (eps_bd is the hard cap)
VPERP_FLOOR = 1e-8     # grazing floor scale: floor = VPERP_FLOOR*(1+|v|)
MAX_ITERS_GLOBAL = 3_000_000


@dataclasses.dataclass
class EventRec:
    """One boundary event (bounce), with optional sensitivity payload."""

    s: float
    x: Array
    v_in: Array
    v_out: Array
    n: Array
    v_perp: float
    w7: Array | None = None      # d s* / d (t0, x0, v0), shape (7,)
    Mseg: Array | None = None    # fixed-time 6x6 over the incoming segment
    Upre: Array | None = None    # cumulative 6x7 just before transfer
    Upost: Array | None = None   # cumulative 6x7 just after transfer


@dataclasses.dataclass
class LaunchResult:
    t0: float
    x0: Array
    v0: Array
    s_final: float
    x_final: Array
    v_final: Array
    events: list
    rows: list | None            # dense rows (arc_idx, s, x, v) if stored
    accum: Array                 # one value per integrand
    stalled: bool
    truncated: bool
    hit: EventRec | None         # first-hit payload in mode="first_hit"
    U: Array | None              # cumulative 6x7 at s_final
    Mseg_final: Array | None     # segment 6x6 from last bounce to s_final


# ------------------------------------------------------------------ stepping


def _rk4_step(field: Field, t, X, V, h, U=None, M=None):
    """One backward RK4 step of (positive) size ``h`` per launch.

    Returns (X1, V1, U1, M1, E_end_approx); the last entry is the stage-4
    field value, a O(h^4)-accurate stand-in for E at the step end used by
    the Simpson midpoint interpolation.
    """
    d = -np.asarray(h, float)               # signed step, (B,)
    dc = d[..., None]

    def acc(ts, Xs):
        return field.E(ts, Xs)

    def var_rhs(ts, Xs, W):
        # W is (B, 6, k): rows X then V; dW/ds = [[0, I], [grad E, 0]] W
        G = field.grad_x_E(ts, Xs)
        out = np.empty_like(W)
        out[:, 0:3, :] = W[:, 3:6, :]
        out[:, 3:6, :] = np.einsum("bij,bjk->bik", G, W[:, 0:3, :])
        return out

    k1x, k1v = V, acc(t, X)
    t2 = t + 0.5 * d
    X2 = X + 0.5 * dc * k1x
    k2x, k2v = V + 0.5 * dc * k1v, acc(t2, X2)
    X3 = X + 0.5 * dc * k2x
    k3x, k3v = V + 0.5 * dc * k2v, acc(t2, X3)
    t4 = t + d
    X4 = X + dc * k3x
    k4x, k4v = V + dc * k3v, acc(t4, X4)

    X1 = X + dc / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    V1 = V + dc / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)

    U1 = M1 = None
    if U is not None or M is not None:
        dm = d[..., None, None]
        for W, slot in ((U, "U"), (M, "M")):
            if W is None:
                continue
            j1 = var_rhs(t, X, W)
            j2 = var_rhs(t2, X2, W + 0.5 * dm * j1)
            j3 = var_rhs(t2, X3, W + 0.5 * dm * j2)
            j4 = var_rhs(t4, X4, W + dm * j3)
            Wn = W + dm / 6.0 * (j1 + 2 * j2 + 2 * j3 + j4)
            if slot == "U":
                U1 = Wn
            else:
                M1 = Wn
    return X1, V1, U1, M1, k4v


def _hermite_interior_max(xi0, d0, xi1, d1):
    """Max of the cubic Hermite model of xi over the step interior (0,1).

    d0, d1 are the endpoint derivatives with respect to the unit step
    parameter (already scaled by the signed step).  Vectorized.
    """
    a2 = 3.0 * (xi1 - xi0) - 2.0 * d0 - d1
    a3 = 2.0 * (xi0 - xi1) + d0 + d1

    best = np.full(np.shape(xi0), -np.inf)

    def peval(s):
        return xi0 + s * (d0 + s * (a2 + s * a3))

    # roots of p'(s) = d0 + 2 a2 s + 3 a3 s^2
    quad = np.abs(a3) > 1e-300
    disc = 4.0 * a2 * a2 - 12.0 * a3 * d0
    ok = quad & (disc >= 0.0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sgn in (+1.0, -1.0):
        s = np.where(ok, (-2.0 * a2 + sgn * sq) /
                     np.where(quad, 6.0 * a3, 1.0), -1.0)
        val = peval(s)
        best = np.where(ok & (s > 0.0) & (s < 1.0), np.maximum(best, val),
                        best)
    lin = (~quad) & (np.abs(a2) > 1e-300)
    s = np.where(lin, -d0 / np.where(lin, 2.0 * a2, 1.0), -1.0)
    val = peval(s)
    best = np.where(lin & (s > 0.0) & (s < 1.0), np.maximum(best, val), best)
    return best


def _locate_event(domain, field, s0, x0, v0, h, xi0, d0, xi1, d1):
    """First outgoing root of xi along the step, or None.

    Works on one launch: builds probe points from the cubic Hermite model,
    finds the first bracket [a, b] with xi(a) below POS_TOL and xi(b)
    above it, and polishes with safeguarded Newton on the true hit
    function g(tau) = xi(X(s0 - h tau)) evaluated by partial RK4 steps.
    Returns (tau, s_star, x_star, v_star) with |xi| <= max(NEWTON_TOL*50,
    achieved) or None when the step has no resolvable outgoing crossing.
    """
    a2 = 3.0 * (xi1 - xi0) - 2.0 * d0 - d1
    a3 = 2.0 * (xi0 - xi1) + d0 + d1
    coeffs = np.array([a3, a2, d0, xi0])

    probes = {0.0, 1.0}
    if abs(a3) > 1e-300 or abs(a2) > 1e-300:
        rts = np.roots(coeffs[np.argmax(np.abs(coeffs) > 0):])
        for r in rts:
            if abs(r.imag) < 1e-9 and 1e-12 < r.real < 1.0:
                probes.add(float(r.real))
        # stationary points as probes too (bump peaks)
        if abs(a3) > 1e-300:
            disc = 4 * a2 * a2 - 12 * a3 * d0
            if disc >= 0:
                for sgn in (+1, -1):
                    s = (-2 * a2 + sgn * np.sqrt(disc)) / (6 * a3)
                    if 1e-12 < s < 1.0:
                        probes.add(float(s))
        elif abs(a2) > 1e-300:
            s = -d0 / (2 * a2)
            if 1e-12 < s < 1.0:
                probes.add(float(s))
    probes = sorted(probes)

    cache = {}

    def g_state(tau):
        if tau in cache:
            return cache[tau]
        if tau <= 0.0:
            st = (xi0, x0, v0)
        else:
            Xn, Vn, _, _, _ = _rk4_step(
                field, np.array([s0]), x0[None], v0[None],
                np.array([h * tau]))
            st = (float(domain.xi(Xn[0])), Xn[0], Vn[0])
        cache[tau] = st
        return st

    vals = [g_state(p)[0] for p in probes]
    lo = hi = None
    for (pa, va), (pb, vb) in zip(zip(probes, vals), zip(probes[1:],
                                                         vals[1:])):
        if va < POS_TOL and vb > POS_TOL and vb > va:
            lo, hi, glo, ghi = pa, pb, va, vb
            break
    if lo is None:
        return None

    tau = 0.5 * (lo + hi)
    speed = max(np.linalg.norm(v0), 1e-30)
    for _ in range(60):
        g, Xt, Vt = g_state(tau)
        if abs(g) < NEWTON_TOL:
            break
        if g > 0:
            hi, ghi = tau, g
        else:
            lo, glo = tau, g
        slope = -h * float(np.dot(domain.grad_xi(Xt), Vt))
        if abs(slope) > 1e-10 * speed * h:
            step = -g / slope
            cand = tau + step
            if not (lo < cand < hi):
                cand = 0.5 * (lo + hi)
        else:
            cand = 0.5 * (lo + hi)
        if abs(cand - tau) < 1e-17:
            tau = cand
            break
        tau = cand
    g, Xt, Vt = g_state(tau)
    if abs(g) > domain.eps_bd:
        raise NoConvergence(f"event residual {abs(g):.3e} above eps_bd")
    return tau, s0 - h * tau, Xt, Vt


def _bounce_transfer(domain, field, s, x, v_in, U):
    """Apply the fixed-time bounce transfer to the sensitivity U (6x7).

    Returns (w, U_post, v_out, n): w is the hit-time derivative row
    d s*/d(t0, x0, v0); the transfer composes hit-time shift, reflection
    with moving normal, and the return to fixed-time variations.
    """
    g = domain.grad_xi(x)
    n = g / np.linalg.norm(g)
    H = domain.hess_xi(x)
    E = field.E(np.asarray(s), x)
    denom = float(np.dot(g, v_in))
    w = -(g @ U[0:3]) / denom                      # (7,)
    Ux = U[0:3] + np.outer(v_in, w)                # dx* (boundary point)
    Uv = U[3:6] + np.outer(E, w)                   # dv- at the hit
    Dn = (np.eye(3) - np.outer(n, n)) @ H / np.linalg.norm(g)
    dn = Dn @ Ux                                   # (3,7)
    nv = float(np.dot(n, v_in))
    R = np.eye(3) - 2.0 * np.outer(n, n)
    v_out = v_in - 2.0 * nv * n
    Uv_out = R @ Uv - 2.0 * (np.outer(n, v_in @ dn) + nv * dn)
    U_post = np.empty_like(U)
    U_post[0:3] = Ux - np.outer(v_out, w)
    U_post[3:6] = Uv_out - np.outer(E, w)
    return w, U_post, v_out, n


def _init_sens(field, t, x, v):
    """Fixed-time sensitivity of the flow at s = t: columns (t | x | v)."""
    U = np.zeros((6, 7))
    U[0:3, 1:4] = np.eye(3)
    U[3:6, 4:7] = np.eye(3)
    U[0:3, 0] = -v
    U[3:6, 0] = -field.E(np.asarray(t), x)
    return U


# ------------------------------------------------------------------- driver


def integrate_batch(
    domain: Domain,
    field: Field,
    t0: Array,
    X0: Array,
    V0: Array,
    s_end: Array,
    *,
    mode: str = "cycle",
    max_bounces: int = 1000,
    sens: bool = False,
    store: bool = False,
    integrands: tuple = (),
) -> list[LaunchResult]:
    """Integrate a batch of backward launches; see module docstring.

    mode="cycle": reflect at every boundary event until s_end/max_bounces.
    mode="first_hit": stop each launch at its first boundary event.
    """
    t = np.array(t0, float, ndmin=1)
    X = np.array(X0, float, ndmin=2)
    V = np.array(V0, float, ndmin=2)
    B = max(t.shape[0], X.shape[0], V.shape[0])
    t = np.broadcast_to(t, (B,)).copy()
    X = np.broadcast_to(X, (B, 3)).copy()
    V = np.broadcast_to(V, (B, 3)).copy()
    send = np.broadcast_to(np.asarray(s_end, float), t.shape).copy()
    if np.any(send > t):
        raise ValueError("s_end must not exceed the launch time")

    xiX = domain.xi(X)
    if np.any(xiX > domain.eps_bd):
        raise StepFailure("launch point outside the closure")

    U = np.zeros((B, 6, 7)) if sens else None
    M = np.tile(np.eye(6), (B, 1, 1)) if sens else None
    if sens:
        for i in range(B):
            U[i] = _init_sens(field, t[i], X[i], V[i])

    nint = len(integrands)
    accum = np.zeros((B, nint))
    phi0 = np.zeros((B, nint))

    def phi_eval(ts, Xs, Vs):
        if nint == 0:
            return np.zeros(np.shape(ts) + (0,))
        return np.stack([np.asarray(f(ts, Xs, Vs), float)
                         for f in integrands], axis=-1)

    if nint:
        phi0[:] = phi_eval(t, X, V)

    events: list[list[EventRec]] = [[] for _ in range(B)]
    rows: list[list] | None = [[] for _ in range(B)] if store else None
    arc_idx = np.zeros(B, int)
    stalled = np.zeros(B, bool)
    truncated = np.zeros(B, bool)
    hit: list[EventRec | None] = [None] * B
    alive = np.ones(B, bool)

    def floor_of(speed):
        return VPERP_FLOOR * (1.0 + speed)

    def record_row(i):
        if store:
            rows[i].append((int(arc_idx[i]), float(t[i]), X[i].copy(),
                            V[i].copy()))

    def do_bounce(i, s_star, x_star, v_star):
        """Reflect launch i at the located event; returns False on stall."""
        speed = float(np.linalg.norm(v_star))
        g = domain.grad_xi(x_star)
        n = g / np.linalg.norm(g)
        vperp = abs(float(np.dot(n, v_star)))
        w = Mseg_at = Upre = Upost = None
        if sens:
            Mpart = M[i]
            w, Upost_mat, v_out, n = _bounce_transfer(
                domain, field, s_star, x_star, v_star, U[i])
            Mseg_at = Mpart.copy()
            Upre = U[i].copy()
            Upost = Upost_mat
        else:
            v_out = v_star - 2.0 * float(np.dot(n, v_star)) * n
        rec = EventRec(
            s=float(s_star), x=np.array(x_star), v_in=np.array(v_star),
            v_out=v_out, n=n, v_perp=vperp, w7=w, Mseg=Mseg_at,
            Upre=Upre, Upost=Upost)
        if vperp < floor_of(speed):
            events[i].append(rec)
            stalled[i] = True
            return False, rec
        events[i].append(rec)
        if sens:
            U[i] = Upost
            M[i] = np.eye(6)
        t[i] = s_star
        X[i] = x_star
        V[i] = v_out
        if store:
            rows[i].append((int(arc_idx[i]), float(s_star),
                            np.array(x_star), np.array(v_star)))
        arc_idx[i] += 1
        record_row(i)
        if nint:
            phi0[i] = phi_eval(t[i:i + 1], X[i:i + 1], V[i:i + 1])[0]
        return True, rec

    # initial dense rows, then immediate on-boundary handling
    for i in range(B):
        record_row(i)
    for i in range(B):
        if abs(xiX[i]) <= max(domain.eps_bd, POS_TOL):
            g = domain.grad_xi(X[i])
            n = g / np.linalg.norm(g)
            nv = float(np.dot(n, V[i]))
            speed = float(np.linalg.norm(V[i]))
            if nv < -floor_of(speed):
                # incoming at launch: bounce happens at s = t exactly
                if mode == "first_hit":
                    hit[i] = EventRec(
                        s=float(t[i]), x=X[i].copy(), v_in=V[i].copy(),
                        v_out=V[i] - 2 * nv * n, n=n, v_perp=abs(nv))
                    alive[i] = False
                else:
                    if sens:
                        M[i] = np.eye(6)
                    ok, _ = do_bounce(i, t[i], X[i].copy(), V[i].copy())
                    if not ok:
                        alive[i] = False
            elif abs(nv) <= floor_of(speed):
                stalled[i] = True
                alive[i] = False

    for i in range(B):
        if alive[i] and abs(t[i] - send[i]) <= 1e-15 * (1 + abs(t[i])):
            alive[i] = False

    iters = 0
    while np.any(alive):
        iters += 1
        if iters > MAX_ITERS_GLOBAL:
            raise StepFailure("global iteration cap exceeded")
        idx = np.nonzero(alive)[0]
        ta, Xa, Va = t[idx], X[idx], V[idx]
        speed = np.linalg.norm(Va, axis=-1)
        h = np.minimum(H_BASE, H_SPEED / (1.0 + speed))
        rem = ta - send[idx]
        landing = h >= rem
        h = np.where(landing, rem, h)

        Ua = U[idx] if sens else None
        Ma = M[idx] if sens else None
        X1, V1, U1, M1, E_end = _rk4_step(field, ta, Xa, Va, h, Ua, Ma)
        if not np.all(np.isfinite(X1)) or not np.all(np.isfinite(V1)):
            raise StepFailure("non-finite state produced")

        xi0 = domain.xi(Xa)
        xi1 = domain.xi(X1)
        d0 = -h * np.einsum("bi,bi->b", domain.grad_xi(Xa), Va)
        d1 = -h * np.einsum("bi,bi->b", domain.grad_xi(X1), V1)
        bump = _hermite_interior_max(xi0, d0, xi1, d1)
        flagged = (xi1 > POS_TOL) | (bump > POS_TOL)

        # ------------------------------------------------ no-event commits
        clean = ~flagged
        ci = idx[clean]
        if ci.size:
            tn = ta[clean] - h[clean]
            tn[landing[clean]] = send[ci][landing[clean]]
            if nint:
                Xm = 0.5 * (Xa[clean] + X1[clean]) - \
                    (h[clean][:, None] / 8.0) * (Va[clean] - V1[clean])
                E0 = field.E(ta[clean], Xa[clean])
                Vm = 0.5 * (Va[clean] + V1[clean]) - \
                    (h[clean][:, None] / 8.0) * (E0 - E_end[clean])
                pm = phi_eval(ta[clean] - 0.5 * h[clean], Xm, Vm)
                p1 = phi_eval(tn, X1[clean], V1[clean])
                accum[ci] += (h[clean][:, None] / 6.0) * \
                    (phi0[ci] + 4.0 * pm + p1)
                phi0[ci] = p1
            t[ci] = tn
            X[ci] = X1[clean]
            V[ci] = V1[clean]
            if sens:
                U[ci] = U1[clean]
                M[ci] = M1[clean]
            for i in ci:
                record_row(i)
            done = landing[clean]
            if np.any(done):
                alive[ci[done]] = False

        # --------------------------------------------------- event launches
        for k in np.nonzero(flagged)[0]:
            i = idx[k]
            loc = _locate_event(domain, field, float(ta[k]), Xa[k], Va[k],
                                float(h[k]), float(xi0[k]), float(d0[k]),
                                float(xi1[k]), float(d1[k]))
            if loc is None:
                if xi1[k] > POS_TOL:
                    raise StepFailure(
                        "crossing detected but no bracket found")
                # phantom (unresolvable dip): commit the step as clean
                tn = float(ta[k] - h[k]) if not landing[k] else float(
                    send[i])
                if nint:
                    Xm = 0.5 * (Xa[k] + X1[k]) - (h[k] / 8.0) * \
                        (Va[k] - V1[k])
                    E0 = field.E(ta[k:k + 1], Xa[k][None])[0]
                    Vm = 0.5 * (Va[k] + V1[k]) - (h[k] / 8.0) * \
                        (E0 - E_end[k])
                    pm = phi_eval(np.array([ta[k] - 0.5 * h[k]]), Xm[None],
                                  Vm[None])[0]
                    p1 = phi_eval(np.array([tn]), X1[k][None],
                                  V1[k][None])[0]
                    accum[i] += (h[k] / 6.0) * (phi0[i] + 4.0 * pm + p1)
                    phi0[i] = p1
                t[i] = tn
                X[i] = X1[k]
                V[i] = V1[k]
                if sens:
                    U[i] = U1[k]
                    M[i] = M1[k]
                record_row(i)
                if landing[k]:
                    alive[i] = False
                continue

            tau, s_star, x_star, v_star = loc
            htau = float(h[k]) * tau
            if sens:
                _, _, Upart, Mpart, _ = _rk4_step(
                    field, ta[k:k + 1], Xa[k][None], Va[k][None],
                    np.array([htau]), U[i][None], M[i][None])
                U[i] = Upart[0]
                M[i] = Mpart[0]
            if nint:
                # Simpson over the partial piece via one half-size step
                Xh, Vh, _, _, _ = _rk4_step(
                    field, ta[k:k + 1], Xa[k][None], Va[k][None],
                    np.array([0.5 * htau]))
                pm = phi_eval(np.array([ta[k] - 0.5 * htau]), Xh, Vh)[0]
                p1 = phi_eval(np.array([s_star]), x_star[None],
                              v_star[None])[0]
                accum[i] += (htau / 6.0) * (phi0[i] + 4.0 * pm + p1)
                phi0[i] = p1

            if mode == "first_hit":
                g = domain.grad_xi(x_star)
                n = g / np.linalg.norm(g)
                nv = float(np.dot(n, v_star))
                hit[i] = EventRec(
                    s=float(s_star), x=np.array(x_star),
                    v_in=np.array(v_star),
                    v_out=v_star - 2 * nv * n, n=n, v_perp=abs(nv),
                    w7=None if not sens else -(g @ U[i][0:3]) / float(
                        np.dot(g, v_star)),
                    Mseg=None if not sens else M[i].copy(),
                    Upre=None if not sens else U[i].copy())
                t[i] = s_star
                X[i] = x_star
                V[i] = v_star
                if store:
                    rows[i].append((int(arc_idx[i]), float(s_star),
                                    np.array(x_star), np.array(v_star)))
                alive[i] = False
                continue

            ok, _ = do_bounce(i, s_star, x_star, v_star)
            if not ok:
                t[i] = s_star
                X[i] = x_star
                V[i] = v_star
                alive[i] = False
                continue
            if len(events[i]) >= max_bounces:
                truncated[i] = True
                alive[i] = False
            if abs(t[i] - send[i]) <= 1e-15 * (1 + abs(t[i])):
                alive[i] = False

    results = []
    for i in range(B):
        results.append(LaunchResult(
            t0=float(np.atleast_1d(t0)[i]),
            x0=np.array(np.atleast_2d(X0)[i], float),
            v0=np.array(np.atleast_2d(V0)[i], float),
            s_final=float(t[i]), x_final=X[i].copy(), v_final=V[i].copy(),
            events=events[i], rows=rows[i] if store else None,
            accum=accum[i].copy(), stalled=bool(stalled[i]),
            truncated=bool(truncated[i]), hit=hit[i],
            U=None if not sens else U[i].copy(),
            Mseg_final=None if not sens else M[i].copy()))
    return results
