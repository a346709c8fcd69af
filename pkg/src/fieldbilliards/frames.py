"""Anchored spherical charts in the boundary tube.

A chart is pinned to an anchor (z, w): a boundary point z and a unit tangent
w there.  The pole axis is u = n(z) x w, and the boundary is parametrized by
spherical angles about that axis through the domain's radial scaling,

    eta(x_par) = lambda(x_par) d(x_par),        xi(lambda d) = 0,

where d(x_par) is the unit direction at azimuth x_par[0] and polar angle
x_par[1] in the chart frame (e1, e2, e3 = u).  Interior points sit at

    x = eta(x_par) - x_perp n(x_par),           x_perp = wall distance >= 0,

and velocities decompose as

    v = -v_perp n + sum_i v_par_i (d_i eta - x_perp d_i n).

All chart derivatives are analytic: lambda is differentiated implicitly
through xi(lambda d) = 0 and the normal through grad/hess/third of xi, so
one code path serves spheres, ellipsoids, and user polynomial domains (for
the sphere the radial scaling is the identity; for general domains it plays
the role of projecting the sphere chart onto the boundary).

The chart domain excludes polar caps of half-angle DELTA_1 about the pole
axis and is limited to wall distance <= domain.delta.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import geometry
from .errors import NearPole, OutOfChart, OutOfTube, SingularMetric
from .geometry import Domain

Array = np.ndarray

# pole exclusion half-angle (radians); charts never reach their poles
DELTA_1 = 0.1

_ANGLE_SLACK = 1e-12
_RADIAL_TOL = 1e-13
_RADIAL_MAX_ITER = 80


# ------------------------------------------------------------------ anchors


@dataclasses.dataclass(frozen=True)
class ChartAnchor:
    """Chart anchor: boundary point z, unit tangent w, pole data.

    poles holds the two boundary points on the ray through the pole axis
    u = n(z) x w (north = +u first).  exclusion is the Cartesian radius
    around the pole axis matching the DELTA_1 angular cap.
    """

    z: Array
    w: Array
    poles: Array        # (2, 3)
    exclusion: float

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, float))
        object.__setattr__(self, "w", np.asarray(self.w, float))
        object.__setattr__(self, "poles", np.asarray(self.poles, float))


def make_anchor(domain: Domain, z: Array, w: Array) -> ChartAnchor:
    """Anchor at boundary point z with tangent direction w (projected)."""
    z = np.asarray(z, float)
    n = geometry.normal_at(domain, z)
    w = np.asarray(w, float)
    w = w - np.dot(w, n) * n
    nw = np.linalg.norm(w)
    if nw < 1e-12:
        raise ValueError("anchor direction is normal to the boundary")
    w = w / nw
    u = np.cross(n, w)
    u /= np.linalg.norm(u)
    poles = np.stack([
        geometry.boundary_point_radial(domain, u),
        geometry.boundary_point_radial(domain, -u),
    ])
    exclusion = math.sin(DELTA_1) * domain.min_semi_axis
    return ChartAnchor(z=z, w=w, poles=poles, exclusion=exclusion)


def standard_anchor(domain: Domain) -> ChartAnchor:
    """Anchor at the boundary point on the +x axis with its first tangent."""
    z = geometry.boundary_point_radial(domain, np.array([1.0, 0.0, 0.0]))
    fr = geometry.tangent_basis(domain, z)
    return make_anchor(domain, z, fr.tau1)


def anchor_for_bounce(domain: Domain, x: Array, v: Array,
                      kind: str) -> ChartAnchor:
    """Anchor adapted to a bounce of the given class at (x, v).

    Class II charts align w with the tangential part of the velocity; the
    slow (I) and transversal (III) classes take the default tangent at the
    projected point.
    """
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    y, _ = geometry.project_to_boundary(domain, x)
    fr = geometry.tangent_basis(domain, y)
    if kind == "II":
        vt = v - np.dot(v, fr.n) * fr.n
        nt = np.linalg.norm(vt)
        if nt > 1e-12 * (1.0 + np.linalg.norm(v)):
            return make_anchor(domain, y, vt / nt)
    return make_anchor(domain, y, fr.tau1)


def _chart_frame(domain: Domain, anchor: ChartAnchor) -> tuple[Array, Array, Array]:
    """Orthonormal frame (e1, e2, e3) with e3 the pole axis.

    e1 is the radial direction of the anchor point z flattened against e3,
    so z itself sits at azimuth 0.
    """
    n = domain.normal(anchor.z)
    u = np.cross(n, anchor.w)
    u /= np.linalg.norm(u)
    dz = anchor.z / np.linalg.norm(anchor.z)
    e1 = dz - np.dot(dz, u) * u
    ne1 = np.linalg.norm(e1)
    if ne1 < 1e-12:
        raise ValueError("anchor point lies on its own pole axis")
    e1 /= ne1
    e2 = np.cross(u, e1)
    return e1, e2, u


# --------------------------------------------------------------- chart data


@dataclasses.dataclass(frozen=True)
class FrameCoords:
    """Chart coordinates (x_perp, x_par, v_perp, v_par).

    x_perp >= 0 is the wall distance, x_par = (azimuth in [0, 2pi), polar
    angle in (DELTA_1, pi - DELTA_1)), and (v_perp, v_par) the velocity
    components in the moving frame.
    """

    x_perp: float
    x_par: Array    # (2,)
    v_perp: float
    v_par: Array    # (2,)

    def __post_init__(self):
        object.__setattr__(self, "x_par", np.asarray(self.x_par, float))
        object.__setattr__(self, "v_par", np.asarray(self.v_par, float))


@dataclasses.dataclass(frozen=True)
class ChartData:
    """Boundary chart quantities at one x_par: eta, n and derivatives.

    d_eta/d_n have shape (3, 2) (columns = angle derivatives), the second
    derivatives shape (3, 2, 2), symmetric in the trailing pair.
    """

    x_par: Array
    eta: Array
    d_eta: Array
    dd_eta: Array
    n: Array
    d_n: Array
    dd_n: Array


def _radial_root(domain: Domain, d: Array) -> float:
    """lambda > 0 with xi(lambda d) = 0, by damped Newton from min_semi_axis."""
    lam = domain.min_semi_axis
    scale = _RADIAL_TOL * (1.0 + domain.diameter)
    for _ in range(_RADIAL_MAX_ITER):
        p = lam * d
        f = float(domain.xi(p))
        fp = float(domain.grad_xi(p) @ d)
        if fp <= 0.0:
            # before the root the radial derivative can dip; bisect outward
            lam *= 1.5
            continue
        step = f / fp
        step = max(min(step, 0.5 * lam), -0.5 * lam)
        lam -= step
        if abs(step) < scale:
            break
    if abs(float(domain.xi(lam * d))) > 1e-9 * (1.0 + domain.diameter):
        raise geometry.NoConvergence("radial boundary solve did not converge")
    return lam


def chart_data(anchor: ChartAnchor, x_par: Array, domain: Domain) -> ChartData:
    """Evaluate eta, n and their first/second angle derivatives at x_par."""
    x_par = np.asarray(x_par, float)
    e1, e2, e3 = _chart_frame(domain, anchor)
    s1, c1 = math.sin(x_par[0]), math.cos(x_par[0])
    s2, c2 = math.sin(x_par[1]), math.cos(x_par[1])
    b = c1 * e1 + s1 * e2          # azimuthal base direction
    bp = -s1 * e1 + c1 * e2        # its azimuth derivative
    d = s2 * b + c2 * e3
    d_1 = s2 * bp
    d_2 = c2 * b - s2 * e3
    d_11 = -s2 * b
    d_12 = c2 * bp
    d_22 = -d

    lam = _radial_root(domain, d)
    eta = lam * d
    G = domain.grad_xi(eta)
    H = domain.hess_xi(eta)
    T = domain.third_xi(eta)
    Dr = float(G @ d)
    if Dr <= 0.0:
        raise geometry.DegenerateGradient("radial derivative not positive")

    # implicit differentiation of xi(lambda(x_par) d(x_par)) = 0
    l_1 = -lam * float(G @ d_1) / Dr
    l_2 = -lam * float(G @ d_2) / Dr
    eta_1 = l_1 * d + lam * d_1
    eta_2 = l_2 * d + lam * d_2

    def second(li, lj, di, dj, dij, ei, ej):
        rest = li * dj + lj * di + lam * dij
        lij = (-(ei @ H @ ej) - float(G @ rest)) / Dr
        return lij * d + rest

    eta_11 = second(l_1, l_1, d_1, d_1, d_11, eta_1, eta_1)
    eta_12 = second(l_1, l_2, d_1, d_2, d_12, eta_1, eta_2)
    eta_22 = second(l_2, l_2, d_2, d_2, d_22, eta_2, eta_2)

    # normal and derivatives through G = grad xi(eta), n = G/|G|
    m = float(np.linalg.norm(G))
    n = G / m
    G_1 = H @ eta_1
    G_2 = H @ eta_2
    m_1 = float(G @ G_1) / m
    m_2 = float(G @ G_2) / m
    n_1 = (G_1 - n * m_1) / m
    n_2 = (G_2 - n * m_2) / m

    def second_n(Gi, Gj, mi, mj, ni, nj, ei, ej, eij):
        Gij = np.einsum("abc,b,c->a", T, ei, ej) + H @ eij
        mij = (float(Gi @ Gj) + float(G @ Gij) - mi * mj) / m
        return (Gij - nj * mi - ni * mj - n * mij) / m

    n_11 = second_n(G_1, G_1, m_1, m_1, n_1, n_1, eta_1, eta_1, eta_11)
    n_12 = second_n(G_1, G_2, m_1, m_2, n_1, n_2, eta_1, eta_2, eta_12)
    n_22 = second_n(G_2, G_2, m_2, m_2, n_2, n_2, eta_2, eta_2, eta_22)

    d_eta = np.column_stack([eta_1, eta_2])
    dd_eta = np.empty((3, 2, 2))
    dd_eta[:, 0, 0] = eta_11
    dd_eta[:, 0, 1] = dd_eta[:, 1, 0] = eta_12
    dd_eta[:, 1, 1] = eta_22
    d_n = np.column_stack([n_1, n_2])
    dd_n = np.empty((3, 2, 2))
    dd_n[:, 0, 0] = n_11
    dd_n[:, 0, 1] = dd_n[:, 1, 0] = n_12
    dd_n[:, 1, 1] = n_22
    return ChartData(x_par=x_par, eta=eta, d_eta=d_eta, dd_eta=dd_eta,
                     n=n, d_n=d_n, dd_n=dd_n)


# -------------------------------------------------------- chart map and inverse


def _check_coords(coords: FrameCoords, domain: Domain) -> None:
    if not (-_ANGLE_SLACK <= coords.x_perp <= domain.delta + _ANGLE_SLACK):
        raise OutOfChart(
            f"x_perp = {coords.x_perp:.3e} outside [0, {domain.delta:.3e}]")
    th = float(coords.x_par[1])
    if not (DELTA_1 - _ANGLE_SLACK <= th <= math.pi - DELTA_1 + _ANGLE_SLACK):
        raise OutOfChart(
            f"polar angle {th:.4f} outside ({DELTA_1}, {math.pi - DELTA_1:.4f})")


def chart_forward(anchor: ChartAnchor, coords: FrameCoords,
                  domain: Domain) -> tuple[Array, Array]:
    """Map frame coordinates to the Cartesian phase point (x, v)."""
    _check_coords(coords, domain)
    cd = chart_data(anchor, coords.x_par, domain)
    x = cd.eta - coords.x_perp * cd.n
    v = (-coords.v_perp * cd.n + cd.d_eta @ coords.v_par
         - coords.x_perp * (cd.d_n @ coords.v_par))
    return x, v


def chart_inverse(anchor: ChartAnchor, x: Array, v: Array,
                  domain: Domain) -> FrameCoords:
    """Frame coordinates of a Cartesian phase point in the chart tube."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    try:
        y, dist = geometry.project_to_boundary(domain, x)
    except geometry.OutsideTube as exc:
        raise OutOfTube(str(exc)) from exc
    if dist > domain.delta * (1.0 + 1e-9):
        raise OutOfTube(
            f"wall distance {dist:.3e} exceeds chart tube {domain.delta:.3e}")
    e1, e2, e3 = _chart_frame(domain, anchor)
    dy = y / np.linalg.norm(y)
    ct = float(np.clip(dy @ e3, -1.0, 1.0))
    theta = math.acos(ct)
    if theta <= DELTA_1 or theta >= math.pi - DELTA_1:
        raise NearPole(
            f"polar angle {theta:.4f} inside the {DELTA_1} exclusion cap")
    phi = math.atan2(float(dy @ e2), float(dy @ e1)) % (2.0 * math.pi)
    x_par = np.array([phi, theta])

    cd = chart_data(anchor, x_par, domain)
    x_perp = float(cd.n @ (cd.eta - x))
    v_perp = -float(cd.n @ v)
    C = cd.d_eta - x_perp * cd.d_n
    gram = C.T @ C
    v_par = np.linalg.solve(gram, C.T @ v)
    return FrameCoords(x_perp=x_perp, x_par=x_par, v_perp=v_perp, v_par=v_par)


def chart_jacobian(anchor: ChartAnchor, coords: FrameCoords,
                   domain: Domain) -> Array:
    """6x6 differential of chart_forward at coords.

    Column order (x_perp, x_par1, x_par2, v_perp, v_par1, v_par2); rows are
    (x, v).  Block lower-triangular with equal diagonal blocks
    [-n | d_i eta - x_perp d_i n], so det = (n.(d1 eta x d2 eta) + O(x_perp))^2.
    """
    _check_coords(coords, domain)
    cd = chart_data(anchor, coords.x_par, domain)
    xp = coords.x_perp
    C = cd.d_eta - xp * cd.d_n
    D = np.column_stack([-cd.n, C[:, 0], C[:, 1]])
    J = np.zeros((6, 6))
    J[0:3, 0:3] = D
    J[3:6, 3:6] = D
    J[3:6, 0] = -(cd.d_n @ coords.v_par)
    for j in range(2):
        J[3:6, 1 + j] = (-coords.v_perp * cd.d_n[:, j]
                         + np.einsum("i,ai->a", coords.v_par,
                                     cd.dd_eta[:, :, j] - xp * cd.dd_n[:, :, j]))
    return J


def chart_change(anchor_p: ChartAnchor, anchor_q: ChartAnchor,
                 coords: FrameCoords, domain: Domain) -> tuple[FrameCoords, Array]:
    """Transition p -> q at a shared phase point: coordinates and differential.

    Returns (coords in chart q, 6x6 matrix J_q^{-1} J_p).
    """
    x, v = chart_forward(anchor_p, coords, domain)
    coords_q = chart_inverse(anchor_q, x, v, domain)
    Jp = chart_jacobian(anchor_p, coords, domain)
    Jq = chart_jacobian(anchor_q, coords_q, domain)
    return coords_q, np.linalg.solve(Jq, Jp)


# ------------------------------------------------------------- frame dynamics


def shape_matrices(cd: ChartData, x_perp: float) -> tuple[Array, Array]:
    """(a, G) at wall distance x_perp: -d_i n = sum_k a_ik d_k eta and
    G = (I + x_perp a)^{-1}."""
    g = cd.d_eta.T @ cd.d_eta
    if abs(float(np.linalg.det(g))) < 1e-12:
        raise SingularMetric("det of the first fundamental form below 1e-12")
    a = -np.linalg.solve(g.T, (cd.d_n.T @ cd.d_eta).T).T
    G = np.linalg.inv(np.eye(2) + x_perp * a)
    return a, G


def frame_rhs(anchor: ChartAnchor, coords: FrameCoords, s: float, field,
              domain: Domain) -> tuple[float, Array, float, Array]:
    """Right-hand side of the frame ODE at time s.

    Returns (x_perp', x_par', F_perp, F_par) with x_perp' = v_perp,
    x_par' = v_par, F_perp the normal acceleration (curvature quadratic,
    its x_perp correction, and -E.n) and F_par the tangential acceleration
    assembled through the dual basis and the G matrix.
    """
    _check_coords(coords, domain)
    cd = chart_data(anchor, coords.x_par, domain)
    xp, vp = coords.x_perp, coords.v_par
    x = cd.eta - xp * cd.n
    E = np.asarray(field.E(float(s), x), float)

    curv_eta = np.einsum("i,j,aij->a", vp, vp, cd.dd_eta)
    curv_n = np.einsum("i,j,aij->a", vp, vp, cd.dd_n)
    F_perp = float(curv_eta @ cd.n) - xp * float(curv_n @ cd.n) - float(E @ cd.n)

    a, G = shape_matrices(cd, xp)
    A2 = E + 2.0 * coords.v_perp * (cd.d_n @ vp) - curv_eta + xp * curv_n
    D3 = float(cd.n @ np.cross(cd.d_eta[:, 0], cd.d_eta[:, 1]))
    dual1 = -np.cross(cd.n, cd.d_eta[:, 1]) / D3
    dual2 = np.cross(cd.n, cd.d_eta[:, 0]) / D3
    P = np.array([float(dual1 @ A2), float(dual2 @ A2)])
    F_par = G.T @ P
    return coords.v_perp, vp.copy(), F_perp, F_par


def integrate_frame(anchor: ChartAnchor, coords: FrameCoords, t: float,
                    s_target: float, field, domain: Domain,
                    n_steps: int = 400) -> FrameCoords:
    """Fixed-step RK4 integration of the frame ODE from time t to s_target."""
    y = np.concatenate([[coords.x_perp], coords.x_par,
                        [coords.v_perp], coords.v_par])

    def rhs(tau, yv):
        c = FrameCoords(x_perp=float(yv[0]), x_par=yv[1:3],
                        v_perp=float(yv[3]), v_par=yv[4:6])
        dxp, dpar, Fp, Fpar = frame_rhs(anchor, c, tau, field, domain)
        return np.concatenate([[dxp], dpar, [Fp], Fpar])

    h = (s_target - t) / n_steps
    tau = float(t)
    for _ in range(n_steps):
        k1 = rhs(tau, y)
        k2 = rhs(tau + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(tau + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(tau + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tau += h
    return FrameCoords(x_perp=float(y[0]), x_par=y[1:3],
                       v_perp=float(y[3]), v_par=y[4:6])
