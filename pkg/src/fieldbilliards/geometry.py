"""Implicit strictly convex domains.

A domain is the sublevel set Omega = {x : xi(x) < 0} of a C^3 defining
function with nonvanishing gradient near the zero level and uniformly
positive-definite Hessian.  The module supplies xi and its first three
derivative tensors analytically per kind, the outward unit normal, tangent
frames, nearest-boundary projection, and convexity validation.

Conventions used throughout the package:
    xi(x) < 0    inside the domain
    xi(x) = 0    on the boundary
    n(x) = grad xi / |grad xi|   outward unit normal
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import Callable

import numpy as np

from .errors import (
    DegenerateGradient,
    NoConvergence,
    NotOnBoundary,
    OutsideTube,
)

Array = np.ndarray

# numerically-pinned constructor defaults
TUBE_FRACTION = 0.1          # tube width delta = 0.1 * min semi-axis
EPS_BD_FRACTION = 1e-9       # boundary tolerance = 1e-9 * diameter
PROJECT_MAX_ITERS = 50
PROJECT_RESIDUAL_TOL = 1e-10


# ---------------------------------------------------------------- domain type


@dataclasses.dataclass(eq=False)
class Domain:
    """Immutable description of a strictly convex implicit domain.

    ``xi``, ``grad_xi``, ``hess_xi``, ``third_xi`` are vectorized over a
    trailing coordinate axis: points of shape (..., 3) give values of shape
    (...,), (..., 3), (..., 3, 3) and (..., 3, 3, 3) respectively.
    """

    kind: str
    params: dict
    xi: Callable[[Array], Array]
    grad_xi: Callable[[Array], Array]
    hess_xi: Callable[[Array], Array]
    third_xi: Callable[[Array], Array]
    convexity_constant: float
    min_semi_axis: float
    diameter: float

    def __post_init__(self):
        self.delta = TUBE_FRACTION * self.min_semi_axis
        self.eps_bd = EPS_BD_FRACTION * self.diameter
        self._delta_prime = None

    # -- convenience scalar wrappers -------------------------------------

    def normal(self, x: Array) -> Array:
        """Unit outward normal grad xi/|grad xi| (no boundary check)."""
        g = self.grad_xi(x)
        nrm = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(nrm < 1e-12):
            raise DegenerateGradient(
                f"|grad xi| = {float(np.min(nrm)):.3e} below 1e-12"
            )
        return g / nrm

    def on_boundary(self, x: Array) -> Array:
        return np.abs(self.xi(x)) <= self.eps_bd

    def delta_prime(self) -> float:
        """min |xi| over the surface {d(x, boundary) = delta} (cached).

        Two-stage search: a global Fibonacci sweep, then a dense sweep of
        a small cap around the coarse argmin direction (the shell value is
        smooth in the direction, so the cap refinement recovers the true
        minimum to a few parts in 1e5).
        """
        if self._delta_prime is None:
            def shell_abs_xi(dirs):
                xb = np.stack([boundary_point_radial(self, d) for d in dirs])
                inside = xb - self.delta * self.normal(xb)
                return np.abs(self.xi(inside))

            dirs = fibonacci_directions(2048)
            vals = shell_abs_xi(dirs)
            d0 = dirs[int(np.argmin(vals))]
            # dense cap around d0, radius ~ 3x the coarse angular spacing
            cap = 3.0 * np.sqrt(4.0 * np.pi / 2048)
            seed = np.zeros(3)
            seed[int(np.argmin(np.abs(d0)))] = 1.0
            t1 = seed - np.dot(seed, d0) * d0
            t1 /= np.linalg.norm(t1)
            t2 = np.cross(d0, t1)
            k = np.arange(4096)
            rad = cap * np.sqrt((k + 0.5) / 4096)
            ang = k * np.pi * (3.0 - np.sqrt(5.0))  # golden-angle spiral
            disc = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
            local = (d0[None, :] + disc[:, :1] * t1[None, :]
                     + disc[:, 1:2] * t2[None, :])
            local /= np.linalg.norm(local, axis=1, keepdims=True)
            self._delta_prime = float(
                min(np.min(vals), np.min(shell_abs_xi(local))))
        return self._delta_prime


# ------------------------------------------------------------- constructors


def unit_sphere() -> Domain:
    """xi = |x|^2 - 1."""
    return ellipsoid(1.0, 1.0, 1.0, kind="unit-sphere")


def ellipsoid(a: float, b: float, c: float, kind: str = "ellipsoid") -> Domain:
    """xi = x^2/a^2 + y^2/b^2 + z^2/c^2 - 1 with semi-axes (a, b, c)."""
    if min(a, b, c) <= 0:
        raise ValueError("semi-axes must be positive")
    w = np.array([1.0 / a**2, 1.0 / b**2, 1.0 / c**2])
    hess_const = 2.0 * np.diag(w)
    third_const = np.zeros((3, 3, 3))

    def xi(x):
        x = np.asarray(x, float)
        return np.sum(w * x * x, axis=-1) - 1.0

    def grad(x):
        x = np.asarray(x, float)
        return 2.0 * w * x

    def hess(x):
        x = np.asarray(x, float)
        return np.broadcast_to(hess_const, x.shape[:-1] + (3, 3)).copy()

    def third(x):
        x = np.asarray(x, float)
        return np.broadcast_to(third_const, x.shape[:-1] + (3, 3, 3)).copy()

    return Domain(
        kind=kind,
        params={"semi_axes": (float(a), float(b), float(c))},
        xi=xi,
        grad_xi=grad,
        hess_xi=hess,
        third_xi=third,
        convexity_constant=float(2.0 * np.min(w)),
        min_semi_axis=float(min(a, b, c)),
        diameter=float(2.0 * max(a, b, c)),
    )


class _Poly:
    """Trivariate polynomial sum_k c_k x^i y^j z^k with vectorized eval."""

    def __init__(self, exps: Array, coeffs: Array):
        keep = coeffs != 0.0
        self.exps = exps[keep].astype(int)
        self.coeffs = coeffs[keep].astype(float)

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, float)
        if len(self.coeffs) == 0:
            return np.zeros(x.shape[:-1])
        # (..., 1, 3) ** (nterm, 3) -> product over coords -> (..., nterm)
        mono = np.prod(x[..., None, :] ** self.exps, axis=-1)
        return mono @ self.coeffs

    def diff(self, axis: int) -> "_Poly":
        e = self.exps.copy()
        c = self.coeffs * e[:, axis]
        e[:, axis] = np.maximum(e[:, axis] - 1, 0)
        return _Poly(e, c)


def user_polynomial(
    coeffs: dict, convexity_constant: float | None = None
) -> Domain:
    """Domain from monomial coefficients {(i, j, k): c}.

    The origin must be interior (xi(0) < 0) and the polynomial strictly
    convex on the closure; the convexity constant is estimated by sampling
    when not supplied.
    """
    exps = np.array(list(coeffs.keys()), int).reshape(-1, 3)
    cs = np.array(list(coeffs.values()), float)
    p = _Poly(exps, cs)
    grads = [p.diff(i) for i in range(3)]
    hesss = [[grads[i].diff(j) for j in range(3)] for i in range(3)]
    thirds = [
        [[hesss[i][j].diff(k) for k in range(3)] for j in range(3)]
        for i in range(3)
    ]

    def xi(x):
        return p(x)

    def grad(x):
        x = np.asarray(x, float)
        return np.stack([g(x) for g in grads], axis=-1)

    def hess(x):
        x = np.asarray(x, float)
        rows = [np.stack([hesss[i][j](x) for j in range(3)], axis=-1)
                for i in range(3)]
        return np.stack(rows, axis=-2)

    def third(x):
        x = np.asarray(x, float)
        out = np.empty(np.shape(x)[:-1] + (3, 3, 3))
        for i, j, k in itertools.product(range(3), repeat=3):
            out[..., i, j, k] = thirds[i][j][k](x)
        return out

    if p(np.zeros(3)) >= 0:
        raise ValueError("origin must be interior (xi(0) < 0)")

    dom = Domain(
        kind="user-polynomial",
        params={"coeffs": dict(coeffs)},
        xi=xi,
        grad_xi=grad,
        hess_xi=hess,
        third_xi=third,
        convexity_constant=1.0,  # placeholder, fixed below
        min_semi_axis=1.0,
        diameter=2.0,
    )
    # geometry scales from radial boundary sampling
    dirs = fibonacci_directions(512)
    radii = _radial_boundary_lambda(dom, dirs)
    dom.min_semi_axis = float(np.min(radii))
    dom.diameter = float(2.0 * np.max(radii))
    dom.delta = TUBE_FRACTION * dom.min_semi_axis
    dom.eps_bd = EPS_BD_FRACTION * dom.diameter
    if convexity_constant is None:
        pts = sample_boundary(dom, 256)
        interior = pts * np.linspace(0.05, 1.0, 8)[:, None, None]
        eigs = np.linalg.eigvalsh(dom.hess_xi(interior.reshape(-1, 3)))
        convexity_constant = 0.95 * float(np.min(eigs))
        if convexity_constant <= 0:
            raise ValueError("polynomial is not strictly convex on samples")
    dom.convexity_constant = float(convexity_constant)
    return dom


# ----------------------------------------------------------- boundary points


def fibonacci_directions(n: int) -> Array:
    """n quasi-uniform unit vectors (Fibonacci sphere)."""
    i = np.arange(n, dtype=float)
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = 2.0 * np.pi * i / phi
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=-1)


def _radial_boundary_lambda(domain: Domain, dirs: Array) -> Array:
    """lambda(d) > 0 with xi(lambda d) = 0, per unit direction d (Newton)."""
    d = np.asarray(dirs, float)
    lam = np.full(d.shape[:-1], domain.min_semi_axis)
    # bracket growth: ensure we start inside
    for _ in range(60):
        val = domain.xi(lam[..., None] * d)
        slope = np.sum(domain.grad_xi(lam[..., None] * d) * d, axis=-1)
        step = val / np.where(np.abs(slope) < 1e-300, 1e-300, slope)
        # damp: lambda must stay positive
        lam_new = np.clip(lam - step, 0.25 * lam, 4.0 * lam)
        if np.max(np.abs(lam_new - lam)) < 1e-15 * np.max(lam_new):
            lam = lam_new
            break
        lam = lam_new
    if np.max(np.abs(domain.xi(lam[..., None] * d))) > 1e-9:
        raise NoConvergence("radial boundary solve failed")
    return lam


def boundary_point_radial(domain: Domain, direction: Array) -> Array:
    """The boundary point on the ray from the origin along ``direction``."""
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    lam = _radial_boundary_lambda(domain, d)
    return lam[..., None] * d


def sample_boundary(domain: Domain, n: int, seed: int | None = None) -> Array:
    """n boundary points: Fibonacci grid (seed None) or seeded random."""
    if n <= 0:
        return np.zeros((0, 3))
    if seed is None:
        dirs = fibonacci_directions(n)
    else:
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return boundary_point_radial(domain, dirs)


# ------------------------------------------------------------------- frames


@dataclasses.dataclass(frozen=True)
class BoundaryFrame:
    """Orthonormal frame at a boundary point: tau1 x tau2 = n."""

    x: Array
    n: Array
    tau1: Array
    tau2: Array


def normal_at(domain: Domain, x: Array) -> Array:
    """Unit outward normal at a boundary point (single point)."""
    x = np.asarray(x, float)
    if abs(float(domain.xi(x))) > domain.eps_bd:
        raise NotOnBoundary(
            f"|xi(x)| = {abs(float(domain.xi(x))):.3e} exceeds "
            f"eps_bd = {domain.eps_bd:.3e}"
        )
    return domain.normal(x)


def tangent_basis(domain: Domain, x: Array) -> BoundaryFrame:
    """Orthonormal (tau1, tau2, n) at boundary point x with tau1 x tau2 = n."""
    x = np.asarray(x, float)
    n = normal_at(domain, x)
    # seed with the axis least aligned with n
    e = np.zeros(3)
    e[int(np.argmin(np.abs(n)))] = 1.0
    t1 = e - np.dot(e, n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return BoundaryFrame(x=x, n=n, tau1=t1, tau2=t2)


# -------------------------------------------------------------- projection


def project_to_boundary(domain: Domain, x: Array) -> tuple[Array, float]:
    """Nearest boundary point and distance, for x in the boundary tube.

    Newton on the constrained stationarity system
        y - x - lam * grad xi(y) = 0,   xi(y) = 0
    seeded at the radial boundary point, with damped steps.  The returned
    point satisfies the tangential stationarity residual
    max_i |tau_i . (x - y)| <= 1e-10 and projecting a boundary point is
    the identity to machine precision.
    """
    x = np.asarray(x, float)
    y = boundary_point_radial(domain, x) if np.linalg.norm(x) > 1e-12 \
        else boundary_point_radial(domain, np.array([1.0, 0.0, 0.0]))
    g = domain.grad_xi(y)
    lam = float(np.dot(y - x, g) / np.dot(g, g))

    def residual(y, lam):
        g = domain.grad_xi(y)
        return np.concatenate([y - x - lam * g, [domain.xi(y)]]), g

    F, g = residual(y, lam)
    for _ in range(PROJECT_MAX_ITERS):
        if np.linalg.norm(F) < 1e-14 * (1.0 + domain.diameter):
            break
        H = domain.hess_xi(y)
        J = np.zeros((4, 4))
        J[:3, :3] = np.eye(3) - lam * H
        J[:3, 3] = -g
        J[3, :3] = g
        step = np.linalg.solve(J, -F)
        scale = 1.0
        for _ in range(20):  # damped update
            y_new = y + scale * step[:3]
            lam_new = lam + scale * step[3]
            F_new, g_new = residual(y_new, lam_new)
            if np.linalg.norm(F_new) < np.linalg.norm(F):
                y, lam, F, g = y_new, lam_new, F_new, g_new
                break
            scale *= 0.5
        else:
            raise NoConvergence("projection Newton stalled")
    else:
        raise NoConvergence(
            f"projection did not converge in {PROJECT_MAX_ITERS} iters"
        )

    # stationarity residual in the tangent frame
    n = domain.normal(y)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(n)))] = 1.0
    t1 = e - np.dot(e, n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    res = max(abs(np.dot(t1, x - y)), abs(np.dot(t2, x - y)))
    if res > PROJECT_RESIDUAL_TOL * (1.0 + domain.diameter):
        raise NoConvergence(f"stationarity residual {res:.3e}")

    dist = float(np.linalg.norm(x - y))
    # the certified regime is the delta-tube; the solve itself stays
    # reliable up to a fraction of the smallest semi-axis (uniqueness
    # of the nearest point degrades near the medial axis), so gate there
    reach = 0.45 * domain.min_semi_axis
    if dist >= reach and abs(float(domain.xi(x))) > domain.eps_bd:
        raise OutsideTube(
            f"d(x, boundary) = {dist:.3e} >= reach = {reach:.3e}"
        )
    return y, dist


def distance_to_boundary(domain: Domain, x: Array) -> float:
    """Unsigned distance d(x, boundary) for x in the tube."""
    _, dist = project_to_boundary(domain, x)
    return dist


def in_tube(domain: Domain, x: Array) -> bool:
    """True if x lies in the boundary tube (d(x, boundary) < delta)."""
    try:
        _, dist = project_to_boundary(domain, x)
    except OutsideTube:
        return False
    return dist < domain.delta


# ---------------------------------------------------------------- convexity


def validate_convexity(
    domain: Domain, n_samples: int, seed: int = 0
) -> tuple[float, bool]:
    """Min Hessian Rayleigh quotient over sampled points of the closure.

    Returns (min quotient, ok) with ok iff the minimum is at least
    convexity_constant * (1 - 1e-9).  The quotient minimum over directions
    is computed exactly per point (smallest Hessian eigenvalue).
    """
    if n_samples < 1:
        raise ValueError("n_samples >= 1 required")
    rng = np.random.default_rng(seed)
    try:
        pts = [sample_boundary(domain, max(n_samples // 2, 1))]
    except NoConvergence:
        # level set not radially solvable (e.g. nonconvex xi): box-only
        pts = [np.zeros((0, 3))]
    # rejection-sample the interior from the bounding box
    r = 0.5 * domain.diameter
    need = n_samples - pts[0].shape[0]
    while need > 0:
        cand = rng.uniform(-r, r, size=(4 * need, 3))
        cand = cand[domain.xi(cand) <= 0.0][:need]
        if cand.size:
            pts.append(cand)
            need -= cand.shape[0]
    x = np.concatenate(pts, axis=0)
    eigs = np.linalg.eigvalsh(domain.hess_xi(x))
    mn = float(np.min(eigs))
    ok = bool(mn >= domain.convexity_constant * (1.0 - 1e-9))
    return mn, ok
