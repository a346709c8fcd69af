import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldbilliards import geometry
from fieldbilliards.errors import DegenerateGradient, NotOnBoundary, OutsideTube

from oracles import sphere_projection


# ---- domain constructors ----


def test_unit_sphere_basics():
    dom = geometry.unit_sphere()
    assert dom.kind == "unit-sphere"
    x = np.array([0.0, 0.0, 1.0])
    assert abs(dom.xi(x)) < 1e-15
    assert np.allclose(dom.grad_xi(x), [0, 0, 2])
    assert np.allclose(dom.hess_xi(x), 2 * np.eye(3))
    assert np.allclose(dom.third_xi(x), 0)
    assert dom.convexity_constant == pytest.approx(2.0)
    assert dom.min_semi_axis == pytest.approx(1.0)
    assert dom.diameter == pytest.approx(2.0)


def test_ellipsoid_scales():
    dom = geometry.ellipsoid(1.3, 1.0, 0.8)
    assert dom.min_semi_axis == pytest.approx(0.8)
    assert dom.diameter == pytest.approx(2.6)
    # convexity constant is the smallest Hessian eigenvalue 2/a^2
    assert dom.convexity_constant == pytest.approx(2.0 / 1.3**2)
    x = np.array([1.3, 0.0, 0.0])
    assert abs(dom.xi(x)) < 1e-12


def test_polynomial_domain_matches_ellipsoid():
    # x^2/4 + y^2 + z^2 - 1 expressed as raw coefficients
    coeffs = {(2, 0, 0): 0.25, (0, 2, 0): 1.0, (0, 0, 2): 1.0,
              (0, 0, 0): -1.0}
    dom = geometry.user_polynomial(coeffs)
    ref = geometry.ellipsoid(2.0, 1.0, 1.0)
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(50, 3))
    assert np.allclose(dom.xi(pts), ref.xi(pts), atol=1e-12)
    assert np.allclose(dom.grad_xi(pts), ref.grad_xi(pts), atol=1e-12)
    assert np.allclose(dom.hess_xi(pts), ref.hess_xi(pts), atol=1e-12)
    assert np.allclose(dom.third_xi(pts), 0.0, atol=1e-12)
    # geometric scales are sampled over directions for polynomial domains
    assert dom.min_semi_axis == pytest.approx(1.0, rel=1e-3)


def test_polynomial_domain_quartic():
    # strictly convex quartic perturbation of the sphere
    coeffs = {(2, 0, 0): 1.0, (0, 2, 0): 1.0, (0, 0, 2): 1.0,
              (4, 0, 0): 0.1, (0, 0, 0): -1.0}
    dom = geometry.user_polynomial(coeffs)
    x = np.array([0.9, 0.1, 0.2])
    h = 1e-5
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (dom.xi(x + e) - dom.xi(x - e)) / (2 * h)
        assert dom.grad_xi(x)[i] == pytest.approx(fd, abs=1e-8)
        fd_g = (dom.grad_xi(x + e) - dom.grad_xi(x - e)) / (2 * h)
        assert np.allclose(dom.hess_xi(x)[:, i], fd_g, atol=1e-6)
        fd_h = (dom.hess_xi(x + e) - dom.hess_xi(x - e)) / (2 * h)
        assert np.allclose(dom.third_xi(x)[:, :, i], fd_h, atol=1e-4)


def test_polynomial_domain_rejects_positive_center():
    with pytest.raises(ValueError):
        geometry.user_polynomial({(2, 0, 0): 1.0, (0, 0, 0): 1.0})


# ---- normals and frames ----


def test_normal_is_outward_unit():
    dom = geometry.ellipsoid(1.3, 1.0, 0.8)
    pts = geometry.sample_boundary(dom, 64)
    n = dom.normal(pts)
    assert np.allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)
    # outward: moving along n increases xi
    assert np.all(dom.xi(pts + 1e-6 * n) > 0)
    assert np.all(dom.xi(pts - 1e-6 * n) < 0)


def test_normal_at_requires_boundary():
    dom = geometry.unit_sphere()
    with pytest.raises(NotOnBoundary):
        geometry.normal_at(dom, np.array([0.5, 0.0, 0.0]))


def test_degenerate_gradient_raises():
    dom = geometry.unit_sphere()
    with pytest.raises(DegenerateGradient):
        dom.normal(np.zeros(3))


def test_boundary_frame_orthonormal():
    dom = geometry.ellipsoid(1.1, 0.9, 1.0)
    for x in geometry.sample_boundary(dom, 32):
        fr = geometry.tangent_basis(dom, x)
        assert np.allclose(fr.n, geometry.normal_at(dom, x), atol=1e-15)
        B = np.stack([fr.tau1, fr.tau2, fr.n])
        assert np.allclose(B @ B.T, np.eye(3), atol=1e-12)
        assert np.allclose(np.cross(fr.tau1, fr.tau2), fr.n, atol=1e-12)


# ---- projection ----


def test_project_to_boundary_sphere_closed_form():
    dom = geometry.unit_sphere()
    x = np.array([0.5, 0.5, 0.5])
    y, dist = geometry.project_to_boundary(dom, x)
    y_ref, d_ref = sphere_projection(x)
    assert np.allclose(y, y_ref, atol=1e-12)
    assert dist == pytest.approx(d_ref, abs=1e-12)
    assert dist == pytest.approx(1.0 - np.sqrt(0.75), abs=1e-12)


def test_project_outside_tube_raises():
    dom = geometry.unit_sphere()
    with pytest.raises(OutsideTube):
        geometry.project_to_boundary(dom, np.array([0.2, 0.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 2 * np.pi), st.floats(0.2, np.pi - 0.2),
       st.floats(0.001, 0.09))
def test_project_ellipsoid_stationarity(phi, theta, depth):
    dom = geometry.ellipsoid(1.2, 1.0, 0.9)
    d = np.array([np.sin(theta) * np.cos(phi),
                  np.sin(theta) * np.sin(phi), np.cos(theta)])
    xb = geometry.boundary_point_radial(dom, d)
    x = xb - depth * dom.normal(xb)
    y, dist = geometry.project_to_boundary(dom, x)
    assert abs(dom.xi(y)) < 1e-9
    # displacement is parallel to the normal at y
    disp = x - y
    n = dom.normal(y)
    assert np.linalg.norm(disp - (disp @ n) * n) < 1e-9 * dom.diameter
    assert dist == pytest.approx(np.linalg.norm(disp), abs=1e-10)
    # and never farther than the inward offset used to build x
    assert dist <= depth + 1e-9


def test_distance_in_tube_helpers():
    dom = geometry.unit_sphere()
    assert dom.delta == pytest.approx(0.1)
    assert geometry.in_tube(dom, np.array([0.95, 0.0, 0.0]))
    assert not geometry.in_tube(dom, np.array([0.5, 0.0, 0.0]))


def test_delta_prime_unit_sphere():
    # at distance delta = 0.1 inside the unit sphere, |xi| = 1 - 0.9^2
    dom = geometry.unit_sphere()
    dp = dom.delta_prime()
    assert dp == pytest.approx(1.0 - 0.81, rel=1e-9)


def test_delta_prime_ellipsoid_is_min_over_shell():
    dom = geometry.ellipsoid(1.5, 1.0, 1.0)
    dp = dom.delta_prime()
    # shell point along the long axis has the smallest |xi|:
    # xi(1.5 - delta, 0, 0) with delta = 0.1
    x = np.array([1.4, 0.0, 0.0])
    assert dp <= abs(dom.xi(x)) * (1 + 1e-5)  # sampled min, small slack
    assert dp > 0


# ---- convexity validation ----


def test_validate_convexity_accepts_ellipsoid():
    dom = geometry.ellipsoid(1.3, 1.0, 0.8)
    margin, ok = geometry.validate_convexity(dom, n_samples=200, seed=0)
    assert ok
    assert margin >= dom.convexity_constant * (1 - 1e-9)


def test_validate_convexity_rejects_nonconvex_quartic():
    # bounded level set, but the Hessian has a negative eigenvalue at 0
    coeffs = {(4, 0, 0): 1.0, (2, 0, 0): -1.0, (0, 2, 0): 1.0,
              (0, 0, 2): 1.0, (0, 0, 0): -0.5}
    dom = geometry.user_polynomial(coeffs, convexity_constant=2.0)
    margin, ok = geometry.validate_convexity(dom, n_samples=200, seed=0)
    assert not ok
    assert margin < 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(0.05, np.pi - 0.05),
       st.floats(0.6, 0.999))
def test_sphere_projection_property(phi, theta, r):
    x = r * np.array([np.sin(theta) * np.cos(phi),
                      np.sin(theta) * np.sin(phi), np.cos(theta)])
    dom = geometry.unit_sphere()
    y, dist = geometry.project_to_boundary(dom, x)
    y_ref, d_ref = sphere_projection(x)
    assert np.allclose(y, y_ref, atol=1e-9)
    assert dist == pytest.approx(d_ref, abs=1e-9)
