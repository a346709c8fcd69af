"""Chart construction, inversion, Jacobians, and the frame ODE."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldbilliards import characteristics, field, frames, geometry

import oracles

SPHERE = geometry.unit_sphere()
ELL = geometry.ellipsoid(1.3, 1.0, 0.8)


def pack(fc):
    return np.concatenate([[fc.x_perp], fc.x_par, [fc.v_perp], fc.v_par])


def unpack(y):
    return frames.FrameCoords(x_perp=float(y[0]), x_par=y[1:3],
                              v_perp=float(y[3]), v_par=y[4:6])


# ------------------------------------------------------------------ anchors


def test_anchor_invariants():
    anc = frames.standard_anchor(ELL)
    n = geometry.normal_at(ELL, anc.z)
    assert abs(float(n @ anc.w)) <= 1e-12
    assert abs(np.linalg.norm(anc.w) - 1.0) <= 1e-12
    u = np.cross(n, anc.w)
    u /= np.linalg.norm(u)
    for pole, sign in zip(anc.poles, (1.0, -1.0)):
        assert abs(float(ELL.xi(pole))) <= ELL.eps_bd
        dirp = pole / np.linalg.norm(pole)
        assert np.linalg.norm(dirp - sign * u) <= 1e-9
    assert anc.exclusion > 0.0


def test_anchor_rejects_normal_direction():
    z = geometry.boundary_point_radial(ELL, np.array([1.0, 0.0, 0.0]))
    n = geometry.normal_at(ELL, z)
    with pytest.raises(ValueError):
        frames.make_anchor(ELL, z, n)


def test_anchor_for_bounce_kinds():
    x = geometry.boundary_point_radial(ELL, np.array([0.3, -0.8, 0.5]))
    fr = geometry.tangent_basis(ELL, x)
    v = -0.4 * fr.n + 1.3 * fr.tau1 + 0.7 * fr.tau2
    anc2 = frames.anchor_for_bounce(ELL, x, v, "II")
    vt = v - float(v @ fr.n) * fr.n
    assert np.linalg.norm(anc2.w - vt / np.linalg.norm(vt)) <= 1e-10
    for kind in ("I", "III"):
        anc = frames.anchor_for_bounce(ELL, x, v, kind)
        assert np.linalg.norm(anc.w - fr.tau1) <= 1e-10
    # off-boundary points anchor at their projection
    anc3 = frames.anchor_for_bounce(ELL, x * 0.98, v, "III")
    assert abs(float(ELL.xi(anc3.z))) <= ELL.eps_bd


# ---------------------------------------------------------- forward map


def test_boundary_slice_is_tangent():
    anc = frames.standard_anchor(SPHERE)
    fc = frames.FrameCoords(x_perp=0.0, x_par=np.array([0.8, 1.1]),
                            v_perp=0.0, v_par=np.array([1.0, 0.0]))
    x, v = frames.chart_forward(anc, fc, SPHERE)
    cd = frames.chart_data(anc, fc.x_par, SPHERE)
    assert abs(float(SPHERE.xi(x))) <= 1e-12
    assert abs(float(cd.n @ v)) <= 1e-12
    assert np.linalg.norm(v - cd.d_eta[:, 0]) <= 1e-12


def test_radial_offset_on_sphere():
    anc = frames.standard_anchor(SPHERE)
    fc = frames.FrameCoords(x_perp=0.1, x_par=np.array([0.4, 0.9]),
                            v_perp=0.0, v_par=np.zeros(2))
    x, _ = frames.chart_forward(anc, fc, SPHERE)
    cd = frames.chart_data(anc, fc.x_par, SPHERE)
    assert np.linalg.norm(x - 0.9 * cd.eta) <= 1e-12


def test_velocity_norm_within_conditioning():
    # |v| and |(v_perp, v_par)| agree up to the singular values of the
    # diagonal chart block
    rng = np.random.default_rng(7)
    anc = frames.standard_anchor(ELL)
    for _ in range(50):
        fc = frames.FrameCoords(
            x_perp=float(rng.uniform(0.0, ELL.delta)),
            x_par=np.array([rng.uniform(0, 2 * math.pi),
                            rng.uniform(0.3, math.pi - 0.3)]),
            v_perp=float(rng.normal()),
            v_par=rng.normal(size=2))
        _, v = frames.chart_forward(anc, fc, ELL)
        J = frames.chart_jacobian(anc, fc, ELL)
        sig = np.linalg.svd(J[0:3, 0:3], compute_uv=False)
        c = np.linalg.norm([fc.v_perp, fc.v_par[0], fc.v_par[1]])
        assert sig[-1] * c - 1e-12 <= np.linalg.norm(v) <= sig[0] * c + 1e-12


# ------------------------------------------------------------- inverse map


def angles_close(a, b, tol):
    da = (a - b + math.pi) % (2.0 * math.pi) - math.pi
    return abs(da) <= tol


def test_round_trip_ellipsoid_grid():
    anc = frames.standard_anchor(ELL)
    rng = np.random.default_rng(3)
    for xp in (0.0, 0.02, 0.06):
        for phi in (0.3, 2.0, 5.9):
            for th in (0.4, 1.3, 2.6):
                fc = frames.FrameCoords(
                    x_perp=xp, x_par=np.array([phi, th]),
                    v_perp=float(rng.normal()), v_par=rng.normal(size=2))
                x, v = frames.chart_forward(anc, fc, ELL)
                fc2 = frames.chart_inverse(anc, x, v, ELL)
                assert abs(fc2.x_perp - fc.x_perp) <= 1e-10
                assert angles_close(fc2.x_par[0], fc.x_par[0], 1e-10)
                assert abs(fc2.x_par[1] - fc.x_par[1]) <= 1e-10
                assert abs(fc2.v_perp - fc.v_perp) <= 1e-10
                assert np.abs(fc2.v_par - fc.v_par).max() <= 1e-10
                x2, v2 = frames.chart_forward(anc, fc2, ELL)
                assert np.linalg.norm(x2 - x) <= 1e-10
                assert np.linalg.norm(v2 - v) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(phi=st.floats(0.0, 2 * math.pi - 1e-9),
       th=st.floats(0.15, math.pi - 0.15),
       xp=st.floats(0.0, 0.09),
       vperp=st.floats(-2.0, 2.0),
       v1=st.floats(-2.0, 2.0),
       v2=st.floats(-2.0, 2.0))
def test_round_trip_property_sphere(phi, th, xp, vperp, v1, v2):
    anc = frames.standard_anchor(SPHERE)
    fc = frames.FrameCoords(x_perp=xp, x_par=np.array([phi, th]),
                            v_perp=vperp, v_par=np.array([v1, v2]))
    x, v = frames.chart_forward(anc, fc, SPHERE)
    fc2 = frames.chart_inverse(anc, x, v, SPHERE)
    x2, v2c = frames.chart_forward(anc, fc2, SPHERE)
    assert np.linalg.norm(x2 - x) <= 1e-9
    assert np.linalg.norm(v2c - v) <= 1e-9


def test_chart_domain_errors():
    anc = frames.standard_anchor(ELL)
    v = np.array([0.1, 0.2, 0.3])
    mid = np.array([1.0, 1.4])
    with pytest.raises(frames.OutOfChart):
        frames.chart_forward(anc, frames.FrameCoords(-0.01, mid, 0.0, np.zeros(2)), ELL)
    with pytest.raises(frames.OutOfChart):
        frames.chart_forward(anc, frames.FrameCoords(2 * ELL.delta, mid, 0.0, np.zeros(2)), ELL)
    with pytest.raises(frames.OutOfChart):
        frames.chart_forward(
            anc, frames.FrameCoords(0.0, np.array([1.0, 0.04]), 0.0, np.zeros(2)), ELL)
    # deep interior: beyond any projection reach
    with pytest.raises(frames.OutOfTube):
        frames.chart_inverse(anc, np.zeros(3), v, ELL)
    # inside projection reach but outside the chart tube
    y = geometry.boundary_point_radial(ELL, np.array([0.2, 0.9, -0.1]))
    n = geometry.normal_at(ELL, y)
    with pytest.raises(frames.OutOfTube):
        frames.chart_inverse(anc, y - 0.15 * n, v, ELL)
    # polar cap: the standard anchor's axis is near e_z
    yp = geometry.boundary_point_radial(ELL, np.array([0.05, 0.02, 1.0]))
    npole = geometry.normal_at(ELL, yp)
    with pytest.raises(frames.NearPole):
        frames.chart_inverse(anc, yp - 0.01 * npole, v, ELL)


# --------------------------------------------------------------- jacobian


def test_chart_jacobian_matches_fd():
    anc = frames.standard_anchor(ELL)
    rng = np.random.default_rng(11)
    for _ in range(5):
        fc = frames.FrameCoords(
            x_perp=float(rng.uniform(0.01, 0.06)),
            x_par=np.array([rng.uniform(0, 2 * math.pi),
                            rng.uniform(0.4, math.pi - 0.4)]),
            v_perp=float(rng.normal()), v_par=rng.normal(size=2))
        J = frames.chart_jacobian(anc, fc, ELL)
        y0 = pack(fc)
        h = 1e-6
        Jfd = np.zeros((6, 6))
        for k in range(6):
            yp, ym = y0.copy(), y0.copy()
            yp[k] += h
            ym[k] -= h
            xp_, vp_ = frames.chart_forward(anc, unpack(yp), ELL)
            xm_, vm_ = frames.chart_forward(anc, unpack(ym), ELL)
            Jfd[:, k] = np.concatenate([xp_ - xm_, vp_ - vm_]) / (2 * h)
        assert np.abs(J - Jfd).max() <= 1e-6 * (1.0 + np.abs(J).max())


def test_chart_jacobian_structure():
    anc = frames.standard_anchor(ELL)
    dets = []
    for phi in np.linspace(0.1, 6.1, 5):
        for th in np.linspace(0.3, math.pi - 0.3, 5):
            for xp in (0.0, 0.04):
                fc = frames.FrameCoords(x_perp=xp, x_par=np.array([phi, th]),
                                        v_perp=0.7, v_par=np.array([0.4, -1.1]))
                J = frames.chart_jacobian(anc, fc, ELL)
                assert np.abs(J[0:3, 3:6]).max() == 0.0
                assert np.abs(J[0:3, 0:3] - J[3:6, 3:6]).max() == 0.0
                D = J[0:3, 0:3]
                detJ = np.linalg.det(J)
                assert abs(detJ - np.linalg.det(D) ** 2) <= 1e-10 * abs(detJ)
                if xp == 0.0:
                    cd = frames.chart_data(anc, fc.x_par, ELL)
                    D3 = float(cd.n @ np.cross(cd.d_eta[:, 0], cd.d_eta[:, 1]))
                    assert abs(abs(np.linalg.det(D)) - abs(D3)) <= 1e-12 * abs(D3)
                dets.append(abs(detJ))
    assert min(dets) > 1e-4


# -------------------------------------------------------------- frame ODE


def test_frame_rhs_matches_linear_solve():
    anc = frames.standard_anchor(ELL)
    fld = field.outward_radial(gain=1.0, mod_amp=0.3, mod_omega=2.0)
    rng = np.random.default_rng(23)
    for _ in range(10):
        fc = frames.FrameCoords(
            x_perp=float(rng.uniform(0.0, 0.07)),
            x_par=np.array([rng.uniform(0, 2 * math.pi),
                            rng.uniform(0.4, math.pi - 0.4)]),
            v_perp=float(rng.normal()), v_par=rng.normal(size=2))
        s = float(rng.uniform(-1, 1))
        x, _ = frames.chart_forward(anc, fc, ELL)
        cd = frames.chart_data(anc, fc.x_par, ELL)
        Fp_ref, Fpar_ref = oracles.frame_rhs_linear_solve(
            cd.n, cd.d_eta, cd.dd_eta, cd.d_n, cd.dd_n,
            fc.x_perp, fc.v_perp, fc.v_par, fld.E(s, x))
        dxp, dpar, Fp, Fpar = frames.frame_rhs(anc, fc, s, fld, ELL)
        assert dxp == fc.v_perp
        assert np.all(dpar == fc.v_par)
        scale = 1.0 + abs(Fp_ref) + np.abs(Fpar_ref).max()
        assert abs(Fp - Fp_ref) <= 1e-12 * scale
        assert np.abs(Fpar - Fpar_ref).max() <= 1e-12 * scale


def test_frame_rhs_sphere_pendulum():
    anc = frames.standard_anchor(SPHERE)
    zero = field.zero_field()
    fc = frames.FrameCoords(x_perp=0.05, x_par=np.array([0.7, 1.2]),
                            v_perp=0.3, v_par=np.array([0.8, -0.5]))
    _, _, Fp, Fpar = frames.frame_rhs(anc, fc, 0.0, zero, SPHERE)
    Fp_o, Fpar_o = oracles.sphere_pendulum_rhs(
        fc.x_perp, fc.x_par[1], fc.v_perp, fc.v_par[0], fc.v_par[1])
    assert abs(Fp - Fp_o) <= 1e-12
    assert np.abs(Fpar - Fpar_o).max() <= 1e-12


def test_rest_on_wall():
    anc = frames.standard_anchor(ELL)
    zero = field.zero_field()
    fc = frames.FrameCoords(x_perp=0.0, x_par=np.array([1.3, 1.0]),
                            v_perp=0.0, v_par=np.zeros(2))
    _, _, Fp, Fpar = frames.frame_rhs(anc, fc, 0.0, zero, ELL)
    assert Fp == 0.0
    assert np.abs(Fpar).max() == 0.0


def test_perp_force_sign():
    # on the sphere wall: F_perp = -|v_par|^2_g - E.n, and the curvature
    # quadratic is negative definite on any strictly convex boundary
    anc = frames.standard_anchor(SPHERE)
    radial = field.outward_radial(gain=1.0)
    fc = frames.FrameCoords(x_perp=0.0, x_par=np.array([0.9, 1.1]),
                            v_perp=0.0, v_par=np.array([0.6, -0.4]))
    _, _, Fp, _ = frames.frame_rhs(anc, fc, 0.0, radial, SPHERE)
    s2 = math.sin(fc.x_par[1])
    vg = s2 ** 2 * fc.v_par[0] ** 2 + fc.v_par[1] ** 2
    assert abs(Fp - (-vg - 1.0)) <= 1e-12
    assert Fp <= -1.0

    anc_e = frames.standard_anchor(ELL)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x_par = np.array([rng.uniform(0, 2 * math.pi),
                          rng.uniform(0.3, math.pi - 0.3)])
        vp = rng.normal(size=2)
        cd = frames.chart_data(anc_e, x_par, ELL)
        quad = float(np.einsum("i,j,aij->", vp, vp, cd.dd_eta * cd.n[:, None, None]))
        assert quad < 0.0


def test_shape_matrix_identity_grid():
    anc = frames.standard_anchor(ELL)
    for phi in np.linspace(0.2, 6.0, 4):
        for th in np.linspace(0.35, math.pi - 0.35, 4):
            cd = frames.chart_data(anc, np.array([phi, th]), ELL)
            for xp in (0.0, 0.03, 0.07):
                a, G = frames.shape_matrices(cd, xp)
                lhs = (np.eye(2) + xp * a) @ G
                assert np.abs(lhs - np.eye(2)).max() <= 1e-12
                # generating relation: -d_i n = sum_k a_ik d_k eta
                recon = -(cd.d_eta @ a.T)
                assert np.abs(recon - cd.d_n).max() <= 1e-10
    # sphere closed form G = I/(1 - x_perp)
    anc_s = frames.standard_anchor(SPHERE)
    cd = frames.chart_data(anc_s, np.array([1.0, 1.3]), SPHERE)
    _, G = frames.shape_matrices(cd, 0.05)
    assert np.abs(G - np.eye(2) / 0.95).max() <= 1e-12


def test_singular_metric_raises():
    anc = frames.standard_anchor(ELL)
    cd = frames.chart_data(anc, np.array([1.0, 1.3]), ELL)
    bad = frames.ChartData(x_par=cd.x_par, eta=cd.eta,
                           d_eta=np.zeros((3, 2)), dd_eta=cd.dd_eta,
                           n=cd.n, d_n=cd.d_n, dd_n=cd.dd_n)
    with pytest.raises(frames.SingularMetric):
        frames.shape_matrices(bad, 0.0)


# ----------------------------------------------------- conjugacy and changes


def test_flow_conjugacy_with_cartesian_arc():
    anc = frames.standard_anchor(ELL)
    fld = field.outward_radial(gain=1.0, mod_amp=0.3, mod_omega=2.0)
    fc = frames.FrameCoords(x_perp=0.03, x_par=np.array([2.1, 1.9]),
                            v_perp=-0.4, v_par=np.array([1.1, 0.6]))
    t0, s_end = 0.7, 0.64
    x, v = frames.chart_forward(anc, fc, ELL)
    arc, hit = characteristics.integrate_arc(
        ELL, fld, characteristics.PhaseState(t=t0, x=x, v=v), s_end)
    assert hit is None
    fc_end = frames.integrate_frame(anc, fc, t0, s_end, fld, ELL, n_steps=400)
    xe, ve = frames.chart_forward(anc, fc_end, ELL)
    assert np.linalg.norm(xe - arc.x[-1]) <= 1e-6
    assert np.linalg.norm(ve - arc.v[-1]) <= 1e-6


def _anchor_family(t):
    d = np.array([math.cos(t), math.sin(t), 0.05])
    z = geometry.boundary_point_radial(ELL, d)
    fr = geometry.tangent_basis(ELL, z)
    w = math.cos(0.7 * t) * fr.tau1 + math.sin(0.7 * t) * fr.tau2
    return frames.make_anchor(ELL, z, w)


def test_chart_change_pattern_and_decay():
    fc = frames.FrameCoords(x_perp=0.03, x_par=np.array([0.9, 1.7]),
                            v_perp=-0.4, v_par=np.array([1.1, 0.6]))
    p = _anchor_family(0.0)
    zero_mask = np.zeros((6, 6), bool)
    zero_mask[0, :] = zero_mask[3, :] = True
    zero_mask[:, 0] = zero_mask[:, 3] = True
    zero_mask[1:3, 4:6] = True
    dists, sups = [], []
    for t in (0.005, 0.01, 0.02, 0.04):
        q = _anchor_family(t)
        _, M = frames.chart_change(p, q, fc, ELL)
        pert = M - np.eye(6)
        assert np.abs(pert[zero_mask]).max() <= 1e-9
        dists.append(np.linalg.norm(p.z - q.z) + np.linalg.norm(p.w - q.w))
        sups.append(np.abs(pert[~zero_mask]).max())
    slope = np.polyfit(np.log(dists), np.log(sups), 1)[0]
    assert 0.9 <= slope <= 1.1


def test_chart_change_identity():
    p = _anchor_family(0.0)
    fc = frames.FrameCoords(x_perp=0.02, x_par=np.array([1.4, 1.1]),
                            v_perp=0.5, v_par=np.array([-0.3, 0.9]))
    fc_q, M = frames.chart_change(p, p, fc, ELL)
    assert np.abs(M - np.eye(6)).max() <= 1e-9
    assert abs(fc_q.x_perp - fc.x_perp) <= 1e-10
