import numpy as np
import pytest

from fieldbilliards import field, geometry
from fieldbilliards.errors import MalformedField


def _bcast(t, x, val):
    """Broadcast a constant tensor to the field callable output shape."""
    val = np.asarray(val, float)
    base = field._shape(t, x)
    return np.broadcast_to(val, base + val.shape).copy()


def _radial(t, x, sign=1.0):
    x = np.asarray(x, float)
    base = field._shape(t, x)
    return sign * np.broadcast_to(x, base + (3,)).copy()


def _const_tail():
    """Derivative callables for a field with t-independent linear E."""
    return dict(
        dE_dt=lambda t, x: _bcast(t, x, np.zeros(3)),
        grad_x_E=lambda t, x: _bcast(t, x, np.zeros((3, 3))),
        dtt_E=lambda t, x: _bcast(t, x, np.zeros(3)),
        dt_grad_E=lambda t, x: _bcast(t, x, np.zeros((3, 3))),
        hess_x_E=lambda t, x: _bcast(t, x, np.zeros((3, 3, 3))),
    )


def test_zero_field():
    f = field.zero_field()
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(f.E(1.0, x), 0.0)
    assert f.E(1.0, x).shape == (5, 3)
    assert np.allclose(f.grad_x_E(1.0, x), 0.0)
    assert f.hess_x_E(1.0, x).shape == (5, 3, 3, 3)


def test_constant_field_values():
    f = field.constant_field([0.0, 0.0, -1.0])
    x = np.zeros((4, 3))
    E = f.E(2.0, x)
    assert E.shape == (4, 3)
    assert np.allclose(E, [0, 0, -1])
    assert np.allclose(f.dE_dt(2.0, x), 0.0)
    assert np.allclose(f.grad_x_E(2.0, x), 0.0)


def test_constant_field_rejects_bad_shape():
    with pytest.raises(MalformedField):
        field.constant_field([1.0, 2.0])


def test_outward_radial_static():
    f = field.outward_radial(gain=1.0)
    x = np.array([0.3, -0.2, 0.5])
    assert np.allclose(f.E(0.7, x), x)
    assert np.allclose(f.grad_x_E(0.7, x), np.eye(3))
    assert np.allclose(f.dE_dt(0.7, x), 0.0)
    assert np.allclose(f.hess_x_E(0.7, x), 0.0)


def test_outward_radial_modulated_derivatives():
    f = field.outward_radial(gain=0.5, mod_amp=0.2, mod_omega=1.3,
                             mod_phase=0.4)
    t, h = 0.9, 1e-6
    x = np.array([0.1, 0.2, -0.3])
    fd_t = (f.E(t + h, x) - f.E(t - h, x)) / (2 * h)
    assert np.allclose(f.dE_dt(t, x), fd_t, atol=1e-7)
    fd_tt = (f.dE_dt(t + h, x) - f.dE_dt(t - h, x)) / (2 * h)
    assert np.allclose(f.dtt_E(t, x), fd_tt, atol=1e-6)
    fd_tg = (f.grad_x_E(t + h, x) - f.grad_x_E(t - h, x)) / (2 * h)
    assert np.allclose(f.dt_grad_E(t, x), fd_tg, atol=1e-7)


def test_field_derivative_check_analytic_fields():
    for f in (field.zero_field(), field.constant_field([0, 1, 0]),
              field.outward_radial(0.7, 0.1, 2.0, 0.3),
              field.radial_plus_uniform(0.5, [0.0, 0.0, -0.2])):
        err = field.field_derivative_check(f, n_samples=16, seed=1)
        assert err < 1e-6


def test_field_derivative_check_catches_wrong_gradient():
    f = field.user_analytic(
        "broken",
        E=lambda t, x: _radial(t, x),
        **{**_const_tail(),
           "grad_x_E": lambda t, x: _bcast(t, x, 2.0 * np.eye(3))},
    )
    err = field.field_derivative_check(f, n_samples=8, seed=0)
    assert err > 0.1


def test_certify_field_outward_radial_on_sphere():
    dom = geometry.unit_sphere()
    f = field.outward_radial(gain=1.0)
    cert = field.certify_field(f, dom)
    # E . n = x . x = 1 on the unit sphere
    assert cert.holds_sign
    assert cert.C_E == pytest.approx(1.0, abs=1e-6)
    assert cert.c2_norm >= 1.0


def test_certify_field_sign_fails_for_inward():
    dom = geometry.unit_sphere()
    f = field.user_analytic(
        "inward",
        E=lambda t, x: _radial(t, x, sign=-1.0),
        **{**_const_tail(),
           "grad_x_E": lambda t, x: _bcast(t, x, -np.eye(3))},
    )
    cert = field.certify_field(f, dom)
    assert not cert.holds_sign
    assert cert.C_E < 0


def test_certify_field_rejects_inconsistent_derivatives():
    f = field.user_analytic(
        "broken",
        E=lambda t, x: np.asarray(t, float)[..., None] * np.asarray(x, float),
        **_const_tail(),  # dE_dt = 0 is wrong for E = t x
    )
    dom = geometry.unit_sphere()
    with pytest.raises(MalformedField):
        field.certify_field(f, dom)


def test_registry_preset():
    make = field.FIELD_REGISTRY["radial-plus-uniform"]
    f = make(gain=1.0, e=[0.0, 0.0, -0.5])
    x = np.array([0.0, 0.0, 1.0])
    assert np.allclose(f.E(0.0, x), [0.0, 0.0, 0.5])
