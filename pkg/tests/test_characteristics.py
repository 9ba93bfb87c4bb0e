"""Characteristic integration against closed-form trajectories."""

import numpy as np
import pytest

from rvmret.characteristics import (advect_batch, backward_to_zero,
                                    flow_jacobian, integrate_characteristic,
                                    max_momentum_estimate)
from rvmret.core import InitialData, p_hat
from rvmret.errors import ConfigError
from rvmret.fields import CallableField, ZeroField

from conftest import free_streaming_batch, smoke_init


def constant_field(E0, B0=(0.0, 0.0, 0.0)):
    E0 = np.asarray(E0, dtype=float)
    B0 = np.asarray(B0, dtype=float)

    def fn(t, X):
        return (np.tile(E0, (X.shape[0], 1)), np.tile(B0, (X.shape[0], 1)))

    return CallableField(fn)


def wavy_field(eps=0.3):
    # smooth, bounded, genuinely (x, t)-dependent; the Vlasov force field
    # is divergence free in p for any such pair
    def fn(t, X):
        E = eps * np.stack([np.sin(X[:, 2] + 0.3 * t),
                            0.4 * np.cos(X[:, 0]),
                            0.2 * np.sin(X[:, 1] - t)], axis=1)
        B = eps * np.stack([0.3 * np.cos(X[:, 1]),
                            0.2 * np.sin(X[:, 2] + t),
                            0.5 * np.cos(X[:, 0] - 0.2 * t)], axis=1)
        return E, B

    return CallableField(fn)


def test_free_streaming_is_exact():
    X = np.array([[0.1, -0.4, 0.2], [1.0, 0.0, -0.3]])
    P = np.array([[0.5, 0.2, -0.1], [-0.4, 0.8, 0.3]])
    Xt, Pt = advect_batch(0.0, 2.7, X, P, ZeroField(), step=0.1)
    np.testing.assert_allclose(Xt, X + 2.7 * p_hat(P), rtol=0, atol=1e-13)
    np.testing.assert_array_equal(Pt, P)


def test_constant_field_momentum_exact_position_closed_form():
    # dP/ds = E0 is linear, so RK4 tracks the momentum exactly; the
    # position picks up the integrated velocity sqrt(1+P^2)'/E0
    E0, p0, t = 0.7, 0.4, 1.9
    X = np.zeros((1, 3))
    P = np.array([[0.0, 0.0, p0]])
    Xt, Pt = advect_batch(0.0, t, X, P, constant_field((0.0, 0.0, E0)),
                          step=0.01)
    assert Pt[0, 2] == pytest.approx(p0 + E0 * t, abs=1e-12)
    z_exact = (np.sqrt(1.0 + (p0 + E0 * t) ** 2)
               - np.sqrt(1.0 + p0 ** 2)) / E0
    assert Xt[0, 2] == pytest.approx(z_exact, abs=1e-9)
    assert np.all(Xt[0, :2] == 0.0) and np.all(Pt[0, :2] == 0.0)


def test_flow_group_property():
    f = wavy_field()
    X = np.array([[0.2, 0.1, -0.3]])
    P = np.array([[0.3, -0.5, 0.2]])
    X1, P1 = advect_batch(0.0, 0.8, X, P, f, step=0.005)
    X2, P2 = advect_batch(0.8, 2.0, X1, P1, f, step=0.005)
    Xd, Pd = advect_batch(0.0, 2.0, X, P, f, step=0.005)
    np.testing.assert_allclose(X2, Xd, atol=1e-9)
    np.testing.assert_allclose(P2, Pd, atol=1e-9)


def test_forward_backward_round_trip():
    f = wavy_field()
    rng = np.random.default_rng(3)
    X = rng.uniform(-0.5, 0.5, (8, 3))
    P = rng.uniform(-0.6, 0.6, (8, 3))
    Xt, Pt = advect_batch(0.0, 1.6, X, P, f, step=0.01)
    Xb, Pb = advect_batch(1.6, 0.0, Xt, Pt, f, step=0.01)
    np.testing.assert_allclose(Xb, X, atol=1e-10)
    np.testing.assert_allclose(Pb, P, atol=1e-10)


def test_integrate_characteristic_error_estimate():
    res = integrate_characteristic(1.4, [0.1, 0.0, 0.2], [0.3, -0.2, 0.1],
                                   wavy_field())
    assert res.n_steps > 0
    assert res.est_error < 1e-10
    assert not res.flagged
    still = integrate_characteristic(0.5, [1.0, 0.0, 0.0], [0.1, 0.0, 0.0],
                                     wavy_field(), t_to=0.5)
    assert still.n_steps == 0 and still.est_error == 0.0


def test_backward_to_zero_inverts_forward():
    f = wavy_field()
    x0 = np.array([0.15, -0.2, 0.05])
    p0 = np.array([0.2, 0.4, -0.3])
    Xt, Pt = advect_batch(0.0, 1.2, x0[None, :], p0[None, :], f, step=0.005)
    pt = backward_to_zero(1.2, Xt[0], Pt[0], f)
    np.testing.assert_allclose(pt.x, x0, atol=1e-9)
    np.testing.assert_allclose(pt.p, p0, atol=1e-9)


def test_flow_jacobian_is_one():
    # Liouville holds for any C^1 field; central differences plus RK4
    # keep the determinant within 1e-3 of 1
    f = wavy_field()
    rng = np.random.default_rng(11)
    for _ in range(5):
        x = rng.uniform(-0.4, 0.4, 3)
        p = rng.uniform(-0.5, 0.5, 3)
        J = flow_jacobian(1.5, x, p, f)
        assert J == pytest.approx(1.0, abs=1e-3)
    assert flow_jacobian(2.0, np.zeros(3), np.array([0.1, 0.0, 0.0]),
                         ZeroField()) == pytest.approx(1.0, abs=1e-9)


def test_max_momentum_estimate_lattice():
    init = smoke_init()
    f_eval = free_streaming_batch(init)
    pm = max_momentum_estimate(0.0, f_eval, x_bound=1.2, p_bound=2.0,
                               n_per_axis=9)
    assert 0.0 < pm <= init.p_max + 1e-9
    assert max_momentum_estimate(0.0, f_eval, 1.2, 2.0, n_per_axis=9,
                                 threshold=1e9) == 0.0
    with pytest.raises(ConfigError):
        max_momentum_estimate(0.0, f_eval, 1.0, 1.0, n_per_axis=1)
