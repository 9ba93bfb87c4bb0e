"""Kinematics, initial data and momentum-moment quadrature."""

import numpy as np
import pytest
from scipy import integrate

from rvmret.core import (InitialData, a_of_beta, gamma_of_p, p_hat,
                         sources)
from rvmret.errors import ConfigError, QuadratureDomainViolation
from rvmret.quad import QuadratureSpec


def test_kinematics_basics():
    p = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]])
    assert np.allclose(gamma_of_p(p), [1.0, np.sqrt(26.0)])
    v = p_hat(p)
    assert np.allclose(v[0], 0.0)
    assert np.allclose(v[1], np.array([3.0, 0.0, 4.0]) / np.sqrt(26.0))
    # strictly subluminal for any finite momentum
    rng = np.random.default_rng(0)
    big = rng.normal(size=(100, 3)) * 50.0
    assert np.all(np.linalg.norm(p_hat(big), axis=1) < 1.0)


def test_a_of_beta_values():
    assert a_of_beta(0.0) == 0.0
    assert np.isclose(a_of_beta(1.0), 1.0 / np.sqrt(2.0))
    assert np.isclose(a_of_beta(2.0), 2.0 / np.sqrt(5.0))
    # monotone and bounded by light speed
    betas = np.linspace(0.0, 50.0, 200)
    vals = np.array([a_of_beta(b) for b in betas])
    assert np.all(np.diff(vals) > 0.0)
    assert vals[-1] < 1.0


def test_initial_data_validation():
    with pytest.raises(ConfigError):
        InitialData(profile="no-such-profile")
    with pytest.raises(ConfigError):
        InitialData(profile="cubic-bump", drift=(0.1, 0.0, 0.0))
    with pytest.raises(ConfigError):
        InitialData(core_radius=0.0)
    with pytest.raises(ConfigError):
        InitialData(amplitude=-1.0)


def test_initial_data_support_and_radii():
    init = InitialData(amplitude=2.0, profile="cubic-bump-drift",
                       core_radius=0.5, drift=(0.0, 0.0, 0.25))
    assert np.isclose(init.R, 0.75)
    assert np.isclose(init.p_max, 0.75)
    # vanishes outside the declared outer radius
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3))
    p = rng.normal(size=(200, 3))
    vals = init.value(x, p)
    outside = np.sum(x ** 2, axis=1) + np.sum(p ** 2, axis=1) >= init.R ** 2
    assert np.all(vals[outside] == 0.0)
    assert np.all(vals >= 0.0)
    # peak value at the phase-space center
    assert np.isclose(init.value(np.zeros((1, 3)),
                                 np.array([[0.0, 0.0, 0.25]]))[0], 2.0)


def test_initial_density_radial_oracle():
    """Momentum quadrature of the default profile at the origin against
    independent 1-D radial quadrature."""
    init = InitialData(amplitude=1.0)

    def f_eval(t, x, p):
        return init.value(np.tile(np.asarray(x, float), (len(p), 1)), p)

    got = sources(0.0, np.zeros(3), f_eval, QuadratureSpec(p_nodes=24), 1.0)
    ref, _ = integrate.quad(lambda r: (1.0 - r * r) ** 3 * r * r, 0.0, 1.0,
                            epsabs=1e-14, epsrel=1e-12)
    ref *= 4.0 * np.pi
    assert np.isclose(ref, 64.0 * np.pi / 315.0, rtol=1e-10)
    # tensor rule sees the support sphere as an interior C^2 kink, so
    # convergence is algebraic; 24 nodes sit well under 1e-5
    assert abs(got.rho - ref) <= 1e-5 * ref
    assert np.allclose(got.j, 0.0, atol=1e-12)


def test_sources_boundary_violation():
    init = InitialData(amplitude=1.0)

    def f_eval(t, x, p):
        return init.value(np.tile(np.asarray(x, float), (len(p), 1)), p)

    # box smaller than the momentum support clips real mass
    with pytest.raises(QuadratureDomainViolation):
        sources(0.0, np.zeros(3), f_eval, QuadratureSpec(p_nodes=8), 0.6)


def test_gradients_match_finite_differences():
    init = InitialData(amplitude=1.3, profile="cubic-bump-drift",
                       core_radius=0.8, drift=(0.1, -0.2, 0.3))
    rng = np.random.default_rng(2)
    x = rng.uniform(-0.4, 0.4, (40, 3))
    p = init.p_center + rng.uniform(-0.4, 0.4, (40, 3))
    gx, gp = init.gradients(x, p)
    eps = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        fd_x = (init.value(x + e, p) - init.value(x - e, p)) / (2 * eps)
        fd_p = (init.value(x, p + e) - init.value(x, p - e)) / (2 * eps)
        assert np.allclose(gx[:, k], fd_x, atol=1e-6)
        assert np.allclose(gp[:, k], fd_p, atol=1e-6)


def test_delta_estimate_scales_with_amplitude():
    a = InitialData(amplitude=0.5, core_radius=1.0).delta_estimate()
    b = InitialData(amplitude=1.0, core_radius=1.0).delta_estimate()
    assert np.isclose(b, 2.0 * a, rtol=1e-12)
    assert b > 0.0
