"""Cone-integral reductions against closed forms and a 3-D oracle."""

import numpy as np
import pytest

from rvmret.errors import NonConvergent, SingularAtOrigin
from rvmret.lightcone import (bound_shape, check_bounds,
                              check_trick_inequality, direct_cone_integral,
                              eval_I, eval_II, lemma_a_reduce)


# --- closed-form shells -------------------------------------------------------

def test_constant_shell_closed_forms():
    # int over 1 <= |x-y| <= 2 of |x-y|^(-n) dy: 4 pi (b^2-a^2)/2 resp.
    # 4 pi (b-a); translation invariant, so (t, x) must drop out
    for t, xn in [(0.0, 0.0), (5.0, 1.3), (-2.0, 4.0)]:
        v1 = lemma_a_reduce(t, xn, 1, 1.0, 2.0, lambda tau, lam: 1.0)
        v2 = lemma_a_reduce(t, xn, 2, 1.0, 2.0, lambda tau, lam: 1.0)
        assert v1 == pytest.approx(6.0 * np.pi, rel=1e-9)
        assert v2 == pytest.approx(4.0 * np.pi, rel=1e-9)


def test_radius_weighted_shell_closed_form():
    # g = |y| with |x| = 3 > shell outer radius: the angular mean of
    # |x + z| is |x| + r^2 / (3 |x|), giving 4 pi (9/2 + 5/12) = 59 pi / 3
    v = lemma_a_reduce(2.0, 3.0, 1, 1.0, 2.0, lambda tau, lam: lam)
    assert v == pytest.approx(59.0 * np.pi / 3.0, rel=1e-9)


def test_retarded_time_weighting():
    # g = exp(-tau) factors through the cone: e^(-t) 4 pi (e^2 - e)
    t = 0.7
    v = lemma_a_reduce(t, 1.1, 2, 1.0, 2.0, lambda tau, lam: np.exp(-tau))
    assert v == pytest.approx(4.0 * np.pi * np.exp(-t) * (np.e ** 2 - np.e),
                              rel=1e-9)


def test_reduce_matches_direct_oracle():
    rng = np.random.default_rng(7)
    for _ in range(3):
        c0 = rng.uniform(0.5, 2.0)
        k = rng.uniform(0.5, 3.0)
        w = rng.uniform(1.0, 4.0)

        def g(tau, lam, c0=c0, k=k, w=w):
            return np.exp(-(lam / w) ** 2) * (c0 + 0.5 * np.sin(k * tau))

        t = rng.uniform(-3.0, 6.0)
        xn = rng.uniform(0.2, 4.0)
        a, b = sorted(rng.uniform(0.3, 5.0, 2))
        ref = direct_cone_integral(t, xn, 1, a, b + 0.5, g)
        val = lemma_a_reduce(t, xn, 1, a, b + 0.5, g)
        assert val == pytest.approx(ref, rel=1e-7)


def test_origin_fallback_and_opt_out():
    v = lemma_a_reduce(1.0, 0.0, 2, 1.0, 2.0, lambda tau, lam: 1.0)
    assert v == pytest.approx(4.0 * np.pi, rel=1e-9)
    with pytest.raises(SingularAtOrigin):
        lemma_a_reduce(1.0, 0.0, 2, 1.0, 2.0, lambda tau, lam: 1.0,
                       radial_fallback=False)
    with pytest.raises(NonConvergent):
        lemma_a_reduce(1.0, 1.0, 1, 2.0, 1.0, lambda tau, lam: 1.0)


# --- weighted full-space integrals --------------------------------------------

def test_eval_I_closed_forms_at_origin():
    # t = 0 collapses the weight to (1 + 2r): I_1^5 = pi/12, I_2^3 = pi
    assert eval_I(1, 5.0, 0.0, 0.0) == pytest.approx(np.pi / 12.0, rel=1e-8)
    assert eval_I(2, 3.0, 0.0, 0.0) == pytest.approx(np.pi, rel=1e-8)


def test_eval_II_closed_form_at_origin():
    # partial fractions of 1/(r (1+2r)^3) over r >= 1
    ref = 4.0 * np.pi * (np.log(1.5) - 7.0 / 18.0)
    assert eval_II(3.0, 0.0, 0.0) == pytest.approx(ref, rel=1e-8)


def test_eval_validation():
    with pytest.raises(NonConvergent):
        eval_I(3, 5.0, 0.0, 1.0)
    with pytest.raises(NonConvergent):
        eval_I(1, 3.0, 0.0, 1.0)      # q <= 4 - n diverges
    with pytest.raises(NonConvergent):
        eval_II(2.0, 0.0, 1.0)


def test_eval_I_origin_limit_continuous():
    # the 2 pi / |x| reduction must match the radial fallback as x -> 0
    near = eval_I(1, 4.0, 1.5, 1e-3)
    at0 = eval_I(1, 4.0, 1.5, 0.0)
    assert near == pytest.approx(at0, rel=1e-4)


# --- sampled decay bounds -----------------------------------------------------

def test_check_bounds_scaled_sample():
    rep = check_bounds("I1", 4.0, n_samples=40, subsample=20, seed=5)
    assert rep.passed
    assert np.isfinite(rep.sup_ratio)
    assert rep.sup_ratio >= rep.sup_ratio_subsample
    assert rep.rows.shape == (40, 4)


def test_check_bounds_rejects_bad_family():
    with pytest.raises(NonConvergent):
        check_bounds("I3", 4.0)
    with pytest.raises(NonConvergent):
        check_bounds("I1", 3.0)       # needs q > 3
    with pytest.raises(NonConvergent):
        check_bounds("II", 2.0)


def test_bound_shape_values():
    # on the cone t = |x| the second weight is 1
    assert bound_shape("I1", 4.0, 7.0, 7.0) == pytest.approx(1.0 / 15.0)
    tail = 3.0 - 1.25
    assert bound_shape("II", 3.0, 0.0, 4.0) == pytest.approx(
        (1.0 / 5.0) * 5.0 ** (-tail))


def test_trick_inequality_holds():
    # the sampling ball is much larger than the cone slab, so only a few
    # percent of draws land inside it
    for t, x in [(3.0, (2.0, 0.0, 0.0)), (-5.0, (0.0, 0.5, 0.2))]:
        rep = check_trick_inequality(R=1.0, beta=2.0, t=t, x=x,
                                     n_samples=8000, seed=2)
        assert rep.n_accepted > 100
        assert rep.passed
        assert rep.sup_ratio <= rep.c_star
