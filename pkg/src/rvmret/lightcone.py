"""Light-cone integrals, their shell reduction, and decay-bound checks.

Radially structured retarded integrands reduce from three dimensions to
two: for g = g(time, radius) and 0 <= a < b,

  int_{a<=|x-y|<=b} |x-y|^(-n) g(t-|x-y|, |y|) dy
    = (2 pi / |x|) int_{t-b}^{t-a} dtau (t-tau)^(1-n)
        int_{| |x|-t+tau |}^{|x|+t-tau} lam g(tau, lam) dlam,

with the direct radial formula 4 pi int r^(2-n) g(t-r, r) dr at x = 0.

The weight families studied here use g = (1 + |tau| + lam)^(-q), whose
inner integral is elementary; the outer integral is done adaptively with
breakpoints at the integrand kinks.  Three bound families are checked:

  I_n^q  (n = 1: q > 3, n = 2: q > 2)  <=  C (1+t+|x|)^(-1) (1+|t-|x||)^(3-n-q... )

measured against the closed shapes below by sampled sup ratios.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import NonConvergent, SingularAtOrigin

_EPS = 1e-11


def _inner_power(tau: float, A: float, B: float, q: float) -> float:
    """int_A^B lam (c + lam)^(-q) dlam with c = 1 + |tau|, closed form."""
    c = 1.0 + abs(tau)
    uA, uB = c + A, c + B

    def F(u):
        return u ** (2.0 - q) / (2.0 - q) - c * u ** (1.0 - q) / (1.0 - q)

    return F(uB) - F(uA)


def _outer_segments(t: float, x_norm: float, lo: float, hi: float):
    """Split [lo, hi] at the integrand kinks tau = 0 and tau = t - |x|."""
    pts = sorted({lo, hi} | {b for b in (0.0, t - x_norm) if lo < b < hi})
    return list(zip(pts[:-1], pts[1:]))


def eval_I(n: int, q: float, t: float, x_norm: float,
           rel_tol: float = 1e-9) -> float:
    """I_n^q(t, x) = int dy |x-y|^(-n) (1 + |t - |x-y|| + |y|)^(-q), full space."""
    if n not in (1, 2):
        raise NonConvergent(f"eval_I supports n in (1, 2), got {n}")
    if q <= 4.0 - n:
        raise NonConvergent(f"I_{n}^q diverges for q <= {4 - n}")
    x_norm = abs(float(x_norm))
    if x_norm < 1e-10:
        def rad(r):
            return r ** (2.0 - n) * (1.0 + abs(t - r) + r) ** (-q)

        pts = [t] if t > 0 else None
        v1, _ = integrate.quad(rad, 0.0, max(4.0 * abs(t) + 20.0, 40.0),
                               points=pts, epsrel=rel_tol, epsabs=0.0, limit=400)
        v2, _ = integrate.quad(rad, max(4.0 * abs(t) + 20.0, 40.0), np.inf,
                               epsrel=rel_tol, epsabs=1e-14, limit=400)
        return 4.0 * np.pi * (v1 + v2)

    def outer(tau):
        r = t - tau
        if r < 1e-13:
            return 0.0
        A = abs(x_norm - r)
        B = x_norm + r
        if n == 2 and r < 1e-7 * max(1.0, x_norm):
            # limit of inner/(t - tau) as tau -> t
            return 2.0 * x_norm * (1.0 + abs(tau) + x_norm) ** (-q)
        return r ** (1.0 - n) * _inner_power(tau, A, B, q)

    total = 0.0
    t_far = t - max(8.0 * (abs(t) + x_norm) + 40.0, 80.0)
    for lo, hi in _outer_segments(t, x_norm, t_far, t):
        v, _ = integrate.quad(outer, lo, hi, epsrel=rel_tol, epsabs=0.0, limit=400)
        total += v
    v_tail, _ = integrate.quad(outer, -np.inf, t_far, epsrel=rel_tol,
                               epsabs=1e-14, limit=400)
    return 2.0 * np.pi / x_norm * (total + v_tail)


def eval_II(q: float, t: float, x_norm: float, rel_tol: float = 1e-9) -> float:
    """int_{|x-y|>1} dy |x-y|^(-3) (1 + |t - |x-y|| + |y|)^(-q)."""
    if q <= 2.0:
        raise NonConvergent("eval_II requires q > 2")
    x_norm = abs(float(x_norm))
    if x_norm < 1e-10:
        def rad(r):
            return (1.0 + abs(t - r) + r) ** (-q) / r

        pts = [t] if t > 1.0 else None
        hi = max(4.0 * abs(t) + 20.0, 40.0)
        v1, _ = integrate.quad(rad, 1.0, hi, points=pts, epsrel=rel_tol,
                               epsabs=0.0, limit=400)
        v2, _ = integrate.quad(rad, hi, np.inf, epsrel=rel_tol,
                               epsabs=1e-14, limit=400)
        return 4.0 * np.pi * (v1 + v2)

    def outer(tau):
        r = t - tau
        A = abs(x_norm - r)
        B = x_norm + r
        return r ** (-2.0) * _inner_power(tau, A, B, q)

    total = 0.0
    t_far = t - max(8.0 * (abs(t) + x_norm) + 40.0, 80.0)
    for lo, hi in _outer_segments(t, x_norm, t_far, t - 1.0):
        v, _ = integrate.quad(outer, lo, hi, epsrel=rel_tol, epsabs=0.0, limit=400)
        total += v
    v_tail, _ = integrate.quad(outer, -np.inf, t_far, epsrel=rel_tol,
                               epsabs=1e-14, limit=400)
    return 2.0 * np.pi / x_norm * (total + v_tail)


def lemma_a_reduce(t: float, x_norm: float, n: float, a: float, b: float,
                   g: Callable[[float, float], float], rel_tol: float = 1e-9,
                   radial_fallback: bool = True) -> float:
    """Shell reduction of a radially structured retarded integral.

    g(tau, lam) is the integrand profile in retarded time and radius;
    the shell is a <= |x - y| <= b.  At x = 0 the direct radial formula
    is used when radial_fallback is on, otherwise SingularAtOrigin.
    """
    if not 0.0 <= a < b:
        raise NonConvergent(f"invalid shell [{a}, {b}]")
    x_norm = abs(float(x_norm))
    if x_norm < 1e-10:
        if not radial_fallback:
            raise SingularAtOrigin("reduction formula needs |x| > 0")

        def rad(r):
            return r ** (2.0 - n) * g(t - r, r)

        v, _ = integrate.quad(rad, a, b, epsrel=rel_tol, epsabs=1e-14, limit=400)
        return 4.0 * np.pi * v

    def outer(tau):
        r = t - tau
        if r <= 0.0:
            return 0.0
        lo = abs(x_norm - r)
        hi = x_norm + r
        v, _ = integrate.quad(lambda lam: lam * g(tau, lam), lo, hi,
                              epsrel=rel_tol, epsabs=1e-14, limit=200)
        return r ** (1.0 - n) * v

    total = 0.0
    for lo, hi in _outer_segments(t, x_norm, t - b, t - a):
        v, _ = integrate.quad(outer, lo, hi, epsrel=rel_tol, epsabs=1e-14,
                              limit=200)
        total += v
    return 2.0 * np.pi / x_norm * total


def direct_cone_integral(t: float, x_norm: float, n: float, a: float, b: float,
                         g: Callable[[float, float], float],
                         rel_tol: float = 1e-9) -> float:
    """Independent 3-D oracle for the shell integral: nested adaptive
    quadrature in (r, cos theta) around the probe point."""
    x_norm = abs(float(x_norm))

    def shell(r):
        if x_norm < 1e-10:
            return 2.0 * r ** (2.0 - n) * g(t - r, r)

        def ang(mu):
            lam = np.sqrt(max(x_norm**2 + r**2 + 2.0 * r * x_norm * mu, 0.0))
            return g(t - r, lam)

        v, _ = integrate.quad(ang, -1.0, 1.0, epsrel=rel_tol, epsabs=1e-14,
                              limit=200)
        return r ** (2.0 - n) * v

    v, _ = integrate.quad(shell, a, b, epsrel=rel_tol, epsabs=1e-14, limit=200)
    return 2.0 * np.pi * v


# ---------------------------------------------------------------------------
# decay-bound families
# ---------------------------------------------------------------------------

_FAMILIES = {
    "I1": {"min_q": 3.0, "tail": lambda q: q - 3.0},
    "I2": {"min_q": 2.0, "tail": lambda q: q - 2.0},
    "II": {"min_q": 2.0, "tail": lambda q: q - 1.25},
}


def bound_shape(family: str, q: float, t, x_norm):
    """Closed decay shape (1+|t|+|x|)^(-1) (1+|t-|x||)^(-tail)."""
    tail = _FAMILIES[family]["tail"](q)
    t = np.asarray(t, dtype=float)
    x_norm = np.asarray(x_norm, dtype=float)
    return (1.0 + np.abs(t) + x_norm) ** (-1.0) * (1.0 + np.abs(np.abs(t) - x_norm)) ** (-tail)


def _eval_family(family: str, q: float, t: float, x_norm: float) -> float:
    if family == "I1":
        return eval_I(1, q, t, x_norm)
    if family == "I2":
        return eval_I(2, q, t, x_norm)
    if family == "II":
        return eval_II(q, t, x_norm)
    raise NonConvergent(f"unknown family {family!r}")


@dataclass
class BoundReport:
    family: str
    q: float
    n_samples: int
    sup_ratio: float
    sup_ratio_subsample: float
    stable: bool
    rows: np.ndarray = field(repr=False)   # columns: t, |x|, integral, ratio

    @property
    def passed(self) -> bool:
        return self.stable and np.isfinite(self.sup_ratio)


def check_bounds(family: str, q: float, n_samples: int = 200, seed: int = 0,
                 t_range: float = 20.0, x_range: float = 20.0,
                 subsample: int = 100) -> BoundReport:
    """Sampled sup of integral/bound over |t| <= t_range, |x| <= x_range.

    Stability means the full-sample sup is within a factor 2 of the sup
    over a random subsample, i.e. the constant has saturated.
    """
    info = _FAMILIES.get(family)
    if info is None:
        raise NonConvergent(f"unknown family {family!r}")
    if q <= info["min_q"]:
        raise NonConvergent(f"family {family} needs q > {info['min_q']}")
    rng = np.random.default_rng(seed)
    ts = rng.uniform(-t_range, t_range, n_samples)
    xs = rng.uniform(0.0, x_range, n_samples)
    rows = np.empty((n_samples, 4))
    for i, (t, xn) in enumerate(zip(ts, xs)):
        val = _eval_family(family, q, float(t), float(xn))
        ratio = val / float(bound_shape(family, q, t, xn))
        rows[i] = (t, xn, val, ratio)
    sup = float(np.max(rows[:, 3]))
    idx = rng.choice(n_samples, size=min(subsample, n_samples), replace=False)
    sup_sub = float(np.max(rows[idx, 3]))
    return BoundReport(family=family, q=q, n_samples=n_samples,
                       sup_ratio=sup, sup_ratio_subsample=sup_sub,
                       stable=sup <= 2.0 * sup_sub, rows=rows)


@dataclass
class TrickReport:
    c_star: float
    sup_ratio: float
    n_accepted: int

    @property
    def passed(self) -> bool:
        return self.sup_ratio <= self.c_star


def check_trick_inequality(R: float, beta: float, t: float, x,
                           n_samples: int = 4000, seed: int = 0) -> TrickReport:
    """On the cone region |y| <= R + a(beta)|t - |x-y||, verify

        1 + |t - |x-y|| + |y|  <=  C* (1 + |t - |x-y| - |y||)

    with C* = 2 (1 + 2R) / (1 - a(beta)).
    """
    a = beta / np.sqrt(1.0 + beta * beta)
    c_star = 2.0 * (1.0 + 2.0 * R) / (1.0 - a)
    x = np.asarray(x, dtype=float)
    xn = float(np.linalg.norm(x))
    r_max = (R + xn + a * abs(t)) / (1.0 - a) + R
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.0, r_max, n_samples)
    u = rng.normal(size=(n_samples, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    y = x[None, :] + r[:, None] * u
    yn = np.linalg.norm(y, axis=1)
    tau = t - r
    inside = yn <= R + a * np.abs(tau)
    ratio = (1.0 + np.abs(tau) + yn) / (1.0 + np.abs(tau - yn))
    ratio = ratio[inside]
    sup = float(np.max(ratio)) if ratio.size else 0.0
    return TrickReport(c_star=float(c_star), sup_ratio=sup,
                       n_accepted=int(np.sum(inside)))
