"""Characteristic trajectories of the Vlasov flow.

dX/ds = p_hat(P),  dP/ds = E(s, X) + p_hat(P) x B(s, X).

Everything integrates with classical RK4 at fixed step; the batched entry
points move whole arrays of states through the same step sequence, which
is the only way table building stays affordable.  The phase-space flow is
volume preserving for any C^1 field because div_p (E + p_hat x B) = 0 and
p_hat does not depend on x; flow_jacobian verifies that numerically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .core import PhasePoint, p_hat
from .errors import ConfigError


def force(fieldfn, s, X, P) -> np.ndarray:
    """Lorentz force E + p_hat x B for batched states."""
    E, B = fieldfn.eval(s, X)
    return E + np.cross(p_hat(P), B)


def advect_batch(t_from: float, t_to: float, X, P, fieldfn,
                 step: float) -> Tuple[np.ndarray, np.ndarray]:
    """Move states from time t_from to t_to with fixed-step RK4.

    X, P have shape (m, 3).  The step count is ceil(|span| / step) so the
    grid divides the span exactly; the sign of the step follows the span.
    """
    X = np.array(X, dtype=float, copy=True)
    P = np.array(P, dtype=float, copy=True)
    span = float(t_to) - float(t_from)
    if span == 0.0 or X.size == 0:
        return X, P
    n = max(1, int(np.ceil(abs(span) / step)))
    h = span / n
    s = float(t_from)
    for _ in range(n):
        k1x = p_hat(P)
        k1p = force(fieldfn, s, X, P)
        X2, P2 = X + 0.5 * h * k1x, P + 0.5 * h * k1p
        k2x = p_hat(P2)
        k2p = force(fieldfn, s + 0.5 * h, X2, P2)
        X3, P3 = X + 0.5 * h * k2x, P + 0.5 * h * k2p
        k3x = p_hat(P3)
        k3p = force(fieldfn, s + 0.5 * h, X3, P3)
        X4, P4 = X + h * k3x, P + h * k3p
        k4x = p_hat(P4)
        k4p = force(fieldfn, s + h, X4, P4)
        X += (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        P += (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        s += h
    return X, P


@dataclass
class CharResult:
    """End state of one characteristic with a Richardson error estimate."""

    x: np.ndarray
    p: np.ndarray
    t_from: float
    t_to: float
    n_steps: int
    est_error: float
    tol: float

    @property
    def flagged(self) -> bool:
        return self.est_error > self.tol


def integrate_characteristic(t_from: float, x, p, fieldfn, t_to: float = 0.0,
                             step: Optional[float] = None,
                             tol: float = 1e-8) -> CharResult:
    """Integrate one characteristic and estimate its error.

    The default step is min(0.02, span/400).  The error estimate compares
    the run against one with half the step (Richardson, order 4); the
    returned state is the finer of the two.
    """
    x = np.asarray(x, dtype=float)[None, :]
    p = np.asarray(p, dtype=float)[None, :]
    span = abs(float(t_to) - float(t_from))
    if span == 0.0:
        return CharResult(x[0].copy(), p[0].copy(), t_from, t_to, 0, 0.0, tol)
    if step is None:
        step = min(0.02, span / 400.0)
    Xc, Pc = advect_batch(t_from, t_to, x, p, fieldfn, step)
    Xf, Pf = advect_batch(t_from, t_to, x, p, fieldfn, step / 2.0)
    err = max(float(np.max(np.abs(Xf - Xc))), float(np.max(np.abs(Pf - Pc)))) / 15.0
    n = 2 * max(1, int(np.ceil(span / step)))
    return CharResult(Xf[0], Pf[0], float(t_from), float(t_to), n, err, tol)


def backward_to_zero(t: float, x, p, fieldfn,
                     step: Optional[float] = None) -> PhasePoint:
    """Phase point at time 0 on the characteristic through (t, x, p)."""
    res = integrate_characteristic(t, x, p, fieldfn, t_to=0.0, step=step)
    return PhasePoint(res.x, res.p)


def flow_jacobian(t: float, x, p, fieldfn, fd_step: float = 1e-4,
                  step: Optional[float] = None) -> float:
    """det d(X(0), P(0)) / d(x, p) by central differences, batched.

    Liouville: the exact value is 1 for any C^1 field.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if step is None:
        step = min(0.02, max(abs(t), 1e-12) / 400.0)
    states = np.tile(np.concatenate([x, p]), (12, 1))
    for k in range(6):
        states[2 * k, k] += fd_step
        states[2 * k + 1, k] -= fd_step
    X0, P0 = advect_batch(t, 0.0, states[:, :3], states[:, 3:], fieldfn, step)
    Z = np.concatenate([X0, P0], axis=1)
    J = np.empty((6, 6))
    for k in range(6):
        J[:, k] = (Z[2 * k] - Z[2 * k + 1]) / (2.0 * fd_step)
    return float(np.linalg.det(J))


def max_momentum_estimate(t: float, f_eval: Callable, x_bound: float,
                          p_bound: float, n_per_axis: int = 7,
                          threshold: float = 0.0) -> float:
    """Max |p| over a deterministic lattice where the density exceeds
    threshold; 0 if the density is nowhere above it.

    f_eval(t, X, P) must broadcast over (m, 3) arrays.
    """
    if n_per_axis < 2:
        raise ConfigError("max_momentum_estimate: lattice too small")
    ax_x = np.linspace(-x_bound, x_bound, n_per_axis)
    ax_p = np.linspace(-p_bound, p_bound, n_per_axis)
    gx = np.stack(np.meshgrid(ax_x, ax_x, ax_x, indexing="ij"), axis=-1).reshape(-1, 3)
    gp = np.stack(np.meshgrid(ax_p, ax_p, ax_p, indexing="ij"), axis=-1).reshape(-1, 3)
    gx = gx[np.linalg.norm(gx, axis=1) <= x_bound + 1e-12]
    gp = gp[np.linalg.norm(gp, axis=1) <= p_bound + 1e-12]
    X = np.repeat(gx, gp.shape[0], axis=0)
    P = np.tile(gp, (gx.shape[0], 1))
    f = np.asarray(f_eval(t, X, P), dtype=float)
    hot = f > threshold
    if not np.any(hot):
        return 0.0
    return float(np.max(np.linalg.norm(P[hot], axis=1)))
