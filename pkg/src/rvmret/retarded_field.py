"""Retarded field evaluation at probe points.

Two independent routes compute the same field from a phase-space density:

* ``field_raw``: the retarded integrals of source derivatives,
  E = -int dy/|x-y| (grad_y rho + d_t j)(t - |x-y|, y),
  B = +int dy/|x-y| (curl_y j)(t - |x-y|, y),
  with the source derivatives taken by central differences in momentum-
  integrated sources.  Slow but assumption-free; this is the oracle.

* ``field_repr``: the representation with bounded kernels obtained by
  rewriting retarded derivatives along the cone and integrating by parts,

  E = -int dy/|x-y|^2 int dp a1_E f  -  int dy/|x-y| int dp (a2_E K) f,
  B = +int dy/|x-y|^2 int dp a1_B f  +  int dy/|x-y| int dp (a2_B K) f,

  where, with w the unit vector from the probe toward y, v = p_hat(p),
  d = 1 + w.v and gamma^2 = 1 + |p|^2:

      b_E  = (w + v)/d            a1_E = (w + v) / (gamma^2 d^2)
      b_B  = (w x v)/d            a1_B = (w x v) / (gamma^2 d^2)
      a2_E = d b_E / dp           a2_B = d b_B / dp

  and K is the Lorentz force of the driving field.  The electric kernels
  follow the classical computation; the magnetic ones come from applying
  the identical perfect-derivative procedure to the curl form, which
  mirrors the electric case under (w + v) -> (w x v) with both signs
  flipped (the curl form enters with the opposite overall sign).
  tests/test_retarded_field.py validates the pair against field_raw
  numerically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import FieldValue, as_vec3, gamma_of_p, p_hat
from .errors import NonUnitDirection
from .quad import ConeRule, QuadratureSpec, cone_rule, tensor_box_rule


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _check_unit(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    nrm = np.linalg.norm(omega, axis=-1)
    if np.any(np.abs(nrm - 1.0) > 1e-9):
        raise NonUnitDirection(f"direction norm deviates from 1 by "
                               f"{float(np.max(np.abs(nrm - 1.0))):.2e}")
    return omega


@dataclass
class Kernels:
    """All six cone kernels at one (direction, momentum) pair."""

    e_b: np.ndarray    # (3,)
    e_a1: np.ndarray   # (3,)
    e_a2: np.ndarray   # (3, 3), [i, k] = d b_E[i] / d p[k]
    b_b: np.ndarray
    b_a1: np.ndarray
    b_a2: np.ndarray


def kernel_eval(omega, p) -> Kernels:
    """Evaluate the cone kernels for one unit direction and momentum."""
    omega = _check_unit(as_vec3(omega))
    p = as_vec3(p)
    v = p_hat(p)
    g = float(gamma_of_p(p))
    d = 1.0 + float(omega @ v)
    wv = omega + v
    wxv = np.cross(omega, v)
    e_b = wv / d
    e_a1 = wv / (g * g * d * d)
    b_b = wxv / d
    b_a1 = wxv / (g * g * d * d)
    # dv_j/dp_k = (delta_jk - v_j v_k)/g
    dv = (np.eye(3) - np.outer(v, v)) / g
    dd = omega @ dv                      # d(d)/dp_k
    e_a2 = dv / d - np.outer(wv, dd) / (d * d)
    omega_cross = np.array([[0.0, -omega[2], omega[1]],
                            [omega[2], 0.0, -omega[0]],
                            [-omega[1], omega[0], 0.0]])
    dwxv = omega_cross @ dv              # d(w x v)_i / dp_k
    b_a2 = dwxv / d - np.outer(wxv, dd) / (d * d)
    return Kernels(e_b=e_b, e_a1=e_a1, e_a2=e_a2,
                   b_b=b_b, b_a1=b_a1, b_a2=b_a2)


def _kernel_a1_batch(omega, p):
    """a1_E and a1_B for row-paired (N, 3) direction and momentum arrays."""
    v = p_hat(p)
    g2 = 1.0 + np.sum(p * p, axis=-1)
    d = 1.0 + np.sum(omega * v, axis=-1)
    denom = (g2 * d * d)[:, None]
    return (omega + v) / denom, np.cross(omega, v) / denom


def _kernel_a2_contract_batch(omega, p, K):
    """(a2_E K)_i and (a2_B K)_i without materializing the 3x3 kernels."""
    v = p_hat(p)
    g = gamma_of_p(p)
    d = 1.0 + np.sum(omega * v, axis=-1)
    vK = np.sum(v * K, axis=-1)
    wK = np.sum(omega * K, axis=-1)
    wv = np.sum(omega * v, axis=-1)
    common = (wK - wv * vK) / (g * d * d)
    e = (K - v * vK[:, None]) / (g * d)[:, None] - (omega + v) * common[:, None]
    b = (np.cross(omega, K) - np.cross(omega, v) * vK[:, None]) / (g * d)[:, None] \
        - np.cross(omega, v) * common[:, None]
    return e, b


# ---------------------------------------------------------------------------
# cone geometry
# ---------------------------------------------------------------------------

@dataclass
class ConeDomain:
    """Retarded cone support region of a probe point."""

    t: float
    x: np.ndarray
    R: float
    a: float
    r_max: float

    def contains(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        r = np.linalg.norm(y - self.x[None, :], axis=1)
        return np.linalg.norm(y, axis=1) <= self.R + self.a * np.abs(self.t - r)


def cone_domain(t: float, x, R: float, a: float) -> ConeDomain:
    """Bounding region {y : |y| <= R + a |t - |x-y||} with 0 <= a < 1."""
    x = as_vec3(x)
    xn = float(np.linalg.norm(x))
    r_max = (R + xn + a * abs(t)) / (1.0 - a) + R
    return ConeDomain(t=float(t), x=x, R=R, a=a, r_max=r_max)


@dataclass
class SupportMeta:
    """What the field evaluators need to know about a density's support.

    pad is the outer safety margin used for pruning and tube bounds; being
    generous there only costs quadrature nodes.  transport_slack bounds how
    far characteristics can bend away from free streaming (momentum drift
    integrates the force, so for weak fields it is tiny); it enters the
    per-node momentum boxes, where slack directly dilutes node density and
    shows up as quadrature error.
    """

    x_radius: float
    p_center: np.ndarray
    p_radius: float
    pad: float = 0.35
    transport_slack: float = 0.05

    @property
    def p_max(self) -> float:
        return float(np.linalg.norm(self.p_center)) + self.p_radius + self.pad

    @property
    def speed(self) -> float:
        b = self.p_max
        return b / np.sqrt(1.0 + b * b)

    def tube_radius(self, s):
        """Spatial support radius of the transported density at time s."""
        return self.x_radius + self.pad + self.speed * np.abs(s)

    @classmethod
    def from_initial(cls, init, pad: float = 0.35) -> "SupportMeta":
        return cls(x_radius=init.x_radius, p_center=np.asarray(init.p_center, float),
                   p_radius=init.p_radius, pad=pad)


def momentum_support_box(s, Y, support: SupportMeta):
    """Per-node momentum boxes guaranteed to contain the density support.

    For the density transported to time s, momenta at position y satisfy
    |p - p_center| <= p_radius + slack and, away from s = 0, the velocity
    constraint |p_hat - y/s| <= (x_radius + slack)/|s| from near-free
    streaming.  Returns (lo, hi, nonempty) with shapes (m,3),(m,3),(m,).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    m = Y.shape[0]
    s = float(s)
    pr = support.p_radius + support.transport_slack
    lo = np.broadcast_to(support.p_center - pr, (m, 3)).copy()
    hi = np.broadcast_to(support.p_center + pr, (m, 3)).copy()
    nonempty = np.linalg.norm(Y, axis=1) <= support.tube_radius(s) + 1e-12
    if abs(s) > 0.25:
        c = Y / s
        rhat = min((support.x_radius + support.transport_slack) / abs(s), 2.0)
        ahat = support.speed
        h_lo = np.maximum(c - rhat, -ahat)
        h_hi = np.minimum(c + rhat, ahat)
        nonempty &= np.linalg.norm(c, axis=1) - rhat <= ahat
        nonempty &= np.all(h_lo < h_hi, axis=1)
        m2 = np.sum(np.maximum(h_lo**2, h_hi**2), axis=1)
        gmax = 1.0 / np.sqrt(np.maximum(1.0 - np.minimum(m2, ahat**2 + 1e-12), 1e-12))
        p_lo = np.where(h_lo < 0, h_lo * gmax[:, None], h_lo)
        p_hi = np.where(h_hi > 0, h_hi * gmax[:, None], h_hi)
        lo = np.maximum(lo, p_lo)
        hi = np.minimum(hi, p_hi)
        nonempty &= np.all(lo < hi, axis=1)
    lo = np.where(nonempty[:, None], lo, 0.0)
    hi = np.where(nonempty[:, None], hi, 1.0)
    return lo, hi, nonempty


# ---------------------------------------------------------------------------
# probe-point evaluators
# ---------------------------------------------------------------------------

def _probe_cone(t: float, x, support: SupportMeta, spec: QuadratureSpec) -> ConeRule:
    x = as_vec3(x)
    xn = float(np.linalg.norm(x))
    a = support.speed
    r_hi = (support.x_radius + support.pad + xn + a * abs(t)) / (1.0 - a) + 0.5

    def feature(s_mid):
        return max(spec.radial_panel_width, 0.1 * support.tube_radius(s_mid))

    return cone_rule(t, x, support.tube_radius, 0.0, r_hi, spec,
                     feature_scale=feature)


def _momentum_boxes(s_rows, Y, support: SupportMeta):
    """Adapted momentum boxes per cone node.

    Returns (lo, hi, keep) with lo/hi already filtered to the kept rows.
    Callers expand the boxes into tensor nodes chunk by chunk; doing it
    here for every node at once is a memory blow-up at fine resolutions.
    """
    m = Y.shape[0]
    lo = np.empty((m, 3))
    hi = np.empty((m, 3))
    keep = np.zeros(m, dtype=bool)
    for s_val in np.unique(s_rows):
        rows = s_rows == s_val
        lo_r, hi_r, ok = momentum_support_box(s_val, Y[rows], support)
        lo[rows], hi[rows] = lo_r, hi_r
        keep[rows] = ok
    return lo[keep], hi[keep], keep


def _expand_boxes(lo, hi, U, W):
    """Tensor momentum nodes (m * n_p, 3) and weights (m, n_p) for boxes."""
    ctr = 0.5 * (lo + hi)
    hw = 0.5 * (hi - lo)
    P = (ctr[:, None, :] + hw[:, None, :] * U[None, :, :]).reshape(-1, 3)
    Wp = W[None, :] * np.prod(hw, axis=1)[:, None]
    return P, Wp


def field_raw(t: float, x, f_eval: Callable, support: SupportMeta,
              spec: QuadratureSpec) -> FieldValue:
    """Retarded integrals of finite-difference source derivatives.

    f_eval(t, X, P) must broadcast with per-row times.  Cost scales with
    (cone nodes) x (momentum nodes) x 8 stencil shifts; intended for
    oracle comparisons at a handful of probe points.
    """
    cone = _probe_cone(t, x, support, spec)
    if cone.size == 0:
        return FieldValue(E=np.zeros(3), B=np.zeros(3))
    s_rows = t - cone.r
    box_lo, box_hi, keep = _momentum_boxes(s_rows, cone.y, support)
    if not np.any(keep):
        return FieldValue(E=np.zeros(3), B=np.zeros(3))
    y = cone.y[keep]
    w_cone = cone.w[keep]
    r = cone.r[keep]
    s_rows = s_rows[keep]
    U, W = tensor_box_rule([-1.0] * 3, [1.0] * 3, spec.p_nodes)
    mk, n_p = box_lo.shape[0], U.shape[0]
    h = spec.fd_source_step

    E = np.zeros(3)
    B = np.zeros(3)
    chunk = max(1, 200_000 // n_p)
    for i0 in range(0, mk, chunk):
        sl = slice(i0, min(i0 + chunk, mk))
        b = sl.stop - sl.start
        P_f, Wp_c = _expand_boxes(box_lo[sl], box_hi[sl], U, W)
        vel = p_hat(P_f).reshape(b, n_p, 3)

        def src(dt_shift, dy_shift):
            tt = np.repeat(s_rows[sl] + dt_shift, n_p)
            YY = np.repeat(y[sl] + dy_shift[None, :], n_p, axis=0)
            f = np.asarray(f_eval(tt, YY, P_f), dtype=float).reshape(b, n_p)
            rho = np.sum(Wp_c * f, axis=1)
            j = np.sum((Wp_c * f)[:, :, None] * vel, axis=1)
            return rho, j

        zero = np.zeros(3)
        _, j_tp = src(+h, zero)
        _, j_tm = src(-h, zero)
        dj_dt = (j_tp - j_tm) / (2.0 * h)
        grad_rho = np.empty((b, 3))
        dj = np.empty((b, 3, 3))       # dj[:, l, k] = d j_k / d y_l
        for l in range(3):
            e = np.zeros(3)
            e[l] = h
            rho_p, j_p = src(0.0, e)
            rho_m, j_m = src(0.0, -e)
            grad_rho[:, l] = (rho_p - rho_m) / (2.0 * h)
            dj[:, l, :] = (j_p - j_m) / (2.0 * h)
        curl_j = np.stack([dj[:, 1, 2] - dj[:, 2, 1],
                           dj[:, 2, 0] - dj[:, 0, 2],
                           dj[:, 0, 1] - dj[:, 1, 0]], axis=1)
        wr = (w_cone[sl] / r[sl])[:, None]
        E -= np.sum(wr * (grad_rho + dj_dt), axis=0)
        B += np.sum(wr * curl_j, axis=0)
    return FieldValue(E=E, B=B)


def field_repr(t: float, x, f_eval: Callable, support: SupportMeta,
               spec: QuadratureSpec,
               force_eval: Optional[Callable] = None) -> FieldValue:
    """Kernel representation of the retarded field.

    force_eval(t, X, P) -> Lorentz force rows of the driving field; None
    means free streaming (the 1/r kernel terms vanish identically).
    """
    cone = _probe_cone(t, x, support, spec)
    if cone.size == 0:
        return FieldValue(E=np.zeros(3), B=np.zeros(3))
    s_rows = t - cone.r
    box_lo, box_hi, keep = _momentum_boxes(s_rows, cone.y, support)
    if not np.any(keep):
        return FieldValue(E=np.zeros(3), B=np.zeros(3))
    y = cone.y[keep]
    omega = cone.omega[keep]
    w_cone = cone.w[keep]
    r = cone.r[keep]
    s_rows = s_rows[keep]
    U, W = tensor_box_rule([-1.0] * 3, [1.0] * 3, spec.p_nodes)
    mk, n_p = box_lo.shape[0], U.shape[0]

    E = np.zeros(3)
    B = np.zeros(3)
    chunk = max(1, 200_000 // n_p)
    for i0 in range(0, mk, chunk):
        sl = slice(i0, min(i0 + chunk, mk))
        b = sl.stop - sl.start
        P_f, W_f = _expand_boxes(box_lo[sl], box_hi[sl], U, W)
        om_f = np.repeat(omega[sl], n_p, axis=0)
        tt = np.repeat(s_rows[sl], n_p)
        YY = np.repeat(y[sl], n_p, axis=0)
        f = np.asarray(f_eval(tt, YY, P_f), dtype=float).reshape(b, n_p)
        a1e, a1b = _kernel_a1_batch(om_f, P_f)
        wf = (W_f * f)
        m1e = np.sum(wf[:, :, None] * a1e.reshape(b, n_p, 3), axis=1)
        m1b = np.sum(wf[:, :, None] * a1b.reshape(b, n_p, 3), axis=1)
        w2 = (w_cone[sl] / r[sl] ** 2)[:, None]
        E -= np.sum(w2 * m1e, axis=0)
        B += np.sum(w2 * m1b, axis=0)
        if force_eval is not None:
            K = np.asarray(force_eval(tt, YY, P_f), dtype=float)
            c2e, c2b = _kernel_a2_contract_batch(om_f, P_f, K)
            m2e = np.sum(wf[:, :, None] * c2e.reshape(b, n_p, 3), axis=1)
            m2b = np.sum(wf[:, :, None] * c2b.reshape(b, n_p, 3), axis=1)
            w1 = (w_cone[sl] / r[sl])[:, None]
            E -= np.sum(w1 * m2e, axis=0)
            B += np.sum(w1 * m2b, axis=0)
    return FieldValue(E=E, B=B)


def field_gradient(t: float, x, f_eval: Callable, support: SupportMeta,
                   spec: QuadratureSpec, force_eval: Optional[Callable] = None,
                   fd_step: float = 0.05) -> np.ndarray:
    """Central-difference space-time gradient of field_repr.

    Returns an array of shape (4, 6): derivative direction (t, x1, x2, x3)
    by field component (E, B).
    """
    x = as_vec3(x)
    out = np.empty((4, 6))

    def fv(tq, xq):
        v = field_repr(tq, xq, f_eval, support, spec, force_eval=force_eval)
        return np.concatenate([v.E, v.B])

    out[0] = (fv(t + fd_step, x) - fv(t - fd_step, x)) / (2.0 * fd_step)
    for k in range(3):
        e = np.zeros(3)
        e[k] = fd_step
        out[k + 1] = (fv(t, x + e) - fv(t, x - e)) / (2.0 * fd_step)
    return out


# ---------------------------------------------------------------------------
# retarded chain-rule identities
# ---------------------------------------------------------------------------

def chain_rule_identity_residual(t: float, x, y, p, g, fd: bool = False,
                                 fd_step: float = 1e-5) -> float:
    """Residual of the two identities that convert retarded-time source
    derivatives into cone derivatives plus transport terms.

    With r = |x - y|, s = t - r, w the unit vector from x to y, v =
    p_hat(p), d = 1 + w.v, D_k = d/dy_k [g(t - |x-y|, y)] and
    (Tg) = d_t g + v . grad g:

        (d_y g)(s, y)  =  w (Tg)(s, y)/d + (I - w v^T/d) D
        (d_t g)(s, y)  =  (Tg)(s, y)/d   - (v . D)/d

    g is either an object with value/dt/dx methods (analytic mode) or any
    callable g(t, y) evaluated by central differences (fd=True).  Returns
    the max-norm residual over both identities.
    """
    x = as_vec3(x)
    y = as_vec3(y)
    p = as_vec3(p)
    diff = y - x
    r = float(np.linalg.norm(diff))
    if r < 1e-12:
        raise NonUnitDirection("probe and source point coincide")
    omega = diff / r
    s = t - r
    v = p_hat(p)
    d = 1.0 + float(omega @ v)

    if fd:
        fn = g.value if hasattr(g, "value") else g

        def val(tq, yq):
            return float(fn(tq, yq))

        gt = (val(s + fd_step, y) - val(s - fd_step, y)) / (2.0 * fd_step)
        gx = np.empty(3)
        D = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = fd_step
            gx[k] = (val(s, y + e) - val(s, y - e)) / (2.0 * fd_step)
            rp = float(np.linalg.norm(y + e - x))
            rm = float(np.linalg.norm(y - e - x))
            D[k] = (val(t - rp, y + e) - val(t - rm, y - e)) / (2.0 * fd_step)
    else:
        gt = float(g.dt(s, y))
        gx = np.asarray(g.dx(s, y), dtype=float)
        # composite derivative: d/dy_k [g(t - |x-y|, y)] = -w_k g_t + g_k
        D = -omega * gt + gx

    Tg = gt + float(v @ gx)
    rhs1 = omega * (Tg / d) + D - omega * (float(v @ D) / d)
    rhs2 = Tg / d - float(v @ D) / d
    return max(float(np.max(np.abs(gx - rhs1))), abs(gt - rhs2))
