"""Quadrature toolbox: Gauss-Legendre rules, composite radial panels,
sphere rules (full and spherical-cap), and tensor-product box rules.

All rules return plain numpy arrays so callers can evaluate integrands in
one vectorized pass.  Node layouts are deterministic functions of their
parameters; nothing here depends on global state, which is what makes
byte-identical reruns possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError


@lru_cache(maxsize=64)
def _gl_cached(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x.copy(), w.copy()


def gauss_legendre(n: int):
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1]."""
    if n < 1:
        raise ConfigError(f"Gauss-Legendre order must be >= 1, got {n}")
    x, w = _gl_cached(int(n))
    return x.copy(), w.copy()


def gl_on_interval(a: float, b: float, n: int):
    """n-point Gauss-Legendre rule mapped to [a, b]."""
    x, w = gauss_legendre(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def panel_edges(a: float, b: float, max_width: float):
    """Split [a, b] into equal panels no wider than max_width."""
    if b <= a:
        return np.array([a, b])
    n = max(1, int(np.ceil((b - a) / max_width)))
    return np.linspace(a, b, n + 1)


def composite_gl(a: float, b: float, max_width: float, n_per_panel: int = 4):
    """Composite Gauss-Legendre rule on [a, b] with bounded panel width."""
    edges = panel_edges(a, b, max_width)
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        x, w = gl_on_interval(lo, hi, n_per_panel)
        xs.append(x)
        ws.append(w)
    return np.concatenate(xs), np.concatenate(ws)


def orthonormal_frame(axis: np.ndarray):
    """Right-handed frame (e1, e2, axis) for a unit axis vector."""
    axis = np.asarray(axis, dtype=float)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis[0]) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def sphere_rule(n_theta: int, n_phi: int, axis=None, cos_min: float = -1.0):
    """Product rule on the unit sphere: GL in cos(theta) x uniform phi.

    axis:    polar axis of the rule (defaults to +z).
    cos_min: restrict to the cap cos(theta) >= cos_min around the axis.

    Returns (dirs, weights) with dirs of shape (n_theta*n_phi, 3) and
    weights summing to the cap solid angle.
    """
    if cos_min >= 1.0:
        raise ConfigError("sphere_rule: empty cap")
    mu, wmu = gl_on_interval(cos_min, 1.0, n_theta)
    phi = (np.arange(n_phi) + 0.5) * (2.0 * np.pi / n_phi)
    wphi = 2.0 * np.pi / n_phi
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - mu**2))
    if axis is None:
        ez = np.array([0.0, 0.0, 1.0])
    else:
        ez = np.asarray(axis, dtype=float)
        nrm = np.linalg.norm(ez)
        if nrm == 0.0:
            ez = np.array([0.0, 0.0, 1.0])
        else:
            ez = ez / nrm
    e1, e2 = orthonormal_frame(ez)
    cp, sp = np.cos(phi), np.sin(phi)
    # dirs[i*n_phi + j] pairs mu[i] with phi[j]
    dirs = (
        sin_t[:, None, None] * (cp[None, :, None] * e1 + sp[None, :, None] * e2)
        + mu[:, None, None] * ez
    ).reshape(-1, 3)
    weights = np.repeat(wmu * wphi, n_phi)
    return dirs, weights


def tensor_box_rule(lo, hi, n: int):
    """Tensor Gauss-Legendre rule with n nodes per axis over a 3-D box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise ConfigError("tensor_box_rule: empty box")
    axes, wts = [], []
    for k in range(3):
        x, w = gl_on_interval(lo[k], hi[k], n)
        axes.append(x)
        wts.append(w)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    w3 = (wts[0][:, None, None] * wts[1][None, :, None] * wts[2][None, None, :]).reshape(-1)
    return pts, w3


@dataclass
class QuadratureSpec:
    """All discretization knobs in one place.

    The defaults are sized for the verification runs in this repo (single
    core).  Field representation checks at probe points always use the full
    momentum box [-p_box_halfwidth, p_box_halfwidth]^3; the table-building
    engine adapts momentum boxes per space-time node instead, which is what
    keeps thin momentum shells at large |t| resolved.
    """

    p_nodes: int = 8                 # GL nodes per momentum axis
    theta_nodes: int = 8             # GL nodes in cos(theta)
    phi_nodes: int = 16              # uniform nodes in phi
    radial_panel_width: float = 0.5  # max width of radial GL panels
    radial_panel_nodes: int = 4
    fd_source_step: float = 1e-3     # FD step for raw-field source derivatives
    fd_flow_step: float = 1e-4       # FD step for flow Jacobian
    ode_step: float = 0.02           # RK4 step for single-trajectory work
    ode_step_bulk: float = 0.22      # RK4 step for batched table building
    quad_rel_tol: float = 2e-2       # declared tolerance of source/field quadrature
    interp_tol: float = 2e-2         # declared tolerance of table interpolation
    support_pad: float = 0.35        # slack added around predicted supports
    angular_max_factor: int = 5      # cap on per-panel angular refinement

    def validate(self) -> None:
        if self.p_nodes < 2 or self.theta_nodes < 2 or self.phi_nodes < 4:
            raise ConfigError("QuadratureSpec: node counts too small")
        for name in ("radial_panel_width", "fd_source_step", "fd_flow_step",
                     "ode_step", "ode_step_bulk", "quad_rel_tol", "interp_tol",
                     "support_pad"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"QuadratureSpec: {name} must be positive")
        if self.angular_max_factor < 1:
            raise ConfigError("QuadratureSpec: angular_max_factor must be >= 1")


@dataclass
class ConeRule:
    """Discretized retarded cone centered at a probe point.

    y[k] = x + r[k] * dir[k]; w[k] integrates f(y) dy / |x - y|^n when
    combined with the stored radial power: the weight already contains
    r^2 from the volume element, so sum(w * r**(-n) * f) approximates
    the cone integral with kernel |x-y|^(-n).
    """

    r: np.ndarray          # (m,) radii
    y: np.ndarray          # (m, 3) evaluation points
    omega: np.ndarray      # (m, 3) unit vectors (y - x)/|y - x|
    w: np.ndarray          # (m,) weights including r^2 and angular measure
    n_radial: int = 0
    n_angular: int = 0

    @property
    def size(self) -> int:
        return self.r.shape[0]


def cone_rule(t: float, x: np.ndarray, radius_at, r_lo: float, r_hi: float,
              spec: QuadratureSpec, feature_scale=None,
              breakpoints=None, angular_target=None) -> ConeRule:
    """Build a product rule over the retarded cone of a probe point.

    radius_at(s):   radius of the source region at time s (tube profile);
                    used both to prune empty spheres and to size the
                    per-panel angular caps.
    feature_scale(s): optional radial resolution target near retarded
                    time s; defaults to the global panel width.
    breakpoints:    radii that panel edges must align with (used to match
                    source-table slice times, where interpolation kinks).
    angular_target(s): optional arc-length resolution target; each radial
                    panel upsizes its angular rule (capped at
                    angular_max_factor) until node spacing on the cap
                    meets it.  Without it every panel uses the base rule.

    Each radial panel carries its own cap rule, so far panels with small
    caps are not forced onto the wide cap the near panels need.
    """
    x = np.asarray(x, dtype=float)
    xn = float(np.linalg.norm(x))
    empty = ConeRule(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    if r_hi <= max(r_lo, 0.0):
        return empty

    # Panel edges: pinned to the supplied breakpoints, then width-limited
    # by the source feature scale.
    edges = [max(r_lo, 0.0), r_hi]
    if breakpoints is not None:
        for b in np.atleast_1d(breakpoints):
            if max(r_lo, 0.0) < b < r_hi:
                edges.append(float(b))
    edges = np.array(sorted(set(edges)))
    axis = -x / xn if xn >= 1e-12 else np.array([0.0, 0.0, 1.0])

    parts_r, parts_y, parts_o, parts_w = [], [], [], []
    n_radial = 0
    n_angular_max = 0
    for lo, hi in zip(edges[:-1], edges[1:]):
        s_mid = t - 0.5 * (lo + hi)
        width = spec.radial_panel_width
        if feature_scale is not None:
            width = min(max(width, 1e-6), max(float(feature_scale(s_mid)), 1e-6))
        r_nodes, r_w = composite_gl(lo, hi, width, spec.radial_panel_nodes)

        # prune radii whose sphere cannot meet the source ball
        rho = np.asarray(radius_at(t - r_nodes), dtype=float)
        keep = (r_nodes >= xn - rho) & (r_nodes <= xn + rho) & (rho > 0.0)
        r_nodes, r_w, rho = r_nodes[keep], r_w[keep], rho[keep]
        if r_nodes.size == 0:
            continue
        n_radial += r_nodes.size

        # smallest cap around -x that holds this panel's intersections
        if xn < 1e-12:
            cos_min = -1.0
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                cos_lo = (r_nodes**2 + xn**2 - rho**2) / (2.0 * r_nodes * xn)
            cos_min = float(np.clip(np.min(cos_lo), -1.0, 0.999999))
            if cos_min <= -0.999:
                cos_min = -1.0

        n_th, n_ph = spec.theta_nodes, spec.phi_nodes
        if angular_target is not None:
            target = max(float(angular_target(s_mid)), 1e-6)
            r_mid = float(np.max(r_nodes))
            alpha = float(np.arccos(np.clip(cos_min, -1.0, 1.0)))
            sin_max = 1.0 if alpha >= 0.5 * np.pi else np.sin(alpha)
            cap = spec.angular_max_factor
            n_th = int(np.clip(np.ceil(r_mid * alpha / target),
                               n_th, n_th * cap))
            n_ph = int(np.clip(np.ceil(2.0 * np.pi * r_mid * sin_max / target),
                               n_ph, n_ph * cap))
        dirs, ang_w = sphere_rule(n_th, n_ph, axis=axis, cos_min=cos_min)
        n_angular_max = max(n_angular_max, dirs.shape[0])

        y = x[None, None, :] + r_nodes[:, None, None] * dirs[None, :, :]
        yn = np.linalg.norm(y, axis=-1)
        mask = yn <= rho[:, None]
        w_full = (r_w * r_nodes**2)[:, None] * ang_w[None, :]
        idx_r, idx_a = np.nonzero(mask)
        parts_r.append(r_nodes[idx_r])
        parts_y.append(y[idx_r, idx_a])
        parts_o.append(dirs[idx_a])
        parts_w.append(w_full[idx_r, idx_a])

    if not parts_r:
        return empty
    return ConeRule(
        r=np.concatenate(parts_r),
        y=np.concatenate(parts_y),
        omega=np.concatenate(parts_o),
        w=np.concatenate(parts_w),
        n_radial=n_radial,
        n_angular=n_angular_max,
    )
