"""Phase-space primitives: relativistic kinematics, initial data profiles,
and momentum-space source moments.

Units: speed of light, particle mass and charge are all 1.  Momentum p is
related to velocity through p_hat(p) = p / sqrt(1 + |p|^2), so |p_hat| < 1
always; a_of_beta(beta) is the corresponding speed bound for |p| <= beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, QuadratureDomainViolation
from .quad import QuadratureSpec, tensor_box_rule


def as_vec3(v) -> np.ndarray:
    """Validate and return a shape-(3,) float vector."""
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,):
        raise ConfigError(f"expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("vector has non-finite components")
    return arr


def gamma_of_p(p: np.ndarray) -> np.ndarray:
    """Lorentz factor sqrt(1 + |p|^2); p has shape (..., 3)."""
    p = np.asarray(p, dtype=float)
    return np.sqrt(1.0 + np.sum(p * p, axis=-1))


def p_hat(p: np.ndarray) -> np.ndarray:
    """Relativistic velocity p / sqrt(1 + |p|^2); shape-preserving."""
    p = np.asarray(p, dtype=float)
    return p / gamma_of_p(p)[..., None]


def a_of_beta(beta: float) -> float:
    """Speed bound beta / sqrt(1 + beta^2) for momenta with |p| <= beta."""
    if beta < 0:
        raise ConfigError("a_of_beta: beta must be nonnegative")
    return beta / np.sqrt(1.0 + beta * beta)


class PhasePoint(NamedTuple):
    x: np.ndarray
    p: np.ndarray


@dataclass
class FieldValue:
    """Electric and magnetic field at one space-time point."""

    E: np.ndarray
    B: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.E**2) + np.sum(self.B**2)))


# Radial profiles g(u) with u the normalized squared phase-space radius.
# Each entry maps u -> (g, g', g''); compact support on u < 1 and C^2 at
# the boundary is required by everything downstream.
def _cubic_bump(u):
    v = np.maximum(0.0, 1.0 - u)
    return v**3, -3.0 * v**2, 6.0 * v


_PROFILES = {"cubic-bump": _cubic_bump, "cubic-bump-drift": _cubic_bump}


@dataclass
class InitialData:
    """Compactly supported C^2 initial phase-space density.

    The density is amplitude * g(u) with
    u = (|x|^2 + |p - drift|^2) / core_radius^2.  The plain "cubic-bump"
    profile has zero drift and core_radius = R, so it reduces to
    amplitude * (1 - (|x|^2 + |p|^2)/R^2)^3 on its support.  For a nonzero
    drift the declared outer radius R = core_radius + |drift| still
    satisfies f(x, p) = 0 whenever |x|^2 + |p|^2 >= R^2.
    """

    amplitude: float = 1.0
    profile: str = "cubic-bump"
    core_radius: float = 1.0
    drift: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.drift = np.asarray(self.drift, dtype=float)
        if self.profile not in _PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r};"
                              f" known: {sorted(_PROFILES)}")
        if self.profile == "cubic-bump" and np.any(self.drift != 0.0):
            raise ConfigError("profile 'cubic-bump' does not take a drift;"
                              " use 'cubic-bump-drift'")
        if self.core_radius <= 0:
            raise ConfigError("core_radius must be positive")
        if self.amplitude < 0:
            raise ConfigError("amplitude must be nonnegative")

    # --- support metadata -------------------------------------------------
    @property
    def x_radius(self) -> float:
        return self.core_radius

    @property
    def p_center(self) -> np.ndarray:
        return self.drift

    @property
    def p_radius(self) -> float:
        return self.core_radius

    @property
    def R(self) -> float:
        """Outer phase-space radius: f = 0 whenever |x|^2 + |p|^2 >= R^2."""
        return self.core_radius + float(np.linalg.norm(self.drift))

    @property
    def p_max(self) -> float:
        """Largest |p| on the support."""
        return float(np.linalg.norm(self.drift)) + self.core_radius

    def speed_bound(self) -> float:
        """Largest |p_hat| on the support."""
        return a_of_beta(self.p_max)

    # --- evaluation -------------------------------------------------------
    def _u(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        dp = p - self.drift
        return (np.sum(x * x, axis=-1) + np.sum(dp * dp, axis=-1)) / self.core_radius**2

    def value(self, x, p) -> np.ndarray:
        """Density at (x, p); broadcasts over leading axes of shape (..., 3)."""
        g, _, _ = _PROFILES[self.profile](self._u(x, p))
        return self.amplitude * g

    def gradients(self, x, p):
        """Analytic (d/dx, d/dp) of the density; shapes match inputs."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        dp = p - self.drift
        u = self._u(x, p)
        _, gp, _ = _PROFILES[self.profile](u)
        scale = self.amplitude * gp * (2.0 / self.core_radius**2)
        return scale[..., None] * x, scale[..., None] * dp

    def second_derivative_sup(self, z_flat: np.ndarray) -> np.ndarray:
        """Sum over all 28 multi-indices |mu| <= 2 of |D^mu f| at points.

        z_flat has shape (m, 6) = (x, p - no shift applied here).  Used by
        delta_estimate; kept separate so tests can probe it directly.
        """
        x, p = z_flat[:, :3], z_flat[:, 3:]
        dp = p - self.drift
        u = self._u(x, p)
        g, g1, g2 = _PROFILES[self.profile](u)
        c = 2.0 / self.core_radius**2
        z6 = np.concatenate([x, dp], axis=1)          # du/dz = c * z6
        total = self.amplitude * np.abs(g)
        grad = self.amplitude * g1 * c
        total = total + np.sum(np.abs(grad[:, None] * z6), axis=1)
        # D_i D_j f = A * (g2 c^2 z_i z_j + g1 c delta_ij)
        for i in range(6):
            for j in range(i, 6):
                h = self.amplitude * (g2 * c * c * z6[:, i] * z6[:, j])
                if i == j:
                    h = h + self.amplitude * g1 * c
                total = total + np.abs(h)
        return total

    def delta_estimate(self, points_per_axis: int = 17) -> float:
        """Sum over |mu| <= 2 of sup |D^mu f|, each sup on a lattice.

        The lattice covers the support box with points_per_axis points per
        phase-space axis; evaluation is chunked to bound memory.
        """
        n = int(points_per_axis)
        ax_x = np.linspace(-self.x_radius, self.x_radius, n)
        ax_p = np.linspace(-self.p_radius, self.p_radius, n)
        # per-component sups accumulated separately
        sup_f = 0.0
        sup_grad = np.zeros(6)
        sup_hess = np.zeros((6, 6))
        c = 2.0 / self.core_radius**2
        chunk = max(1, 400_000 // (n * n * n))
        grids_p = np.stack(np.meshgrid(ax_p, ax_p, ax_p, indexing="ij"),
                           axis=-1).reshape(-1, 3)
        for i0 in range(0, n, chunk):
            xs = ax_x[i0:i0 + chunk]
            gx = np.stack(np.meshgrid(xs, ax_x, ax_x, indexing="ij"),
                          axis=-1).reshape(-1, 3)
            x_all = np.repeat(gx, grids_p.shape[0], axis=0)
            p_all = np.tile(grids_p + self.drift, (gx.shape[0], 1))
            u = self._u(x_all, p_all)
            keep = u < 1.0
            if not np.any(keep):
                continue
            x_k, p_k = x_all[keep], p_all[keep]
            z6 = np.concatenate([x_k, p_k - self.drift], axis=1)
            g, g1, g2 = _PROFILES[self.profile](u[keep])
            sup_f = max(sup_f, self.amplitude * float(np.max(np.abs(g))))
            grad = np.abs(self.amplitude * g1[:, None] * c * z6)
            sup_grad = np.maximum(sup_grad, grad.max(axis=0))
            for i in range(6):
                for j in range(i, 6):
                    h = self.amplitude * (g2 * c * c * z6[:, i] * z6[:, j])
                    if i == j:
                        h = h + self.amplitude * g1 * c
                    sup_hess[i, j] = max(sup_hess[i, j], float(np.max(np.abs(h))))
        total = sup_f + float(np.sum(sup_grad))
        total += float(np.sum(sup_hess[np.triu_indices(6)]))
        return total


@dataclass
class SourceMoments:
    rho: float
    j: np.ndarray


def sources(t: float, x, f_eval: Callable, spec: QuadratureSpec,
            p_box_halfwidth: float, boundary_rel_tol: float = 1e-9) -> SourceMoments:
    """Charge and current density at (t, x) by tensor GL momentum quadrature.

    f_eval(t, x, p) must broadcast over p of shape (m, 3).  The box is
    [-p_box_halfwidth, p_box_halfwidth]^3; if f carries mass on the box
    boundary beyond boundary_rel_tol (relative to the interior max) the
    quadrature domain is too small and an error is raised.
    """
    x = as_vec3(x)
    hw = float(p_box_halfwidth)
    pts, w = tensor_box_rule([-hw] * 3, [hw] * 3, spec.p_nodes)
    f = np.asarray(f_eval(t, x, pts), dtype=float)
    interior = float(np.max(np.abs(f))) if f.size else 0.0

    # boundary sampling on the 6 faces
    g = np.linspace(-hw, hw, spec.p_nodes)
    u, v = np.meshgrid(g, g, indexing="ij")
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    faces = []
    for axis in range(3):
        for side in (-hw, hw):
            pts_f = np.zeros((uv.shape[0], 3))
            pts_f[:, axis] = side
            pts_f[:, (axis + 1) % 3] = uv[:, 0]
            pts_f[:, (axis + 2) % 3] = uv[:, 1]
            faces.append(pts_f)
    fb = np.asarray(f_eval(t, x, np.concatenate(faces, axis=0)), dtype=float)
    bound_max = float(np.max(np.abs(fb))) if fb.size else 0.0
    scale = max(interior, 1e-300)
    if bound_max > boundary_rel_tol * scale:
        raise QuadratureDomainViolation(
            f"density on momentum box boundary: {bound_max:.3e} "
            f"(interior max {interior:.3e}, box halfwidth {hw})")

    rho = float(np.sum(w * f))
    j = p_hat(pts) * (w * f)[:, None]
    return SourceMoments(rho=rho, j=j.sum(axis=0))
