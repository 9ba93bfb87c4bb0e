"""Momentum-moment tables on graded time slices.

Filling a space-time field table by running the full phase-space
quadrature at every table node repeats the same momentum integrals
enormously many times.  Instead, each source time slice s carries a
uniform cubic grid over the transported support ball, and the momentum
integrals are done once per grid node:

    rho   = int f dp                 j     = int v f dp
    P2    = int v v^T f dp           G     = int (I - v v^T)/gamma K f dp
    e_kin = int gamma f dp           f2    = int f^2 dp

with v = p_hat(p) and K the Lorentz force driving this density's
characteristics.  The identities d_t rho = -div j (continuity) and d_t j = -div P2 + G
(transport) give the time derivatives entirely from same-slice data, and
one integration by parts in y moves the remaining space derivatives off
the sources, so a probe field needs only

    E(t, x) = -int dy [ rho w / r^2  +  (w rho_t + j_t) / r ],
    B(t, x) = +int dy [ (w x j) / r^2  +  (w x j_t) / r ],

all sources at the retarded time t - r, r = |x - y|, w = (y - x)/r.
Keeping rho and j underived in the 1/r^2 terms matters: the fully
derived form -int (grad rho + d_t j)/r hides the near field in a large
cancellation that grid interpolation error destroys.  Spatial
derivatives (for rho_t, j_t only) are central differences on the slice
grid.  Radial quadrature panels are pinned to the slice times so the
piecewise-linear time interpolation never straddles a panel.  Source
history below the first slice is dropped; ``tail_bound`` reports the
geometric size of the dropped contribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from .core import FieldValue, as_vec3, gamma_of_p, p_hat
from .errors import ConfigError, QuadratureDomainViolation
from .quad import QuadratureSpec, cone_rule, tensor_box_rule
from .retarded_field import SupportMeta, momentum_support_box


def graded_times(s_min: float, s_max: float, ds_near: float = 0.2,
                 ds_growth: float = 0.08) -> np.ndarray:
    """Slice times on [s_min, s_max] with spacing ds_near (1 + growth |s|),
    densest around s = 0.  Always includes both endpoints and 0."""
    if s_min >= s_max:
        raise ConfigError(f"empty slice range [{s_min}, {s_max}]")
    if ds_near <= 0.0:
        raise ConfigError("ds_near must be positive")

    def march(start, stop):
        out = [start]
        while out[-1] < stop - 1e-9:
            step = ds_near * (1.0 + ds_growth * abs(out[-1]))
            out.append(min(out[-1] + step, stop))
        return out

    lo = min(s_min, 0.0)
    hi = max(s_max, 0.0)
    left = march(0.0, -lo)
    right = march(0.0, hi)
    times = np.unique(np.concatenate([-np.asarray(left), np.asarray(right)]))
    return times[(times >= s_min - 1e-9) & (times <= s_max + 1e-9)]


def grid_points_for(support, h_over_core: float = 3.2, n_min: int = 21,
                    n_max: int = 47):
    """Per-slice grid sizing: resolve the initial core scale, cap the cost.

    Transported densities keep features on the scale of the initial core
    long after the support tube has outgrown it, so a grid with h tied to
    the tube radius goes blind exactly where probe cones cross the dense
    region.  Cap h at core/h_over_core until that needs more than n_max
    points across; past that the features themselves grow with |s| and
    proportional spacing is safe again.
    """
    h_abs = support.x_radius / h_over_core

    def n_across(s: float) -> int:
        n = int(np.ceil(2.0 * support.tube_radius(s) / h_abs)) + 1
        return min(max(n, n_min), n_max) | 1

    return n_across


def _deriv4(arr: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order central derivative along one axis.

    Grid spacing h is tied to the tube radius, so second-order stencils
    leave percent-level bias in the derived channels; the far field is
    built almost entirely from them and inherits it.  The two outermost
    layers fall back to np.gradient, which only ever touches zeros here
    (slices carry two guard rings beyond the support).
    """
    out = np.gradient(arr, h, axis=axis)
    n = arr.shape[axis]
    if n < 5:
        return out

    def sl(a, b):
        idx = [slice(None)] * arr.ndim
        idx[axis] = slice(a, b)
        return tuple(idx)

    out[sl(2, -2)] = (arr[sl(0, -4)] - 8.0 * arr[sl(1, -3)]
                      + 8.0 * arr[sl(3, -1)] - arr[sl(4, None)]) / (12.0 * h)
    return out


@dataclass
class MomentSlice:
    """All momentum moments of one source time slice on its own grid."""

    s: float
    h: float
    n: int
    lo: np.ndarray                 # grid corner, node ijk at lo + h (i,j,k)
    rho: np.ndarray                # (n, n, n)
    j: np.ndarray                  # (n, n, n, 3)
    p2: np.ndarray                 # (n, n, n, 3, 3)
    g_force: np.ndarray            # (n, n, n, 3)
    e_kin: np.ndarray              # (n, n, n)
    f_sq: np.ndarray               # (n, n, n)
    f_max: float
    boundary_leak: float           # max density sampled on p-box faces
    n_active: int
    # channels: rho, rho_t, j (3), j_t (3)
    src: np.ndarray = field(default=None, repr=False)  # (n, n, n, 8)

    def finalize(self):
        """Assemble the interpolation channels from the moments."""
        div_j = sum(_deriv4(self.j[..., k], self.h, axis=k)
                    for k in range(3))
        div_p2 = np.zeros_like(self.j)
        for l in range(3):
            div_p2 += _deriv4(self.p2[..., l, :], self.h, axis=l)
        j_t = -div_p2 + self.g_force
        self.src = np.concatenate([self.rho[..., None], -div_j[..., None],
                                   self.j, j_t], axis=-1)

    def interp(self, Y: np.ndarray) -> np.ndarray:
        """Trilinear interpolation of the source channels; zero outside."""
        u = (np.atleast_2d(Y) - self.lo[None, :]) / self.h
        n = self.n
        inside = np.all((u >= 0.0) & (u <= n - 1.0), axis=1)
        out = np.zeros((u.shape[0], 8))
        if not np.any(inside):
            return out
        ui = u[inside]
        i0 = np.minimum(ui.astype(int), n - 2)
        frac = ui - i0
        flat = self.src.reshape(-1, 8)

        def idx(di, dj, dk):
            return ((i0[:, 0] + di) * n + (i0[:, 1] + dj)) * n + (i0[:, 2] + dk)

        acc = np.zeros((ui.shape[0], 8))
        for di in (0, 1):
            wi = frac[:, 0] if di else 1.0 - frac[:, 0]
            for dj in (0, 1):
                wj = frac[:, 1] if dj else 1.0 - frac[:, 1]
                for dk in (0, 1):
                    wk = frac[:, 2] if dk else 1.0 - frac[:, 2]
                    acc += (wi * wj * wk)[:, None] * flat[idx(di, dj, dk)]
        out[inside] = acc
        return out

    def integrate_scalar(self, which: str) -> float:
        """h^3 sum of a scalar moment over the slice (compact support)."""
        arr = {"rho": self.rho, "e_kin": self.e_kin, "f_sq": self.f_sq}[which]
        return float(np.sum(arr)) * self.h ** 3

    def compact(self):
        """Free the tensor moments once src is assembled.  Slice
        arithmetic (add/subtract) acts on the finalized channels, which
        are linear in the moments, so compacted slices stay combinable."""
        if self.src is None:
            raise ConfigError("compact before finalize would lose moments")
        self.p2 = None
        self.g_force = None

    def _combine(self, other: "MomentSlice", sign: float) -> "MomentSlice":
        if self.src is None or other.src is None:
            raise ConfigError("slice arithmetic needs finalized slices")
        if self.n != other.n or abs(self.h - other.h) > 1e-12 * max(self.h, 1.0):
            raise ConfigError("slice arithmetic needs identical grids")
        sl = MomentSlice(
            s=self.s, h=self.h, n=self.n, lo=self.lo.copy(),
            rho=self.rho + sign * other.rho, j=self.j + sign * other.j,
            p2=None, g_force=None,
            e_kin=self.e_kin + sign * other.e_kin,
            f_sq=self.f_sq + sign * other.f_sq,
            f_max=self.f_max + sign * other.f_max,
            boundary_leak=max(self.boundary_leak, other.boundary_leak),
            n_active=max(self.n_active, other.n_active))
        sl.src = self.src + sign * other.src
        return sl


def slice_grid(s: float, support: SupportMeta,
               points_across: int) -> Tuple[float, int, np.ndarray]:
    """(h, n, lo) of the slice grid: points_across nodes span the
    transported support tube, plus two guard rings per side so the
    4th-order divergences never read past allocated (zero) data.  The
    quadrature and deposit fillers must agree on this geometry or
    slice-wise stack arithmetic breaks."""
    tube = float(support.tube_radius(s))
    h = 2.0 * tube / (points_across - 1)
    n = points_across + 4
    lo = -(tube + 2.0 * h) * np.ones(3)
    return h, n, lo


def fill_slice(s: float, support: SupportMeta, spec: QuadratureSpec,
               f_batch: Callable, force_batch: Optional[Callable],
               points_across: int = 17, chunk_rows: int = 200_000,
               leak_stride: int = 29) -> MomentSlice:
    """Compute every moment of one time slice.

    f_batch(ts, Y, P) evaluates this iterate's density; force_batch(ts,
    Y, P) the Lorentz force of the driving field (None means zero force,
    then G = 0).  Cost: one density evaluation per (grid node, momentum
    node) pair, chunked to bound memory.
    """
    tube = float(support.tube_radius(s))
    h, n, lo = slice_grid(s, support, points_across)
    axis = lo[0] + h * np.arange(n)
    Y = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)

    box_lo, box_hi, nonempty = momentum_support_box(s, Y, support)
    active = nonempty & (np.linalg.norm(Y, axis=1) <= tube + 1e-12)
    ia = np.flatnonzero(active)
    shape = (n, n, n)
    sl = MomentSlice(s=s, h=h, n=n, lo=lo,
                     rho=np.zeros(shape), j=np.zeros(shape + (3,)),
                     p2=np.zeros(shape + (3, 3)), g_force=np.zeros(shape + (3,)),
                     e_kin=np.zeros(shape), f_sq=np.zeros(shape),
                     f_max=0.0, boundary_leak=0.0, n_active=ia.size)
    if ia.size == 0:
        sl.finalize()
        return sl

    U, W = tensor_box_rule([-1.0] * 3, [1.0] * 3, spec.p_nodes)
    n_p = U.shape[0]
    node_chunk = max(1, chunk_rows // n_p)
    rho = np.zeros(ia.size)
    jm = np.zeros((ia.size, 3))
    p2 = np.zeros((ia.size, 3, 3))
    gf = np.zeros((ia.size, 3))
    ek = np.zeros(ia.size)
    f2 = np.zeros(ia.size)
    fmax = 0.0
    leak = 0.0
    for c0 in range(0, ia.size, node_chunk):
        rows = ia[c0:c0 + node_chunk]
        m = rows.size
        ctr = 0.5 * (box_lo[rows] + box_hi[rows])
        hw = 0.5 * (box_hi[rows] - box_lo[rows])
        P = (ctr[:, None, :] + hw[:, None, :] * U[None, :, :]).reshape(-1, 3)
        Wp = W[None, :] * np.prod(hw, axis=1)[:, None]
        YY = np.repeat(Y[rows], n_p, axis=0)
        tt = np.full(m * n_p, s)
        f = np.asarray(f_batch(tt, YY, P), dtype=float).reshape(m, n_p)
        v = p_hat(P).reshape(m, n_p, 3)
        wf = Wp * f
        sel = slice(c0, c0 + m)
        rho[sel] = np.sum(wf, axis=1)
        jm[sel] = np.sum(wf[:, :, None] * v, axis=1)
        p2[sel] = np.einsum("mp,mpi,mpk->mik", wf, v, v, optimize=True)
        ek[sel] = np.sum(wf * gamma_of_p(P).reshape(m, n_p), axis=1)
        f2[sel] = np.sum(Wp * f * f, axis=1)
        fmax = max(fmax, float(np.max(f)) if f.size else 0.0)
        if force_batch is not None:
            K = np.asarray(force_batch(tt, YY, P), dtype=float).reshape(m, n_p, 3)
            vK = np.sum(v * K, axis=-1)
            red = (K - v * vK[..., None]) / gamma_of_p(P).reshape(m, n_p)[..., None]
            gf[sel] = np.sum(wf[:, :, None] * red, axis=1)
        # sample the p-box faces: nonzero density there means the box clipped
        samp = np.arange(0, m, leak_stride)
        if samp.size:
            faces = []
            for k in range(3):
                for sgn in (-1.0, 1.0):
                    face = ctr[samp].copy()
                    face[:, k] += sgn * hw[samp, k]
                    faces.append(face)
            Pf = np.concatenate(faces, axis=0)
            Yf = np.tile(Y[rows][samp], (6, 1))
            tf = np.full(Pf.shape[0], s)
            fv = np.asarray(f_batch(tf, Yf, Pf), dtype=float)
            if fv.size:
                leak = max(leak, float(np.max(np.abs(fv))))

    sl.rho.reshape(-1)[ia] = rho
    sl.e_kin.reshape(-1)[ia] = ek
    sl.f_sq.reshape(-1)[ia] = f2
    sl.j.reshape(-1, 3)[ia] = jm
    sl.p2.reshape(-1, 3, 3)[ia] = p2
    sl.g_force.reshape(-1, 3)[ia] = gf
    sl.f_max = fmax
    sl.boundary_leak = leak
    sl.finalize()
    return sl


def deposit_slice(s: float, support: SupportMeta, X: np.ndarray,
                  P: np.ndarray, w6: np.ndarray, f0: np.ndarray,
                  K: Optional[np.ndarray], points_across: int,
                  with_diagnostics: bool = True,
                  chunk: int = 200_000) -> MomentSlice:
    """Moments of one slice from a transported phase-space cloud.

    (X, P) are the cloud states at time s, w6 the 6-D quadrature weights
    of the initial nodes (characteristics preserve phase volume, so they
    stay valid), f0 the conserved density values, K the Lorentz force of
    the driving field at (s, X, P) or None for zero force.  Each particle
    scatters onto the 27 surrounding grid nodes with quadratic B-spline
    weights; node values are scattered mass / h^3.  Same grid geometry as
    fill_slice, so stacks built either way can be subtracted slice-wise.
    boundary_leak here is the mass fraction clipped at the tube edge
    (exactly zero when the support bound holds).
    """
    h, n, lo = slice_grid(s, support, points_across)
    shape = (n, n, n)
    sl = MomentSlice(s=s, h=h, n=n, lo=lo,
                     rho=np.zeros(shape), j=np.zeros(shape + (3,)),
                     p2=np.zeros(shape + (3, 3)), g_force=np.zeros(shape + (3,)),
                     e_kin=np.zeros(shape), f_sq=np.zeros(shape),
                     f_max=float(np.max(f0)) if f0.size else 0.0,
                     boundary_leak=0.0, n_active=int(X.shape[0]))
    if X.shape[0] == 0:
        sl.finalize()
        return sl

    u = (X - lo[None, :]) / h
    base = np.rint(u).astype(np.int64)
    inside = np.all((base >= 1) & (base <= n - 2), axis=1)
    total_mass = float(np.sum(w6 * f0))
    if not np.all(inside):
        lost = float(np.sum((w6 * f0)[~inside]))
        sl.boundary_leak = lost / total_mass if total_mass > 0 else 0.0
        u, base = u[inside], base[inside]
        X, P, w6, f0 = X[inside], P[inside], w6[inside], f0[inside]
        K = K[inside] if K is not None else None

    gam = gamma_of_p(P)
    v = P / gam[:, None]
    mass = w6 * f0
    nsq = n * n
    flat_rho = np.zeros(n ** 3)
    flat_j = np.zeros((n ** 3, 3))
    flat_p2 = np.zeros((n ** 3, 3, 3))
    flat_g = np.zeros((n ** 3, 3))
    flat_ek = np.zeros(n ** 3)
    flat_f2 = np.zeros(n ** 3)
    if K is not None:
        vK = np.sum(v * K, axis=1)
        red = (K - v * vK[:, None]) / gam[:, None]

    for c0 in range(0, mass.size, chunk):
        cs = slice(c0, c0 + chunk)
        d = u[cs] - base[cs]
        # quadratic B-spline weights on nodes base-1, base, base+1
        wax = np.empty((d.shape[0], 3, 3))
        wax[:, :, 0] = 0.5 * (0.5 - d) ** 2
        wax[:, :, 1] = 0.75 - d ** 2
        wax[:, :, 2] = 0.5 * (0.5 + d) ** 2
        m = d.shape[0]
        idx = np.empty((m, 27), dtype=np.int64)
        coef = np.empty((m, 27))
        q = 0
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    idx[:, q] = ((base[cs, 0] + di) * n + base[cs, 1] + dj) \
                        * n + base[cs, 2] + dk
                    coef[:, q] = wax[:, 0, di + 1] * wax[:, 1, dj + 1] \
                        * wax[:, 2, dk + 1]
                    q += 1
        idx = idx.reshape(-1)
        coef = coef.reshape(-1)

        def scat(vals, out):
            w = (coef.reshape(m, 27) * vals[:, None]).reshape(-1)
            out += np.bincount(idx, weights=w, minlength=n ** 3)

        scat(mass[cs], flat_rho)
        for c in range(3):
            scat(mass[cs] * v[cs, c], flat_j[:, c])
            for c2 in range(c, 3):
                scat(mass[cs] * v[cs, c] * v[cs, c2], flat_p2[:, c, c2])
            if K is not None:
                scat(mass[cs] * red[cs, c], flat_g[:, c])
        if with_diagnostics:
            scat(mass[cs] * gam[cs], flat_ek)
            scat(w6[cs] * f0[cs] ** 2, flat_f2)

    inv_h3 = 1.0 / h ** 3
    sl.rho[:] = (flat_rho * inv_h3).reshape(shape)
    sl.j[:] = (flat_j * inv_h3).reshape(shape + (3,))
    for c in range(3):
        for c2 in range(c + 1, 3):
            flat_p2[:, c2, c] = flat_p2[:, c, c2]
    sl.p2[:] = (flat_p2 * inv_h3).reshape(shape + (3, 3))
    sl.g_force[:] = (flat_g * inv_h3).reshape(shape + (3,))
    sl.e_kin[:] = (flat_ek * inv_h3).reshape(shape)
    sl.f_sq[:] = (flat_f2 * inv_h3).reshape(shape)
    sl.finalize()
    return sl


class MomentStack:
    """Ordered moment slices plus the retarded-field evaluator over them."""

    def __init__(self, slices: Sequence[MomentSlice], support: SupportMeta):
        self.slices = sorted(slices, key=lambda s: s.s)
        self.support = support
        self.times = np.array([s.s for s in self.slices])
        if self.times.size < 2:
            raise ConfigError("a moment stack needs at least two slices")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("slice times must be strictly increasing")

    @property
    def s_min(self) -> float:
        return float(self.times[0])

    @property
    def s_max(self) -> float:
        return float(self.times[-1])

    @classmethod
    def build(cls, support: SupportMeta, spec: QuadratureSpec, f_batch: Callable,
              force_batch: Optional[Callable], s_min: float, s_max: float,
              ds_near: float = 0.2, ds_growth: float = 0.08,
              points_across=None,
              progress: Optional[Callable[[str], None]] = None) -> "MomentStack":
        times = graded_times(s_min, s_max, ds_near, ds_growth)
        if points_across is None:
            points_across = grid_points_for(support)
        slices = []
        for i, s in enumerate(times):
            n_across = points_across(s) if callable(points_across) \
                else int(points_across)
            slices.append(fill_slice(float(s), support, spec, f_batch,
                                     force_batch, n_across))
            if progress is not None and (i % 10 == 9 or i == times.size - 1):
                progress(f"slice {i + 1}/{times.size} (s = {s:+.2f})")
        return cls(slices, support)

    # --- interpolation ----------------------------------------------------
    def source_terms(self, s_rows: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Source channel rows (rho, rho_t, j, j_t) at per-row retarded
        times; zero outside the tabulated history."""
        s_rows = np.asarray(s_rows, dtype=float)
        Y = np.atleast_2d(Y)
        out = np.zeros((s_rows.size, 8))
        eps = 1e-9
        ok = (s_rows >= self.s_min - eps) & (s_rows <= self.s_max + eps)
        if not np.any(ok):
            return out
        idx = np.clip(np.searchsorted(self.times, s_rows[ok]) - 1,
                      0, self.times.size - 2)
        t0 = self.times[idx]
        t1 = self.times[idx + 1]
        w1 = np.clip((s_rows[ok] - t0) / (t1 - t0), 0.0, 1.0)
        rows_ok = np.flatnonzero(ok)
        for k in np.unique(idx):
            grp = idx == k
            rows = rows_ok[grp]
            lo = self.slices[k].interp(Y[rows])
            hi = self.slices[k + 1].interp(Y[rows])
            wl = w1[grp][:, None]
            out[rows] = (1.0 - wl) * lo + wl * hi
        return out

    # --- probe field -------------------------------------------------------
    def field_at(self, t: float, x, spec: QuadratureSpec,
                 with_tail: bool = False, s_floor: Optional[float] = None):
        """Retarded field at one probe point from the tabulated sources.

        s_floor truncates the source history early (shallower cones than
        the stack holds); bulk table fills use this because the deep tail
        only matters for far-field probes.  Returns FieldValue, or
        (FieldValue, tail_bound) with the dropped pre-history bound when
        with_tail is set.
        """
        x = as_vec3(x)
        cone = self._probe_cone(t, x, spec, s_floor)
        E = np.zeros(3)
        B = np.zeros(3)
        if cone is not None and cone.size:
            src = self.source_terms(t - cone.r, cone.y)
            rho, rho_t = src[:, 0], src[:, 1]
            jj, jt = src[:, 2:5], src[:, 5:8]
            om = cone.omega
            w1 = (cone.w / cone.r)[:, None]
            w2 = (cone.w / cone.r ** 2)[:, None]
            E = -np.sum(w2 * rho[:, None] * om, axis=0) \
                - np.sum(w1 * (rho_t[:, None] * om + jt), axis=0)
            B = np.sum(w2 * np.cross(om, jj), axis=0) \
                + np.sum(w1 * np.cross(om, jt), axis=0)
        val = FieldValue(E=E, B=B)
        if not with_tail:
            return val
        return val, self.tail_bound(t, x, s_floor)

    def _probe_cone(self, t: float, x: np.ndarray, spec: QuadratureSpec,
                    s_floor: Optional[float] = None):
        if t > self.s_max + 1e-9:
            raise QuadratureDomainViolation(
                f"probe time {t} is past the last source slice {self.s_max}")
        support = self.support
        a = support.speed
        xn = float(np.linalg.norm(x))
        r_hi = (support.x_radius + support.pad + xn + a * abs(t)) / (1.0 - a) + 0.5
        floor = self.s_min if s_floor is None else max(self.s_min, s_floor)
        r_hi = min(r_hi, t - floor)           # below the floor there is no data
        if r_hi <= 1e-12:
            return None
        return cone_rule(t, x, support.tube_radius, 0.0, r_hi, spec,
                         feature_scale=self._radial_feature(spec),
                         breakpoints=t - self.times[::-1],
                         angular_target=self._angular_feature())

    def field_many(self, ts: np.ndarray, xs: np.ndarray, spec: QuadratureSpec,
                   chunk_rows: int = 1_500_000, s_floor: Optional[float] = None,
                   progress: Optional[Callable[[str], None]] = None
                   ) -> Tuple[np.ndarray, np.ndarray]:
        """Fields at many probes with batched source interpolation.

        Builds each probe's cone rule, concatenates the rows, and runs
        source_terms once per chunk; the per-probe sums come back through
        bincount on probe ids.  Agrees with field_at to floating-point
        roundoff (bincount accumulates in row order, np.sum pairwise).
        """
        ts = np.asarray(ts, dtype=float)
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        n_probe = ts.size
        E = np.zeros((n_probe, 3))
        B = np.zeros((n_probe, 3))
        buf: List[tuple] = []
        buf_rows = 0

        def flush():
            nonlocal buf, buf_rows
            if not buf:
                return
            ids = np.concatenate([np.full(c.r.size, i, dtype=np.int64)
                                  for i, c in buf])
            r = np.concatenate([c.r for _, c in buf])
            y = np.concatenate([c.y for _, c in buf])
            om = np.concatenate([c.omega for _, c in buf])
            w = np.concatenate([c.w for _, c in buf])
            s_rows = ts[ids] - r
            src = self.source_terms(s_rows, y)
            rho, rho_t = src[:, 0], src[:, 1]
            jj, jt = src[:, 2:5], src[:, 5:8]
            w1 = w / r
            w2 = w / r ** 2
            omxj = np.cross(om, jj)
            omxjt = np.cross(om, jt)
            for c in range(3):
                E[:, c] -= np.bincount(
                    ids, weights=w2 * rho * om[:, c]
                    + w1 * (rho_t * om[:, c] + jt[:, c]), minlength=n_probe)
                B[:, c] += np.bincount(
                    ids, weights=w2 * omxj[:, c] + w1 * omxjt[:, c],
                    minlength=n_probe)
            buf = []
            buf_rows = 0

        for i in range(n_probe):
            cone = self._probe_cone(float(ts[i]), xs[i], spec, s_floor)
            if cone is None or not cone.size:
                continue
            buf.append((i, cone))
            buf_rows += cone.r.size
            if buf_rows >= chunk_rows:
                flush()
                if progress is not None:
                    progress(f"probe {i + 1}/{n_probe}")
        flush()
        return E, B

    def _combine(self, other: "MomentStack", sign: float) -> "MomentStack":
        if self.times.size != other.times.size or \
                not np.allclose(self.times, other.times, atol=1e-12):
            raise ConfigError("stack arithmetic needs identical slice times")
        return MomentStack([a._combine(b, sign)
                            for a, b in zip(self.slices, other.slices)],
                           self.support)

    def subtract(self, other: "MomentStack") -> "MomentStack":
        """Slice-wise difference of two stacks on identical grids.

        Used to measure consecutive-iterate field differences: moments
        deposited from the same cloud through two flows share their
        deposition error, so the difference is far more accurate than
        differencing two independently probed fields.  The nonlinear
        channels (f_sq, f_max) are plain differences and only meaningful
        for bookkeeping.
        """
        return self._combine(other, -1.0)

    def add(self, other: "MomentStack") -> "MomentStack":
        """Slice-wise sum; composes a base stack with difference stacks
        so later iterates get a single field evaluator."""
        return self._combine(other, 1.0)

    def add_partial(self, other: "MomentStack") -> "MomentStack":
        """Sum with a stack whose slice times are a subset of this one's
        (shared time arrays, so matching is exact); uncovered slices pass
        through.  Lets a shallow difference stack correct a deeper base
        history, treating the difference as zero where it was never
        deposited."""
        pos = {float(t): k for k, t in enumerate(self.times)}
        out = list(self.slices)
        for sl, t in zip(other.slices, other.times):
            k = pos.get(float(t))
            if k is None:
                raise ConfigError(f"no matching slice at s = {t}")
            out[k] = self.slices[k]._combine(sl, 1.0)
        return MomentStack(out, self.support)

    def compact(self) -> "MomentStack":
        for sl in self.slices:
            sl.compact()
        return self

    def _radial_feature(self, spec: QuadratureSpec):
        support = self.support
        return lambda s: max(spec.radial_panel_width,
                             0.1 * support.tube_radius(s))

    def _angular_feature(self):
        # sources keep the initial core scale while young, then disperse
        sigma0 = 0.35 * self.support.x_radius
        return lambda s: max(sigma0, 0.12 * (1.0 + abs(s)))

    def tail_bound(self, t: float, x, s_floor: Optional[float] = None) -> float:
        """Bound on the dropped |field| contribution from s below the
        history floor.

        Cone measures int dy/r^2 and int dy/r over the dropped shell,
        against the largest source channels on the first retained slice
        (the sources decay going further back, so this is conservative in
        the regime the solver runs in).
        """
        x = as_vec3(x)
        xn = float(np.linalg.norm(x))
        support = self.support
        a = support.speed
        floor = self.s_min if s_floor is None else max(self.s_min, s_floor)
        r0 = t - floor
        r_hi = (support.x_radius + support.pad + xn + a * abs(t)) / (1.0 - a) + 0.5
        if r0 >= r_hi or r0 <= 0.0:
            return 0.0
        frontier = self.slice_at(floor).src
        sup_near = max(float(np.max(np.abs(frontier[..., 0]))),
                       float(np.max(np.linalg.norm(frontier[..., 2:5], axis=-1))))
        sup_far = (float(np.max(np.abs(frontier[..., 1])))
                   + float(np.max(np.linalg.norm(frontier[..., 5:8], axis=-1))))
        if sup_near == 0.0 and sup_far == 0.0:
            return 0.0

        def area(r):
            rho = support.tube_radius(t - r)
            if xn < 1e-12:
                cap = 2.0 if r <= rho else 0.0
            else:
                c = (r * r + xn * xn - rho * rho) / (2.0 * r * xn)
                cap = np.clip(1.0 - c, 0.0, 2.0)
            return 2.0 * np.pi * r * r * cap

        meas1, _ = integrate.quad(lambda r: area(r) / r, r0, r_hi, limit=200)
        meas2, _ = integrate.quad(lambda r: area(r) / r ** 2, r0, r_hi, limit=200)
        return float(sup_near * meas2 + sup_far * meas1)

    # --- bulk integrals ----------------------------------------------------
    def scalar_series(self, which: str) -> Tuple[np.ndarray, np.ndarray]:
        """(times, integrals) of rho, e_kin or f_sq across slices."""
        vals = np.array([s.integrate_scalar(which) for s in self.slices])
        return self.times.copy(), vals

    def slice_at(self, s: float) -> MomentSlice:
        i = int(np.argmin(np.abs(self.times - s)))
        return self.slices[i]
