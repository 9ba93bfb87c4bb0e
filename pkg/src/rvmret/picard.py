"""Iteration driver: alternate density transport and field solves until
the field tables stop moving.

Each round starts from the free-streaming density, whose moments are
closed-form, and builds its retarded field on a space-time grid.  Later
densities are never tabulated in phase space: a fixed 6-D quadrature
cloud of the initial support is pushed forward through the previous
field table, and the moment slices are deposited from the cloud
(particle weights are conserved along characteristics).  Successive
field corrections are measured from difference stacks, i.e. moments of
f_{n+1} - f_n deposited from the same cloud through the two flows, so
the deposition bias common to both flows cancels and the correction is
resolved far below the deposit noise of either iterate alone.  The
iterate tables are then

    F_1 = quadrature table of the free-streaming moments,
    F_{n+1} = F_n + table of the difference-stack field,

and the contraction monitor reads the weighted sup norms of the
difference tables directly.  Difference fields are smooth and O(delta)
small, so their tables are filled on a 2x coarser lattice and refined
by linear interpolation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .characteristics import advect_batch
from .core import InitialData, a_of_beta, p_hat
from .errors import ConfigError, InfeasibleBudget, NonContraction
from .fields import FieldTable, ZeroField
from .moments import (MomentStack, deposit_slice, graded_times,
                      grid_points_for)
from .quad import QuadratureSpec as ConeQuadrature
from .retarded_field import SupportMeta

MOMENT_CHANNELS = 26          # floats per slice node before compaction


@dataclass
class QuadratureSpec:
    """Every numerical knob of a run: cone quadrature, grid extents,
    slice grading, history depths, cloud resolution, and stopping rule.

    The cone-level node counts live in .cone; everything else shapes the
    iteration itself.  Defaults are the acceptance-scale configuration.
    """

    cone: ConeQuadrature = field(default_factory=lambda: ConeQuadrature(
        p_nodes=8, theta_nodes=6, phi_nodes=12, radial_panel_width=0.6,
        radial_panel_nodes=3, angular_max_factor=4))
    t_min: float = -4.0
    t_max: float = 4.0
    half_width: float = 6.0
    n_t: int = 33
    n_x: int = 25
    tolerance: float = 1e-3       # relative to the first field's norm
    max_iterations: int = 3
    history_depth: float = 20.0   # source slices reach t_min - history_depth
    ds_near: float = 0.4
    ds_growth: float = 0.2
    table_floor: float = 8.0      # per-probe history cut for core fills
    outer_floor: float = 16.0     # deeper cut for the coarse outer lattice
    core_margin: float = 1.5      # halo beyond the support tube kept fine
    coarse_stride: int = 2
    cloud_x_nodes: int = 16
    cloud_p_nodes: int = 10
    flow_step: float = 0.2
    support_pad: float = 0.2
    memory_cap_gb: float = 3.5
    seed: int = 0

    def validate(self, init: InitialData) -> None:
        if self.t_min >= self.t_max:
            raise ConfigError("t_min must be below t_max")
        if self.n_t < 2 or self.n_x < 2:
            raise ConfigError("grid needs at least 2 nodes per axis")
        if self.half_width <= 0 or self.tolerance <= 0:
            raise ConfigError("half_width and tolerance must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        # the grid must contain the transported support for every grid t
        a = a_of_beta(2.0 * init.R)
        need = init.R + a * max(abs(self.t_min), abs(self.t_max))
        if self.half_width < need:
            raise ConfigError(
                f"half_width {self.half_width} does not contain the "
                f"support radius {need:.3f} at the grid edge")

    def t_axis(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.n_t)

    def x_axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.n_x)


@dataclass
class IterateRecord:
    """One iterate's field table and contraction bookkeeping."""

    n: int
    field: FieldTable
    norm_w34: float
    norm_w1: float
    delta_norm: float             # weighted distance to the previous iterate
    contraction_ratio: Optional[float]
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> Dict:
        out = {"n": self.n, "norm_w34": self.norm_w34,
               "norm_w1": self.norm_w1, "delta_norm": self.delta_norm,
               "contraction_ratio": self.contraction_ratio}
        out.update(self.diagnostics)
        return {k: (float(v) if isinstance(v, (float, np.floating))
                    else int(v) if isinstance(v, (int, np.integer))
                    else v) for k, v in out.items()}


@dataclass
class IterExtent:
    """Space-time region iterate n must be known on."""

    n: int
    t_lo: float
    t_hi: float
    radius: float
    est_bytes: int


@dataclass
class RunResult:
    records: List[IterateRecord]
    converged: bool
    init: InitialData
    support: SupportMeta
    spec: QuadratureSpec
    source_stack: Optional[MomentStack]   # converged-density moments
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def final_field(self) -> FieldTable:
        return self.records[-1].field


# --- closed forms -----------------------------------------------------------

def free_streaming_density(t, x, p, init: InitialData) -> np.ndarray:
    """First-iterate density: the initial data transported along straight
    lines, f(t,x,p) = f_in(x - p_hat(p) t, p)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    P = np.atleast_2d(np.asarray(p, dtype=float))
    ts = np.asarray(t, dtype=float)
    shift = ts[..., None] if ts.ndim else ts
    vals = init.value(X - shift * p_hat(P), P)
    return vals if np.ndim(x) > 1 else float(vals[0])


def _free_streaming_batch(init: InitialData) -> Callable:
    def f_batch(ts, Y, P):
        return free_streaming_density(ts, Y, P, init)
    return f_batch


# --- domain bookkeeping -----------------------------------------------------

def domain_chain(spec: QuadratureSpec, n_iter: int,
                 support: SupportMeta) -> List[IterExtent]:
    """Extent each iterate must be known on, outermost first.

    Chained backward from the output grid: iterate n's table is probed on
    the grid; each probe integrates sources over a cone of radius at most
    r_max, and the sources live on the support tube, so the chained hull
    is the smaller of the cone hull and the tube hull.  The zero-field
    outside policy truncates anything beyond; its size is reported by the
    field table's tail metadata rather than asserted here.
    """
    if n_iter < 1:
        raise ConfigError("n_iter must be at least 1")
    a = support.speed
    corner = np.sqrt(3.0) * spec.half_width
    t_lo = spec.t_min - spec.history_depth
    t_hi = spec.t_max + spec.ds_near
    extents = []
    radius = corner
    cap = spec.memory_cap_gb * 1e9
    for n in range(n_iter, 0, -1):
        r_cone = (support.x_radius + support.pad + radius
                  + a * max(abs(spec.t_min), abs(spec.t_max))) / (1.0 - a)
        tube_hull = support.tube_radius(t_lo)
        radius = min(max(radius, r_cone), max(corner, tube_hull))
        n_slices = graded_times(t_lo, t_hi, spec.ds_near, spec.ds_growth).size
        pts = grid_points_for(support)
        worst = max(pts(t_lo), pts(t_hi)) + 4
        est = n_slices * worst ** 3 * MOMENT_CHANNELS * 8
        if est > cap:
            raise InfeasibleBudget(
                f"iterate {n} needs ~{est / 1e9:.2f} GB of moment slices, "
                f"cap is {spec.memory_cap_gb} GB")
        extents.append(IterExtent(n=n, t_lo=t_lo, t_hi=t_hi,
                                  radius=radius, est_bytes=est))
    extents.reverse()
    for k in range(1, len(extents)):
        # later iterates never need more than earlier ones feed them
        extents[k].radius = min(extents[k].radius, extents[k - 1].radius)
    return extents


# --- weighted norms ---------------------------------------------------------

def _node_weights(table: FieldTable, w: float) -> np.ndarray:
    tt = table.t_axis()
    ax = table.x_axis()
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    rad = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    v = 1.0 + np.abs(tt)[:, None, None, None] + rad[None]
    u = 1.0 + np.abs(tt[:, None, None, None] - rad[None])
    return v * u ** w


def weighted_norm(table: FieldTable, w: float) -> float:
    """Grid sup of (1+|t|+|x|)(1+|t-|x||)^w |F| over the table nodes."""
    if w <= 0:
        raise ConfigError("weight exponent must be positive")
    mag = np.linalg.norm(table.data, axis=-1)
    return float(np.max(_node_weights(table, w) * mag))


def gradient_norm_w1(table: FieldTable) -> float:
    """Same norm with w = 1 on the finite-difference spatial gradient."""
    dx = table.dx
    grads = [np.gradient(table.data[..., c], dx, axis=ax)
             for ax in (1, 2, 3) for c in range(6)]
    mag = np.sqrt(np.sum(np.stack(grads) ** 2, axis=0))
    return float(np.max(_node_weights(table, 1.0) * mag))


# --- table construction -----------------------------------------------------

_C4V = []
for _swap in (False, True):
    for _s1 in (1, -1):
        for _s2 in (1, -1):
            if _swap:
                _R = np.array([[0.0, _s1, 0.0], [_s2, 0.0, 0.0],
                               [0.0, 0.0, 1.0]])
            else:
                _R = np.array([[_s1, 0.0, 0.0], [0.0, _s2, 0.0],
                               [0.0, 0.0, 1.0]])
            _C4V.append((_R, float(np.linalg.det(_R))))


def _symmetry_applicable(init: InitialData, spec: QuadratureSpec) -> bool:
    d = np.asarray(init.p_center, dtype=float)
    return (spec.n_x % 2 == 1 and abs(d[0]) < 1e-14 and abs(d[1]) < 1e-14)


def build_field_table(stack: MomentStack, spec: QuadratureSpec,
                      init: InitialData, *, coarse: bool = False,
                      symmetry: Optional[bool] = None,
                      progress: Optional[Callable[[str], None]] = None
                      ) -> FieldTable:
    """Fill a field table from a moment stack.

    Two-resolution fill: nodes inside the support tube plus core_margin
    (where characteristics actually run) are all evaluated; outside, only
    a stride-2 sublattice in t and x is evaluated and the rest is linear
    interpolation, since the outer field is smooth and entering the norms
    through small values.  With symmetry on, only a quarter-plane wedge
    of (x1, x2) columns is evaluated and the rest is produced by the
    square-symmetry transforms (exact for drift along x3).  coarse=True
    builds the half-resolution table used for difference fields.
    """
    if symmetry is None:
        symmetry = _symmetry_applicable(init, spec)
    n_t, n_x = spec.n_t, spec.n_x
    if coarse:
        if n_t % 2 == 0 or n_x % 2 == 0:
            raise ConfigError("coarse tables need odd node counts to nest")
        n_t = (n_t + 1) // 2
        n_x = (n_x + 1) // 2
    t_ax = np.linspace(spec.t_min, spec.t_max, n_t)
    x_ax = np.linspace(-spec.half_width, spec.half_width, n_x)
    dt = t_ax[1] - t_ax[0]
    dx = x_ax[1] - x_ax[0]
    support = stack.support
    floor_core = spec.t_min - spec.table_floor
    floor_outer = spec.t_min - spec.outer_floor

    X, Y, Z = np.meshgrid(x_ax, x_ax, x_ax, indexing="ij")
    rad = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    c = (n_x - 1) // 2
    ii = np.arange(n_x)
    if symmetry and n_x % 2 == 1:
        ai = ii - c
        canon2d = (ai[:, None] >= 0) & (ai[None, :] >= 0) \
            & (ai[:, None] >= ai[None, :])
    else:
        symmetry = False
        canon2d = np.ones((n_x, n_x), dtype=bool)

    stride_ok_x = np.zeros(n_x, dtype=bool)
    stride_ok_x[::spec.coarse_stride] = True
    stride_ok_t = np.zeros(n_t, dtype=bool)
    stride_ok_t[::spec.coarse_stride] = True
    coarse3d = stride_ok_x[:, None, None] & stride_ok_x[None, :, None] \
        & stride_ok_x[None, None, :]

    data = np.zeros((n_t, n_x, n_x, n_x, 6))
    filled = np.zeros((n_t, n_x, n_x, n_x), dtype=bool)
    n_direct = 0
    t_build = time.time()
    for it, t in enumerate(t_ax):
        core3d = rad <= support.tube_radius(t) + spec.core_margin
        sel_core = core3d & canon2d[:, :, None]
        sel_outer = coarse3d & canon2d[:, :, None] & ~sel_core \
            if stride_ok_t[it] else np.zeros_like(sel_core)
        for sel, floor in ((sel_core, floor_core), (sel_outer, floor_outer)):
            idx = np.argwhere(sel)
            if idx.size == 0:
                continue
            pts = np.stack([x_ax[idx[:, 0]], x_ax[idx[:, 1]],
                            x_ax[idx[:, 2]]], axis=1)
            E, B = stack.field_many(np.full(idx.shape[0], t), pts,
                                    spec.cone, s_floor=floor)
            n_direct += idx.shape[0]
            if not symmetry:
                data[it, idx[:, 0], idx[:, 1], idx[:, 2], :3] = E
                data[it, idx[:, 0], idx[:, 1], idx[:, 2], 3:] = B
                filled[it, idx[:, 0], idx[:, 1], idx[:, 2]] = True
                continue
            a = idx[:, 0] - c
            b = idx[:, 1] - c
            for R, det in _C4V:
                pi = np.rint(R[0, 0] * a + R[0, 1] * b).astype(int) + c
                pj = np.rint(R[1, 0] * a + R[1, 1] * b).astype(int) + c
                data[it, pi, pj, idx[:, 2], :3] = E @ R.T
                data[it, pi, pj, idx[:, 2], 3:] = det * (B @ R.T)
                filled[it, pi, pj, idx[:, 2]] = True
        if progress is not None and (it % 8 == 7 or it == n_t - 1):
            done = 100.0 * (it + 1) / n_t
            progress(f"table fill {done:.0f}% ({n_direct} direct probes)")

    # linear refinement of the outer region from the coarse sublattice
    if spec.coarse_stride == 2 and np.any(~filled):
        cdata = data[::2][:, ::2][:, :, ::2][:, :, :, ::2]
        for axis in (0, 1, 2, 3):
            cdata = _upsample_axis(cdata, axis)
        data[~filled] = cdata[~filled]
    elif np.any(~filled):
        raise ConfigError("unfilled table nodes without a stride-2 lattice")

    meta = {"n_direct": int(n_direct), "symmetry": bool(symmetry),
            "coarse": bool(coarse), "floor_core": float(floor_core),
            "floor_outer": float(floor_outer),
            "fill_seconds": float(time.time() - t_build),
            "tail_bound_worst": float(stack.tail_bound(
                spec.t_min, np.array([spec.half_width, 0.0, 0.0]),
                floor_outer))}
    return FieldTable(t0=float(t_ax[0]), dt=float(dt), x0=float(x_ax[0]),
                      dx=float(dx), data=data, meta=meta)


def _upsample_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """Insert midpoint averages along one axis (length m -> 2m - 1)."""
    arr = np.moveaxis(arr, axis, 0)
    m = arr.shape[0]
    out = np.empty((2 * m - 1,) + arr.shape[1:], dtype=arr.dtype)
    out[::2] = arr
    out[1::2] = 0.5 * (arr[:-1] + arr[1:])
    return np.moveaxis(out, 0, axis)


def refine_table(coarse: FieldTable, spec: QuadratureSpec) -> FieldTable:
    """Linear interpolation of a coarse difference table onto the full
    grid; exact at the shared nodes."""
    data = coarse.data
    for axis in (0, 1, 2, 3):
        data = _upsample_axis(data, axis)
    if data.shape[0] != spec.n_t or data.shape[1] != spec.n_x:
        raise ConfigError("refined table does not match the run grid")
    return FieldTable(t0=coarse.t0, dt=coarse.dt / 2.0, x0=coarse.x0,
                      dx=coarse.dx / 2.0, data=data,
                      meta=dict(coarse.meta, refined=True))


def add_tables(a: FieldTable, b: FieldTable) -> FieldTable:
    if a.data.shape != b.data.shape:
        raise ConfigError("table addition needs identical grids")
    return FieldTable(t0=a.t0, dt=a.dt, x0=a.x0, dx=a.dx,
                      data=a.data + b.data,
                      meta={"sum_of": [a.meta.get("n_direct"),
                                       b.meta.get("n_direct")]})


# --- density transport ------------------------------------------------------

def density_from_table(t, x, p, table_prev: Optional[FieldTable],
                       init: InitialData, step: float = 0.05) -> np.ndarray:
    """Density of the next iterate: backward characteristics through the
    previous field table, then the initial data at their feet."""
    if table_prev is None:
        return free_streaming_density(t, x, p, init)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    P = np.atleast_2d(np.asarray(p, dtype=float))
    X0, P0 = advect_batch(float(t), 0.0, X, P, table_prev, step)
    vals = init.value(X0, P0)
    return vals if np.ndim(x) > 1 else float(vals[0])


def build_cloud(init: InitialData, n_x: int, n_p: int
                ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cell-centered 6-D quadrature cloud over the initial support box;
    nodes outside the support (f_in = 0) are dropped."""
    rx = init.x_radius
    rp = init.p_radius
    ctr = np.asarray(init.p_center, dtype=float)
    ax = (np.arange(n_x) + 0.5) / n_x * 2.0 * rx - rx
    ap = (np.arange(n_p) + 0.5) / n_p * 2.0 * rp - rp
    X0 = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    P0 = np.stack(np.meshgrid(ap, ap, ap, indexing="ij"), -1).reshape(-1, 3) \
        + ctr
    X0 = np.repeat(X0, n_p ** 3, axis=0)
    P0 = np.tile(P0, (n_x ** 3, 1))
    w6 = np.full(X0.shape[0], (2.0 * rx / n_x) ** 3 * (2.0 * rp / n_p) ** 3)
    f0 = init.value(X0, P0)
    keep = f0 > 0.0
    return X0[keep], P0[keep], w6[keep], f0[keep]


def walk_flow(X0: np.ndarray, P0: np.ndarray, times: np.ndarray,
              fieldfn, step: float):
    """Yield (s, X, P) at each requested time, marching the cloud
    outward from t = 0 in both directions (so yields are not in time
    order; consumers must not assume it).  Only the current state is
    held.  fieldfn None means straight free-streaming lines (closed
    form, no integrator)."""
    times = np.asarray(times, dtype=float)
    if fieldfn is None:
        V = p_hat(P0)
        for s in times:
            yield float(s), X0 + s * V, P0
        return
    order = np.argsort(times)
    pos = [float(times[i]) for i in order if times[i] >= 0.0]
    neg = [float(times[i]) for i in order[::-1] if times[i] < 0.0]
    for branch in (pos, neg):
        X, P, t_cur = X0, P0, 0.0
        for s in branch:
            if abs(s - t_cur) > 1e-12:
                X, P = advect_batch(t_cur, s, X, P, fieldfn, step)
            t_cur = s
            yield s, X, P


def deposit_stack(times: np.ndarray, support: SupportMeta,
                  X0: np.ndarray, P0: np.ndarray, w6: np.ndarray,
                  f0: np.ndarray, fieldfn, spec: QuadratureSpec,
                  progress: Optional[Callable[[str], None]] = None
                  ) -> MomentStack:
    """Moment stack of the density transported by fieldfn, deposited
    from the cloud at each slice time."""
    pts = grid_points_for(support)
    slices = []
    for k, (s, X, P) in enumerate(walk_flow(X0, P0, times, fieldfn,
                                            spec.flow_step)):
        if fieldfn is None:
            K = None
        else:
            E, B = fieldfn.eval(s, X)
            K = E + np.cross(P / np.sqrt(1.0 + np.sum(P ** 2, -1))[:, None], B)
        slices.append(deposit_slice(s, support, X, P, w6, f0, K, pts(s)))
        if progress is not None and (k % 8 == 7 or k == times.size - 1):
            progress(f"deposit slice {k + 1}/{times.size}")
    return MomentStack(slices, support)


def flow_extrema(times: np.ndarray, X0: np.ndarray, P0: np.ndarray,
                 fieldfn, step: float, init: InitialData) -> Dict[str, float]:
    """Momentum and support extrema of a flow over the slice times.

    support_margin is max over times of |X| - (R + a(2R)|s|); the
    support bound holds iff it stays nonpositive.
    """
    a = a_of_beta(2.0 * init.R)
    p_max = 0.0
    margin = -np.inf
    for s, X, P in walk_flow(X0, P0, times, fieldfn, step):
        p_max = max(p_max, float(np.max(np.linalg.norm(P, axis=1))))
        r = float(np.max(np.linalg.norm(X, axis=1)))
        margin = max(margin, r - (init.R + a * abs(s)))
    return {"p_max": p_max, "support_margin": margin}


# --- the driver -------------------------------------------------------------

def run(init: InitialData, spec: Optional[QuadratureSpec] = None,
        progress: Optional[Callable[[str], None]] = None,
        out_dir: Optional[str] = None) -> RunResult:
    """Drive the iteration and return the records.

    Raises NonContraction if the weighted difference norms grow on two
    consecutive iterates.
    """
    spec = spec or QuadratureSpec()
    spec.validate(init)
    note = progress or (lambda msg: None)
    support = SupportMeta.from_initial(init, pad=spec.support_pad)
    timings: Dict[str, float] = {}
    s_lo = spec.t_min - spec.history_depth
    s_hi = spec.t_max + spec.ds_near
    domain_chain(spec, spec.max_iterations, support)     # budget gate

    t0 = time.time()
    stack1 = MomentStack.build(
        support, spec.cone, _free_streaming_batch(init), None, s_lo, s_hi,
        ds_near=spec.ds_near, ds_growth=spec.ds_growth,
        progress=lambda m: note(f"[stack 1] {m}"))
    timings["stack_1"] = time.time() - t0

    t0 = time.time()
    F1 = build_field_table(stack1, spec, init,
                           progress=lambda m: note(f"[table 1] {m}"))
    timings["table_1"] = time.time() - t0
    stack1.compact()

    norm1 = weighted_norm(F1, 0.75)
    rec1 = IterateRecord(
        n=1, field=F1, norm_w34=norm1, norm_w1=weighted_norm(F1, 1.0),
        delta_norm=norm1, contraction_ratio=None,
        diagnostics={"grad_norm_w1": gradient_norm_w1(F1),
                     "table_direct_probes": F1.meta["n_direct"],
                     "tail_bound_worst": F1.meta["tail_bound_worst"]})
    records = [rec1]
    converged = norm1 == 0.0
    note(f"iterate 1: |F1|_3/4 = {norm1:.4e}")

    if converged or spec.max_iterations == 1:
        _persist(out_dir, init, spec, records, timings, converged, stack1)
        return RunResult(records, converged, init, support, spec,
                         stack1, timings)

    X0, P0, w6, f0 = build_cloud(init, spec.cloud_x_nodes, spec.cloud_p_nodes)
    note(f"cloud: {X0.shape[0]} nodes")
    dep_floor = spec.t_min - spec.outer_floor
    dep_times = stack1.times[stack1.times >= dep_floor - 1e-9]

    t0 = time.time()
    dep_prev = deposit_stack(dep_times, support, X0, P0, w6, f0, None, spec,
                             progress=lambda m: note(f"[flow 1] {m}"))
    timings["deposit_1"] = time.time() - t0

    table_prev = F1
    stack_conv = stack1
    delta_prev = norm1
    grad_delta_prev = None
    rising = 0
    for n in range(2, spec.max_iterations + 1):
        t0 = time.time()
        dep_n = deposit_stack(dep_times, support, X0, P0, w6, f0,
                              table_prev, spec,
                              progress=lambda m: note(f"[flow {n}] {m}"))
        timings[f"deposit_{n}"] = time.time() - t0
        diff = dep_n.subtract(dep_prev)
        sub = slice(None, None, max(1, X0.shape[0] // 4000))
        ext = flow_extrema(dep_times, X0[sub], P0[sub], table_prev,
                           spec.flow_step, init)
        dep_prev = dep_n

        t0 = time.time()
        diff_coarse = build_field_table(
            diff, spec, init, coarse=True,
            progress=lambda m: note(f"[table {n}] {m}"))
        timings[f"table_{n}"] = time.time() - t0
        diff_full = refine_table(diff_coarse, spec)
        F_n = add_tables(table_prev, diff_full)

        delta = weighted_norm(diff_full, 0.75)
        grad_delta = gradient_norm_w1(diff_coarse)
        ratio = delta / delta_prev if delta_prev > 0 else 0.0
        grad_ratio = (grad_delta / grad_delta_prev
                      if grad_delta_prev else None)
        diag = {"grad_delta_norm_w1": grad_delta,
                "flow_p_max": ext["p_max"],
                "flow_support_margin": ext["support_margin"],
                "boundary_leak": max(s.boundary_leak for s in dep_n.slices),
                "table_direct_probes": diff_coarse.meta["n_direct"]}
        if grad_ratio is not None:
            diag["grad_contraction_ratio"] = grad_ratio
        records.append(IterateRecord(
            n=n, field=F_n, norm_w34=weighted_norm(F_n, 0.75),
            norm_w1=weighted_norm(F_n, 1.0), delta_norm=delta,
            contraction_ratio=ratio, diagnostics=diag))
        note(f"iterate {n}: delta = {delta:.4e}, ratio = {ratio:.3f}")

        stack_conv = stack_conv.add_partial(diff.compact())
        rising = rising + 1 if ratio > 1.0 else 0
        if rising >= 2:
            _persist(out_dir, init, spec, records, timings, False, stack_conv)
            raise NonContraction(
                f"difference norms grew twice in a row (last ratio {ratio:.3f})")
        table_prev = F_n
        delta_prev = delta
        grad_delta_prev = grad_delta
        if delta <= spec.tolerance * norm1:
            converged = True
            break

    _persist(out_dir, init, spec, records, timings, converged, stack_conv)
    return RunResult(records, converged, init, support, spec,
                     stack_conv, timings)


def _persist(out_dir, init, spec, records, timings, converged,
             stack=None) -> None:
    if out_dir is None:
        return
    import os
    os.makedirs(out_dir, exist_ok=True)
    from . import config as config_mod
    config_mod.save_snapshot(os.path.join(out_dir, "config.yaml"), init, spec)
    with open(os.path.join(out_dir, "iterates.jsonl"), "w") as fh:
        for rec in records:
            row = rec.summary()
            row["table_file"] = f"field_{rec.n:02d}.bin"
            fh.write(json.dumps(row) + "\n")
    for rec in records:
        rec.field.save(os.path.join(out_dir, f"field_{rec.n:02d}.bin"))
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump({"converged": bool(converged), "timings": timings,
                   "iterations": len(records)}, fh, indent=2)
    if stack is not None:
        rows = []
        for sl in stack.slices:
            thr = 1e-12 * max(sl.f_max, 1e-300)
            rows.append({
                "s": float(sl.s),
                "mass": sl.integrate_scalar("rho"),
                "e_kin": sl.integrate_scalar("e_kin"),
                "f_sq": sl.integrate_scalar("f_sq"),
                "f_max": float(sl.f_max),
                "volume": float(np.count_nonzero(sl.rho > thr) * sl.h ** 3),
                "rho_origin": float(sl.interp(np.zeros((1, 3)))[0, 0]),
            })
        with open(os.path.join(out_dir, "slices.json"), "w") as fh:
            json.dump(rows, fh, indent=1)


# --- characteristic difference monitor --------------------------------------

def char_difference_diagnostics(result: RunResult, n: int, m: int,
                                n_samples: int = 60, seed: int = 0,
                                step: float = 0.05) -> Dict[str, float]:
    """Sampled sups of the backward-characteristic differences between
    iterates n and m: density difference scaled by (1+|t|)^(1/4), foot
    position difference scaled by (1+|t|), and foot momentum difference.
    Iterate k's characteristics run through field table k-1 (zero for
    k = 1)."""
    if n < 1 or m < 1 or max(n, m) > len(result.records):
        raise ConfigError("iterate indices out of range")
    init = result.init
    rng = np.random.default_rng(seed)
    tables = {1: None}
    for rec in result.records:
        tables[rec.n + 1] = rec.field
    t_hi = result.spec.t_max

    out = {"df": 0.0, "dx0": 0.0, "dp0": 0.0}
    for t in (0.25 * t_hi, 0.5 * t_hi, t_hi):
        X = rng.uniform(-init.x_radius, init.x_radius, (n_samples, 3))
        P = np.asarray(init.p_center) \
            + rng.uniform(-init.p_radius, init.p_radius, (n_samples, 3))
        V = p_hat(P)
        Xt = X + t * V                   # ride the support downstream
        feet = []
        for k in (n, m):
            fieldfn = tables[k] if tables[k] is not None else ZeroField()
            feet.append(advect_batch(t, 0.0, Xt, P, fieldfn, step))
        (Xn, Pn), (Xm, Pm) = feet
        df = np.abs(init.value(Xn, Pn) - init.value(Xm, Pm))
        out["df"] = max(out["df"], float(np.max(df)) / (1.0 + t) ** 0.25)
        dx = np.linalg.norm(Xn - Xm, axis=1)
        out["dx0"] = max(out["dx0"], float(np.max(dx)) / (1.0 + t))
        out["dp0"] = max(out["dp0"], float(np.max(np.linalg.norm(Pn - Pm,
                                                                 axis=1))))
    return out
