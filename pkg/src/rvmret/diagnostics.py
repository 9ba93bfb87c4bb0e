"""Verification diagnostics for converged runs.

Everything here consumes the common field interface (``eval(t, X) ->
(E, B)``) or a moment stack, so the same checks run against interpolated
tables, direct retarded-integral evaluators, and analytic control
fields.  Reports are plain dataclasses; ``export_json`` and
``export_csv`` serialize any of them.

The checks mirror the a-priori structure of the small-data solution:
kinetic plus field energy stays flat, the field decays in both the
absolute time-space weight and the interior weight, the incoming part
of the radiation flux vanishes with growing sphere radius, and the
L2 field mass shrinks toward the far past.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, is_dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import gamma_of_p
from .errors import ConfigError, DomainExceeded, IllConditioned
from .fields import FieldTable

__all__ = [
    "DecayFit", "EnergyReport", "RadiationReport", "FscReport",
    "ConservationReport", "SupportReport", "PastMonotonicityReport",
    "StackField", "energies", "incoming_radiation", "decay_fit",
    "decay_probe_ladder", "field_decay_samples", "fsc_check",
    "lp_conservation",
    "support_volume", "uniqueness_class_check", "export_json",
    "export_csv",
]


# --- report types ------------------------------------------------------------

@dataclass
class DecayFit:
    """Power-law fit |F| ~ C (1+|t|+|x|)^-alpha1 (1+|t-|x||)^-alpha2."""
    C: float
    alpha1: float
    alpha2: float
    residual: float                # rms misfit of log|F|
    n_points: int = 0


@dataclass
class EnergyReport:
    t: float
    kinetic: float                 # integral of sqrt(1+|p|^2) f
    field_energy: float            # (1/2) integral of |E|^2 + |B|^2
    total: float

    def __post_init__(self):
        if min(self.kinetic, self.field_energy, self.total) < 0.0:
            raise ConfigError(f"negative energy at t = {self.t}")


@dataclass
class RadiationReport:
    radii: Tuple[float, ...]
    incoming: Tuple[float, ...]    # per radius, over the advanced-time window
    incoming_extrapolated: float   # 1/r -> 0 limit
    outgoing: float                # reference flux over a retarded-time window
    outgoing_radius: float
    v_window: Tuple[float, float]
    u_window: Tuple[float, float]

    @property
    def ratio_to_outgoing(self) -> float:
        if self.outgoing == 0.0:
            return np.inf if self.incoming_extrapolated != 0.0 else 0.0
        return abs(self.incoming_extrapolated) / abs(self.outgoing)


@dataclass
class FscReport:
    eta: float                     # smallest constant closing the bound
    alpha: float
    n_samples: int
    worst_t: float
    worst_x: Tuple[float, float, float]


@dataclass
class ConservationReport:
    p: str                         # "1", "2" or "inf"
    times: Tuple[float, ...]
    norms: Tuple[float, ...]
    max_rel_drift: float


@dataclass
class SupportReport:
    times: Tuple[float, ...]
    volumes: Tuple[float, ...]
    ball_volume: float             # initial-support comparison volume
    origin_density: Tuple[float, ...]
    origin_exponent: float         # fitted d log rho(t,0) / d log |t|


@dataclass
class PastMonotonicityReport:
    times: Tuple[float, ...]
    l2_norms: Tuple[float, ...]
    peak_index: int
    backward_increase_max: float   # worst norm increase going toward t_min


# --- field adapters ----------------------------------------------------------

class StackField:
    """eval(t, X) view of a moment stack's retarded field."""

    def __init__(self, stack, cone, s_floor: Optional[float] = None):
        self.stack = stack
        self.cone = cone
        self.s_floor = s_floor

    def eval(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ts = np.broadcast_to(np.asarray(t, dtype=float), X.shape[0])
        return self.stack.field_many(np.array(ts), X, self.cone,
                                     s_floor=self.s_floor)


def _table_domain_guard(field, t: float, r: float) -> None:
    if isinstance(field, FieldTable):
        if not (field.t0 - 1e-12 <= t <= field.t_max + 1e-12):
            raise DomainExceeded(
                f"probe time {t:.3f} outside table range "
                f"[{field.t0:.3f}, {field.t_max:.3f}]")
        if r > field.x_max + 1e-12:
            raise DomainExceeded(
                f"sphere radius {r:.3f} outside table half-width "
                f"{field.x_max:.3f}")


# --- energy accounting -------------------------------------------------------

def _trapz_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _field_energy_at(table: FieldTable, t: float) -> float:
    """(1/2) integral over the table cube of |E|^2 + |B|^2, trapezoid in
    each axis, the field linearly interpolated in time first."""
    taxis = table.t_axis()
    if not (taxis[0] - 1e-12 <= t <= taxis[-1] + 1e-12):
        raise DomainExceeded(f"energy time {t:.3f} outside table range")
    i = int(np.clip(np.searchsorted(taxis, t) - 1, 0, table.nt - 2))
    th = (t - taxis[i]) / table.dt
    plane = (1.0 - th) * table.data[i] + th * table.data[i + 1]
    w = _trapz_weights(table.nx, table.dx)
    w3 = w[:, None, None] * w[None, :, None] * w[None, None, :]
    return 0.5 * float(np.sum(w3 * np.sum(plane ** 2, axis=-1)))


def energies(stack, table: Optional[FieldTable] = None,
             times: Optional[Sequence[float]] = None) -> List[EnergyReport]:
    """Kinetic and field energy over time.

    Kinetic energy comes from the stack's slice moments; the field part
    integrates the table over its cube (zero when no table is given, as
    for a pure transport flow).  Times default to the stack slice times,
    clipped to the table's range when there is one.
    """
    if times is None:
        times = [s.s for s in stack.slices]
        if table is not None:
            times = [t for t in times
                     if table.t0 - 1e-12 <= t <= table.t_max + 1e-12]
    by_time = {s.s: s for s in stack.slices}
    out = []
    for t in times:
        if t not in by_time:
            raise ConfigError(f"no moment slice at t = {t}")
        kin = by_time[t].integrate_scalar("e_kin")
        fld = _field_energy_at(table, t) if table is not None else 0.0
        out.append(EnergyReport(t=float(t), kinetic=kin, field_energy=fld,
                                total=kin + fld))
    return out


# --- radiation flux ----------------------------------------------------------

def _sphere_rule(n_theta: int, n_phi: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre in cos(theta) times uniform phi; weights sum 4 pi."""
    mu, wm = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    st = np.sqrt(1.0 - mu ** 2)
    omega = np.stack([
        np.outer(st, np.cos(phi)).ravel(),
        np.outer(st, np.sin(phi)).ravel(),
        np.outer(mu, np.ones(n_phi)).ravel()], axis=-1)
    w = np.outer(wm, np.full(n_phi, 2.0 * np.pi / n_phi)).ravel()
    return omega, w


def _poynting_flux(field, t: float, r: float, omega: np.ndarray,
                   w: np.ndarray) -> float:
    E, B = field.eval(t, r * omega)
    return r ** 2 * float(np.sum(w * np.sum(np.cross(E, B) * omega, axis=1)))


def incoming_radiation(field, radii: Sequence[float] = (6.0, 8.0, 10.0),
                       v_window: Tuple[float, float] = (-2.5, -0.5),
                       outgoing_radius: float = 4.9,
                       u_window: Optional[Tuple[float, float]] = None,
                       n_time: int = 9, n_theta: int = 12,
                       n_phi: int = 24) -> RadiationReport:
    """Split the radiation flux through large spheres by null direction.

    For each radius the Poynting flux is integrated over the advanced
    time window (t = v - r), which tracks energy falling inward from
    infinity; the limit in r is taken by one Aitken delta-squared step,
    which cancels the leading power law without assuming its rate (a
    1/r fit handles two-radius calls).  A reference outgoing energy is
    measured once on the matching retarded window (t = u + r, same
    window values unless u_window overrides).  Probing a field table
    outside its domain raises DomainExceeded.
    """
    if len(radii) < 2:
        raise ConfigError("incoming extrapolation needs at least two radii")
    omega, w = _sphere_rule(n_theta, n_phi)
    vs = np.linspace(v_window[0], v_window[1], n_time)
    dv = vs[1] - vs[0]
    incoming = []
    for r in radii:
        for v in (vs[0], vs[-1]):
            _table_domain_guard(field, v - r, r)
        flux = np.array([_poynting_flux(field, v - r, r, omega, w)
                         for v in vs])
        e_in = -float(np.trapezoid(flux, dx=dv))
        incoming.append(e_in)
    e = np.asarray(incoming)
    if e.size >= 3:
        d1, d2 = e[-2] - e[-3], e[-1] - e[-2]
        den = d2 - d1
        if abs(den) > 1e-14 * max(abs(e[-1]), 1e-300):
            extrap = float(e[-1] - d2 * d2 / den)
        else:
            extrap = float(e[-1])
    else:
        A = np.stack([np.ones(e.size), 1.0 / np.asarray(radii)], axis=-1)
        coef, *_ = np.linalg.lstsq(A, e, rcond=None)
        extrap = float(coef[0])

    uw = v_window if u_window is None else u_window
    us = np.linspace(uw[0], uw[1], n_time)
    for u in (us[0], us[-1]):
        _table_domain_guard(field, u + outgoing_radius, outgoing_radius)
    oflux = np.array([_poynting_flux(field, u + outgoing_radius,
                                     outgoing_radius, omega, w) for u in us])
    e_out = float(np.trapezoid(oflux, dx=us[1] - us[0]))
    return RadiationReport(
        radii=tuple(float(r) for r in radii),
        incoming=tuple(incoming),
        incoming_extrapolated=extrap,
        outgoing=e_out, outgoing_radius=float(outgoing_radius),
        v_window=(float(v_window[0]), float(v_window[1])),
        u_window=(float(us[0]), float(us[-1])))


# --- decay fitting -----------------------------------------------------------

def decay_fit(ts: np.ndarray, xs: np.ndarray,
              values: np.ndarray) -> DecayFit:
    """Least-squares fit of the two-weight decay model in log space.

    values may be (m,) magnitudes or (m, k) components (then the
    euclidean magnitude is fit).  Probes where the magnitude vanishes
    are dropped; a probe set that cannot pin down both exponents raises
    IllConditioned.
    """
    ts = np.asarray(ts, dtype=float)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    values = np.asarray(values, dtype=float)
    mag = np.linalg.norm(values, axis=1) if values.ndim > 1 else np.abs(values)
    keep = mag > 0.0
    if np.count_nonzero(keep) < 4:
        raise IllConditioned("need at least four probes with nonzero field")
    r = np.linalg.norm(xs[keep], axis=1)
    w1 = np.log1p(np.abs(ts[keep]) + r)
    # second weight uses t - |x|, not |t| - |x|: for t < 0 it equals the
    # first weight, so past probes only pin the exponent sum
    w2 = np.log1p(np.abs(ts[keep] - r))
    A = np.stack([np.ones(w1.size), -w1, -w2], axis=-1)
    b = np.log(mag[keep])
    coef, res, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    if rank < 3 or sv[0] > 1e8 * max(sv[-1], 1e-300):
        raise IllConditioned("probe weights do not separate the exponents")
    misfit = A @ coef - b
    return DecayFit(C=float(np.exp(coef[0])), alpha1=float(coef[1]),
                    alpha2=float(coef[2]),
                    residual=float(np.sqrt(np.mean(misfit ** 2))),
                    n_points=int(w1.size))


_LADDER_DIRS = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [-0.70710678118654752, 0.70710678118654752, 0.0],
    [0.6, 0.0, -0.8],
    [0.0, -0.91651513899116799, 0.4],
    [-0.8, -0.51961524227066319, -0.3],
])


def decay_probe_ladder(t_fwd: float = 4.3, reach: float = 12.0,
                       z_cap: float = 6.0) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic probe set that decorrelates the two decay weights.

    A random far-zone cloud fails here: the radius dominates both
    weights, their logs become nearly collinear, and the least-squares
    fit trades exponent mass between the two factors.  The fix is a
    ladder of tilted rows t = c r with tilt ratios c in [0, 1/2]: every
    probe keeps t below half its radius, where the two-weight envelope
    is attained, while the spread in c separates the weights (at c = 0
    they are equal, at c = 1/2 they differ threefold).  Probes hugging
    the light cone are deliberately absent: the radiative component of a
    weak, slowly varying source only overtakes its quasi-static near
    field at radii far beyond any affordable grid, so near-cone probes
    read as pure inverse-square in the first weight and drag the second
    exponent toward zero.

    Past probes are deliberately absent as well: for t < 0 the two
    weights coincide, so they cannot inform the split, and for a
    near-static exterior field each past tilt family sits a constant
    factor off the present-time anchors, which only inflates the
    residual.  Forward times are clamped to t_fwd, where the evaluator's
    source history ends.  Directions cycle through a fixed list; any
    with positive drift-axis component above z_cap are skipped, since
    ahead of a moving source the history needed grows like the probe
    distance.
    """
    sr = reach / 12.0
    rows = []
    for r in (2.0, 2.5, 3.0, 3.5, 4.5, 5.0, 5.5, 6.5, 7.5, 9.0, 10.5, 12.0):
        rows.append((0.0, r * sr))
    for r in (3.0, 4.5, 6.5, 9.0, 12.0):
        rows.append((0.125 * r * sr, r * sr))
    for r in (3.0, 4.5, 5.5, 6.5, 9.0, 12.0):
        rows.append((0.25 * r * sr, r * sr))
    for r in (4.5, 5.5, 9.0):
        rows.append((0.375 * r * sr, r * sr))
    for r in (3.5, 5.0, 7.0):
        rows.append((0.45 * r * sr, r * sr))
    for r in (3.0, 4.5, 6.5, 9.0, 12.0):
        rows.append((0.5 * r * sr, r * sr))
    for t, r in ((1.0, 8.0), (2.0, 8.0), (0.5, 10.0), (1.5, 9.5),
                 (1.0, 11.0), (2.0, 11.0)):
        rows.append((t, r * sr))
    ts = np.array([min(row[0], t_fwd) for row in rows])
    xs = np.empty((ts.size, 3))
    k = 0
    for i, (_, r) in enumerate(rows):
        while r * _LADDER_DIRS[k % len(_LADDER_DIRS)][2] > z_cap:
            k += 1
        xs[i] = r * _LADDER_DIRS[k % len(_LADDER_DIRS)]
        k += 1
    return ts, xs


def field_decay_samples(field, ladder: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                        fd_eps: float = 0.05,
                        progress: Optional[Callable[[str], None]] = None):
    """Field and gradient magnitudes over the probe ladder.

    Probes sharing a time go into one batched field call; gradients are
    central differences, so each probe costs seven evaluation points.
    """
    ts, xs = decay_probe_ladder() if ladder is None else ladder
    n = ts.size
    shifts = np.concatenate([np.zeros((1, 3)), fd_eps * np.eye(3),
                             -fd_eps * np.eye(3)])
    F = np.empty((n, 6))
    G = np.empty(n)
    for t in np.unique(ts):
        idx = np.nonzero(ts == t)[0]
        pts = (xs[idx][:, None, :] + shifts[None, :, :]).reshape(-1, 3)
        E, B = field.eval(t, pts)
        FB = np.concatenate([E, B], axis=1).reshape(idx.size, 7, 6)
        F[idx] = FB[:, 0]
        G[idx] = np.linalg.norm((FB[:, 1:4] - FB[:, 4:7]) / (2.0 * fd_eps),
                                axis=(1, 2))
        if progress is not None:
            progress(f"decay group t = {t:+.2f}: {idx.size} probes")
    return ts, xs, F, G


# --- interior smallness ------------------------------------------------------

def fsc_check(field, R: float, n_samples: int = 200, seed: int = 0,
              alpha: float = 1.0, t_range: Tuple[float, float] = (-4.0, 4.0),
              reach_cap: float = 6.0) -> FscReport:
    """Smallest eta with |F| <= eta w1^-alpha w2^-alpha inside the
    matter cone |x| <= R + |t|, with w1 = 1+|t|+|x| and
    w2 = 1+R+|t|-|x| (at least 1 there, so eta is finite)."""
    rng = np.random.default_rng(seed)
    eta = 0.0
    worst = (0.0, np.zeros(3))
    for _ in range(n_samples):
        t = rng.uniform(*t_range)
        rmax = min(R + abs(t), reach_cap)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        x = d * rng.uniform(0.0, rmax)
        E, B = field.eval(t, x[None, :])
        mag = float(np.sqrt(np.sum(E ** 2 + B ** 2)))
        r = float(np.linalg.norm(x))
        wgt = (1.0 + abs(t) + r) ** alpha * (1.0 + R + abs(t) - r) ** alpha
        if mag * wgt > eta:
            eta = mag * wgt
            worst = (t, x)
    return FscReport(eta=eta, alpha=alpha, n_samples=n_samples,
                     worst_t=float(worst[0]),
                     worst_x=tuple(float(c) for c in worst[1]))


# --- transport conservation --------------------------------------------------

def lp_conservation(stack, p) -> ConservationReport:
    """Lebesgue-norm history of the transported density.

    p = 1 integrates rho over space, p = 2 uses the squared-density
    moment, p = inf tracks the per-slice maximum.  Drift is relative to
    the slice nearest t = 0.
    """
    key = str(p)
    norms = []
    for sl in stack.slices:
        if key == "1":
            norms.append(sl.integrate_scalar("rho"))
        elif key == "2":
            norms.append(float(np.sqrt(max(sl.integrate_scalar("f_sq"), 0.0))))
        elif key == "inf":
            norms.append(sl.f_max)
        else:
            raise ConfigError(f"unsupported Lebesgue exponent {p!r}")
    times = [sl.s for sl in stack.slices]
    ref = norms[int(np.argmin(np.abs(times)))]
    if ref <= 0.0:
        raise ConfigError("reference norm vanishes; nothing to conserve")
    drift = (max(norms) - min(norms)) / ref
    return ConservationReport(p=key, times=tuple(times), norms=tuple(norms),
                              max_rel_drift=float(drift))


def support_volume(stack, x_radius: float,
                   rel_threshold: float = 1e-12,
                   fit_t_min: float = 2.0) -> SupportReport:
    """Occupied-volume history and the on-axis density decay.

    Volume counts slice nodes carrying density above rel_threshold of
    the slice maximum.  The on-axis exponent fits log rho(t, 0) against
    log |t| over slices with |t| >= fit_t_min; dispersion empties the
    origin like a negative power.
    """
    times, vols, origin = [], [], []
    for sl in stack.slices:
        thr = rel_threshold * max(sl.f_max, 1e-300)
        vols.append(float(np.count_nonzero(sl.rho > thr) * sl.h ** 3))
        origin.append(float(sl.interp(np.zeros((1, 3)))[0, 0]))
        times.append(sl.s)
    tarr = np.asarray(times)
    oarr = np.asarray(origin)
    sel = (np.abs(tarr) >= fit_t_min) & (oarr > 0.0)
    if np.count_nonzero(sel) >= 3:
        slope = np.polyfit(np.log(np.abs(tarr[sel])), np.log(oarr[sel]), 1)[0]
    else:
        slope = np.nan
    return SupportReport(
        times=tuple(times), volumes=tuple(vols),
        ball_volume=4.0 / 3.0 * np.pi * x_radius ** 3,
        origin_density=tuple(origin), origin_exponent=float(slope))


def uniqueness_class_check(table: FieldTable) -> PastMonotonicityReport:
    """L2 field mass per time plane; the vanishing-past solution class
    requires it to shrink toward the most negative grid times."""
    w = _trapz_weights(table.nx, table.dx)
    w3 = w[:, None, None] * w[None, :, None] * w[None, None, :]
    norms = np.sqrt(np.einsum("ijk,tijkc->t", w3, table.data ** 2))
    peak = int(np.argmax(norms))
    # walk from the peak toward t_min; any value above the running
    # minimum is mass reappearing in the past
    walk = norms[:peak + 1][::-1]
    worst = float(np.max(walk - np.minimum.accumulate(walk), initial=0.0))
    return PastMonotonicityReport(
        times=tuple(float(t) for t in table.t_axis()),
        l2_norms=tuple(float(v) for v in norms),
        peak_index=peak, backward_increase_max=worst)


# --- serialization -----------------------------------------------------------

def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def export_json(report, path) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_csv(rows, path) -> None:
    """Write dataclass instances or dicts as CSV, one row each; a single
    report becomes a one-row file."""
    if is_dataclass(rows) or isinstance(rows, dict):
        rows = [rows]
    plain = [_plain(r) for r in rows]
    if not plain:
        with open(path, "w") as fh:
            fh.write("\n")
        return
    keys = list(plain[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        for row in plain:
            wr.writerow({k: (json.dumps(v) if isinstance(v, (list, dict))
                             else v) for k, v in row.items()})
