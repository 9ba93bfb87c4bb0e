"""Electromagnetic field containers: analytic test fields, uniform-grid
field tables with multilinear interpolation, and stacks of nested tables.

A "field function" is any object with an ``eval(t, X)`` method taking a
scalar or (m,) time array and an (m, 3) position array and returning the
pair ``(E, B)`` of (m, 3) arrays.  Trajectory integration, table builds
and diagnostics all consume this interface.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field as dc_field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DomainExceeded

_MAGIC = b"RVMFTB01"
_VERSION = 1


class ZeroField:
    """The vacuum field; iterate 0 of the fixed-point scheme."""

    def eval(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        z = np.zeros_like(X)
        return z, z.copy()


class CallableField:
    """Wrap a vectorized callable fn(t, X) -> (E, B)."""

    def __init__(self, fn: Callable):
        self._fn = fn

    def eval(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        E, B = self._fn(t, X)
        return np.asarray(E, dtype=float), np.asarray(B, dtype=float)


class OutgoingPulseField:
    """Purely outgoing spherical pulse used as a radiation-flux control.

    E(t, x) = g(t - |x|) / |x| * (omega x e),  B = omega x E, with g a
    compactly supported C^2 bump.  The Poynting vector is |E|^2 omega,
    i.e. exactly radially outgoing, so the incoming-energy functional on
    this field must vanish as the sphere radius grows.
    """

    def __init__(self, center_u: float = 0.0, width: float = 1.0,
                 amplitude: float = 1.0, axis=(0.0, 0.0, 1.0),
                 r_floor: float = 0.25):
        self.center_u = float(center_u)
        self.width = float(width)
        self.amplitude = float(amplitude)
        self.axis = np.asarray(axis, dtype=float)
        self.r_floor = float(r_floor)

    def _g(self, u):
        v = 1.0 - ((u - self.center_u) / self.width) ** 2
        return self.amplitude * np.maximum(0.0, v) ** 3

    def eval(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.linalg.norm(X, axis=1)
        safe = np.maximum(r, self.r_floor)
        omega = X / safe[:, None]
        g = self._g(np.asarray(t) - r) / safe
        g = np.where(r < self.r_floor, 0.0, g)
        E = g[:, None] * np.cross(omega, self.axis[None, :])
        B = np.cross(omega, E)
        return E, B


@dataclass
class FieldTable:
    """Field samples on a uniform (t, x) grid over a cube, zero outside.

    data has shape (nt, nx, nx, nx, 6) with components (E1, E2, E3,
    B1, B2, B3) and index order (t, x1, x2, x3, component).
    """

    t0: float
    dt: float
    x0: float
    dx: float
    data: np.ndarray
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 5 or d.shape[-1] != 6 or d.shape[1] != d.shape[2] or d.shape[1] != d.shape[3]:
            raise ConfigError(f"FieldTable data must be (nt, n, n, n, 6), got {d.shape}")
        self.data = d

    # --- geometry ---------------------------------------------------------
    @property
    def nt(self) -> int:
        return self.data.shape[0]

    @property
    def nx(self) -> int:
        return self.data.shape[1]

    @property
    def t_max(self) -> float:
        return self.t0 + self.dt * (self.nt - 1)

    @property
    def x_max(self) -> float:
        return self.x0 + self.dx * (self.nx - 1)

    def t_axis(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt)

    def x_axis(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.nx)

    def contains(self, t, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), X.shape[:1])
        ok = (t >= self.t0) & (t <= self.t_max)
        for k in range(3):
            ok = ok & (X[:, k] >= self.x0) & (X[:, k] <= self.x_max)
        return ok

    # --- interpolation ----------------------------------------------------
    @staticmethod
    def _snap(u):
        r = np.rint(u)
        return np.where(np.abs(u - r) < 1e-9, r, u)

    def eval(self, t, X) -> Tuple[np.ndarray, np.ndarray]:
        """Multilinear interpolation; exactly zero outside the grid."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = X.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (m,))
        out = np.zeros((m, 6))
        inside = self.contains(t, X)
        if np.any(inside):
            out[inside] = self._interp_inside(t[inside], X[inside])
        return out[:, :3], out[:, 3:]

    def _interp_inside(self, t, X):
        u = self._snap((t - self.t0) / self.dt)
        v = self._snap((X - self.x0) / self.dx)
        it0 = np.clip(np.floor(u).astype(np.int64), 0, max(self.nt - 2, 0))
        iv0 = np.clip(np.floor(v).astype(np.int64), 0, max(self.nx - 2, 0))
        wt = u - it0
        wv = v - iv0
        if self.nt == 1:
            wt = np.zeros_like(wt)
        flat = self.data.reshape(-1, 6)
        nx = self.nx
        acc = np.zeros((t.shape[0], 6))
        for bt in (0, 1):
            w_t = (1.0 - wt) if bt == 0 else wt
            if self.nt == 1 and bt == 1:
                continue
            for b0 in (0, 1):
                w0 = (1.0 - wv[:, 0]) if b0 == 0 else wv[:, 0]
                for b1 in (0, 1):
                    w1 = (1.0 - wv[:, 1]) if b1 == 0 else wv[:, 1]
                    for b2 in (0, 1):
                        w2 = (1.0 - wv[:, 2]) if b2 == 0 else wv[:, 2]
                        w = w_t * w0 * w1 * w2
                        if not np.any(w):
                            continue
                        idx = (((it0 + bt) * nx + iv0[:, 0] + b0) * nx
                               + iv0[:, 1] + b1) * nx + iv0[:, 2] + b2
                        acc += w[:, None] * flat[idx]
        return acc

    # --- persistence --------------------------------------------------------
    def save(self, path) -> None:
        """Write the documented binary layout (all little-endian):

        8s magic, u32 version, u32 ncomp, u64 nt, f64 t0, f64 dt,
        u64 nx, f64 x0, f64 dx, then nt*nx^3*ncomp float64 values in
        C order (t, x1, x2, x3, component).
        """
        header = struct.pack("<8sII Q d d Q d d", _MAGIC, _VERSION, 6,
                             self.nt, self.t0, self.dt,
                             self.nx, self.x0, self.dx)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "FieldTable":
        with open(path, "rb") as fh:
            head = fh.read(struct.calcsize("<8sII Q d d Q d d"))
            magic, version, ncomp, nt, t0, dt, nx, x0, dx = struct.unpack(
                "<8sII Q d d Q d d", head)
            if magic != _MAGIC:
                raise ConfigError(f"not a field table file: bad magic {magic!r}")
            if version != _VERSION or ncomp != 6:
                raise ConfigError(f"unsupported table version {version}/{ncomp}")
            raw = fh.read(nt * nx * nx * nx * ncomp * 8)
        data = np.frombuffer(raw, dtype="<f8").astype(float).reshape(
            nt, nx, nx, nx, ncomp)
        return cls(t0=t0, dt=dt, x0=x0, dx=dx, data=data)


class TableStack:
    """Nested field tables, finest first; evaluation picks the finest
    table containing each query point and is zero outside all of them."""

    def __init__(self, tables: Sequence[FieldTable], strict: bool = False):
        self.tables: List[FieldTable] = list(tables)
        self.strict = strict

    def eval(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = X.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (m,))
        out = np.zeros((m, 6))
        claimed = np.zeros(m, dtype=bool)
        for tab in self.tables:  # fine -> coarse; first claim wins
            mask = tab.contains(t, X) & ~claimed
            if np.any(mask):
                out[mask] = tab._interp_inside(t[mask], X[mask])
                claimed |= mask
        if self.strict and not np.all(claimed):
            raise DomainExceeded("query outside every table in the stack")
        return out[:, :3], out[:, 3:]

    def covers(self, t, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = X.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (m,))
        ok = np.zeros(m, dtype=bool)
        for tab in self.tables:
            ok |= tab.contains(t, X)
        return ok


def eval_point(fieldfn, t: float, x) -> Tuple[np.ndarray, np.ndarray]:
    """Convenience scalar wrapper around the batched interface."""
    E, B = fieldfn.eval(float(t), np.asarray(x, dtype=float)[None, :])
    return E[0], B[0]
