"""Characteristics of the inhomogeneous continuity equation on gridded fields.

Trajectories solve ``gamma' = v(t, gamma)`` with classical RK4; the mass is
carried in closed form, ``h(t) = r0 * exp(int_0^t g(s, gamma(s)) ds)``, with
the growth integral approximated by the trapezoid rule along the computed
path.  The exponential form keeps ``h > 0`` whenever ``r0 > 0``.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .cone_space import DomainBox, WeightedCurve
from .errors import NonFiniteField, ValidationError


@dataclass(frozen=True, eq=False)
class FieldGrid:
    """Velocity ``v``, growth ``g`` and optional density ``rho`` on a space-time grid.

    Spatial nodes are cell centres of a uniform partition of ``box`` into
    ``shape`` cells; time nodes are ``linspace(0, 1, M + 1)``.  Arrays are
    indexed ``[time, i_1, ..., i_d]`` (plus a trailing component axis for
    ``v``).  Values outside the hull of the nodes are held constant, and the
    normal velocity is treated as zero on the box boundary.

    With ``density_weighted`` the fields are sampled as ratios of
    interpolants, ``v(x) = I[v rho](x) / I[rho](x)``, which is how the
    regularised fields ``(v rho) * xi / rho_eps`` are evaluated between nodes.
    """

    box: DomainBox
    v: np.ndarray
    g: np.ndarray
    rho: Optional[np.ndarray] = None
    density_weighted: bool = False

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        g = np.asarray(self.g, dtype=float)
        d = self.box.dim
        if v.ndim != d + 2 or v.shape[-1] != d:
            raise ValidationError(f"v must have shape (M+1, n_1..n_{d}, {d}), got {v.shape}")
        if g.shape != v.shape[:-1]:
            raise ValidationError("g must match v without its component axis")
        if v.shape[0] < 2:
            raise ValidationError("need at least two time slices")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(g))):
            raise ValidationError("fields must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "g", g)
        if self.rho is not None:
            rho = np.asarray(self.rho, dtype=float)
            if rho.shape != g.shape:
                raise ValidationError("rho must match g")
            if not np.all(np.isfinite(rho)) or np.any(rho < 0):
                raise ValidationError("rho must be finite and nonnegative")
            object.__setattr__(self, "rho", rho)
        if self.density_weighted:
            if self.rho is None or np.any(self.rho <= 0):
                raise ValidationError("density-weighted sampling needs rho > 0 everywhere")
            r = self.rho[..., None]
            packed = np.concatenate([v * r, g[..., None] * r, r], axis=-1)
        else:
            packed = np.concatenate([v, g[..., None]], axis=-1)
        object.__setattr__(self, "_packed", packed)

    @classmethod
    def from_functions(
        cls,
        box: DomainBox,
        shape: Sequence[int],
        M: int,
        velocity: Callable,
        growth: Callable,
        density: Optional[Callable] = None,
    ) -> "FieldGrid":
        """Sample callables ``f(t, X)`` (``X`` of shape ``(..., d)``) on the grid nodes."""
        proto = cls._axes(box, shape)
        mesh = np.stack(np.meshgrid(*proto, indexing="ij"), axis=-1)
        times = np.linspace(0.0, 1.0, M + 1)
        v = np.stack([np.broadcast_to(velocity(t, mesh), mesh.shape) for t in times])
        g = np.stack([np.broadcast_to(growth(t, mesh), mesh.shape[:-1]) for t in times])
        rho = None
        if density is not None:
            rho = np.stack([np.broadcast_to(density(t, mesh), mesh.shape[:-1]) for t in times])
        return cls(box, v, g, rho)

    @staticmethod
    def _axes(box: DomainBox, shape):
        dx = box.widths / np.asarray(shape)
        return [box.lower[j] + (np.arange(n) + 0.5) * dx[j] for j, n in enumerate(shape)]

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def shape(self) -> tuple:
        return self.g.shape[1:]

    @property
    def M(self) -> int:
        return self.g.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M + 1)

    @property
    def spacing(self) -> np.ndarray:
        return self.box.widths / np.asarray(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list:
        return self._axes(self.box, self.shape)

    def nodes(self) -> np.ndarray:
        """Cell centres, shape ``(*shape, d)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def max_speed(self) -> float:
        return float(np.max(np.linalg.norm(self.v, axis=-1)))

    def total_mass(self) -> np.ndarray:
        """``rho_t(box)`` per time slice."""
        if self.rho is None:
            raise ValidationError("grid has no density")
        return self.rho.reshape(self.M + 1, -1).sum(axis=1) * self.cell_volume

    def with_fields(self, v=None, g=None, rho=None) -> "FieldGrid":
        return FieldGrid(
            self.box,
            self.v if v is None else v,
            self.g if g is None else g,
            self.rho if rho is None else rho,
            self.density_weighted,
        )


def _interp(fg: FieldGrid, data: np.ndarray, t: float, X: np.ndarray) -> np.ndarray:
    """Multilinear-in-space, linear-in-time interpolation of ``data[time, *space, ...]``.

    ``t`` is a scalar or an array broadcastable to ``X.shape[:-1]``.
    """
    M = data.shape[0] - 1
    s = np.clip(t, 0.0, 1.0) * M
    j = np.minimum(np.floor(s).astype(int), M - 1)
    a = s - j
    shape = np.asarray(fg.shape)
    u = (X - fg.box.lower) / fg.spacing - 0.5
    u = np.clip(u, 0.0, shape - 1)
    i0 = np.minimum(np.floor(u).astype(int), np.maximum(shape - 2, 0))
    frac = u - i0
    i1 = np.minimum(i0 + 1, shape - 1)
    out = 0.0
    d = X.shape[-1]
    for corner in itertools.product((0, 1), repeat=d):
        idx = []
        w = np.ones(X.shape[:-1])
        for ax, bit in enumerate(corner):
            if bit:
                idx.append(i1[..., ax])
                w = w * frac[..., ax]
            else:
                idx.append(i0[..., ax])
                w = w * (1.0 - frac[..., ax])
        tidx = tuple(idx)
        lo, hi = data[(j,) + tidx], data[(j + 1,) + tidx]
        extra = (1,) * (lo.ndim - w.ndim)
        at = np.broadcast_to(a, w.shape).reshape(w.shape + extra)
        out = out + w.reshape(w.shape + extra) * ((1.0 - at) * lo + at * hi)
    return out


def sample_fields(fg: FieldGrid, t, x):
    """``(v(t, x), g(t, x))`` by interpolation; ``x`` may be one point or ``(k, d)``.

    ``t`` may be a scalar or one time per point.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    X = fg.box.clamp(X)
    vals = _interp(fg, fg._packed, t, X)
    if fg.density_weighted:
        d = fg.dim
        vals = vals[..., : d + 1] / vals[..., d + 1 :]
    v, g = vals[..., :-1], vals[..., -1]
    if single:
        return v[0], float(g[0])
    return v, g


@dataclass
class Trajectories:
    """Batched characteristic output: positions ``(N+1, k, d)``, masses ``(N+1, k)``."""

    times: np.ndarray
    positions: np.ndarray
    masses: np.ndarray
    log_growth: np.ndarray

    def curve(self, i: int, support_threshold=None) -> WeightedCurve:
        return WeightedCurve(self.times, self.masses[:, i], self.positions[:, i], support_threshold)


def _integrate_block(fg: FieldGrid, X0: np.ndarray, r0: np.ndarray, steps: int) -> Trajectories:
    box = fg.box
    dt = 1.0 / steps
    times = np.linspace(0.0, 1.0, steps + 1)
    k = X0.shape[0]
    pos = np.empty((steps + 1, k, fg.dim))
    lg = np.zeros((steps + 1, k))
    moving = (r0 > 0)[:, None]
    x = box.clamp(X0)
    pos[0] = x

    def vel(t, y):
        v, g = sample_fields(fg, t, y)
        return v, g

    _, g_prev = vel(0.0, x)
    for n in range(steps):
        t = times[n]
        k1, _ = vel(t, x)
        k2, _ = vel(t + 0.5 * dt, box.clamp(x + 0.5 * dt * k1))
        k3, _ = vel(t + 0.5 * dt, box.clamp(x + 0.5 * dt * k2))
        k4, _ = vel(t + dt, box.clamp(x + dt * k3))
        step = dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        x = np.where(moving, box.clamp(x + step), x)
        _, g_next = vel(times[n + 1], x)
        lg[n + 1] = lg[n] + 0.5 * dt * (g_prev + g_next)
        g_prev = g_next
        pos[n + 1] = x
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(lg))):
        raise NonFiniteField("non-finite values along a characteristic")
    with np.errstate(over="raise"):
        try:
            masses = r0[None, :] * np.exp(lg)
        except FloatingPointError:
            raise NonFiniteField("mass overflow along a characteristic") from None
    return Trajectories(times, pos, masses, lg)


def integrate_many(
    fg: FieldGrid, X0, r0, steps: int, workers: int = 1, block: int = 4096
) -> Trajectories:
    """Integrate characteristics from many initial points.

    Work is split into index blocks; results are concatenated in index order,
    so the output does not depend on ``workers``.
    """
    if steps < 1:
        raise ValidationError("steps must be a positive integer")
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    r0 = np.broadcast_to(np.asarray(r0, dtype=float), X0.shape[:1]).copy()
    if np.any(r0 < 0) or not np.all(np.isfinite(r0)):
        raise ValidationError("initial masses must be finite and >= 0")
    bounds = [(i, min(i + block, X0.shape[0])) for i in range(0, X0.shape[0], block)] or [(0, 0)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _integrate_block(fg, X0[b[0]:b[1]], r0[b[0]:b[1]], steps), bounds))
    else:
        parts = [_integrate_block(fg, X0[a:b], r0[a:b], steps) for a, b in bounds]
    return Trajectories(
        parts[0].times,
        np.concatenate([p.positions for p in parts], axis=1),
        np.concatenate([p.masses for p in parts], axis=1),
        np.concatenate([p.log_growth for p in parts], axis=1),
    )


def integrate_characteristic(fg: FieldGrid, x0, r0: float, steps: int) -> WeightedCurve:
    """Characteristic curve from ``(x0, r0)`` sampled at ``steps + 1`` uniform times."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (fg.dim,):
        raise ValidationError(f"x0 must have shape ({fg.dim},)")
    if r0 < 0:
        raise ValidationError("r0 must be >= 0")
    return integrate_many(fg, x0[None, :], [r0], steps).curve(0)


# -- vanishing time and cut-off --------------------------------------------------


def vanishing_time(c: WeightedCurve) -> float:
    """First time the mass reaches the support threshold; ``math.inf`` if never.

    A crossing bracketed by two nodes is located by linear interpolation.
    """
    sup = c.supported
    if sup.all():
        return math.inf
    k = int(np.argmin(sup))
    if k == 0:
        return 0.0
    h0, h1 = c.masses[k - 1], c.masses[k]
    thr = c.threshold
    frac = (h0 - thr) / (h0 - h1) if h0 > h1 else 1.0
    return float(c.times[k - 1] + frac * (c.times[k] - c.times[k - 1]))


def cutoff(c: WeightedCurve) -> WeightedCurve:
    """Zero the mass at every node from the first unsupported node on."""
    sup = c.supported
    if sup.all():
        return c
    k = int(np.argmin(sup))
    h = c.masses.copy()
    h[k:] = 0.0
    return c.with_masses(h)


@dataclass
class ODEResidual:
    pos_residual: float
    mass_residual: float

    def to_json(self) -> dict:
        return {"pos_residual": self.pos_residual, "mass_residual": self.mass_residual}


def ode_residual(c: WeightedCurve, fg: FieldGrid) -> ODEResidual:
    """Max defect of ``gamma' = v`` and ``h' = g h`` on supported cells (midpoint sampling)."""
    sup = c.supported
    both = sup[:-1] & sup[1:]
    if not both.any():
        return ODEResidual(0.0, 0.0)
    dt = np.diff(c.times)
    tm = 0.5 * (c.times[:-1] + c.times[1:])
    xm = 0.5 * (c.positions[:-1] + c.positions[1:])
    hm = 0.5 * (c.masses[:-1] + c.masses[1:])
    pos_res = 0.0
    mass_res = 0.0
    for k in np.flatnonzero(both):
        v, g = sample_fields(fg, tm[k], xm[k])
        dx = (c.positions[k + 1] - c.positions[k]) / dt[k]
        dh = (c.masses[k + 1] - c.masses[k]) / dt[k]
        pos_res = max(pos_res, float(np.linalg.norm(dx - v)))
        mass_res = max(mass_res, abs(dh - g * hm[k]))
    return ODEResidual(pos_res, mass_res)
