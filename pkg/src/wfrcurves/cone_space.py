"""Weighted Diracs, narrowly continuous curves of them, and their metrics.

A cone atom is the measure ``h * delta_x``.  Every atom with ``h = 0`` is the
zero measure, whatever its position, so all metric code branches on the
masses before it looks at positions.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import MismatchedGrids, ValidationError

#: Default relative support threshold: ``{h > 0}`` is read as ``h > 1e-12 * max(h)``.
RELATIVE_THRESHOLD = 1e-12


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box ``[lower, upper]`` in R^d."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _frozen(np.atleast_1d(self.lower))
        hi = _frozen(np.atleast_1d(self.upper))
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size < 1:
            raise ValidationError("box corners must be 1-d arrays of equal length >= 1")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("box corners must be finite")
        if not np.all(lo < hi):
            raise ValidationError("box requires lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, dim: int) -> "DomainBox":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def clamp(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def inflate(self, margin: float) -> "DomainBox":
        return DomainBox(self.lower - margin, self.upper + margin)

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_json(cls, obj) -> "DomainBox":
        return cls(obj["lower"], obj["upper"])

    def __eq__(self, other):
        if not isinstance(other, DomainBox):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass(frozen=True)
class ConeAtom:
    """The measure ``mass * delta_position``."""

    mass: float
    position: np.ndarray

    def __post_init__(self):
        m = float(self.mass)
        if not (m >= 0.0 and math.isfinite(m)):
            raise ValidationError(f"atom mass must be finite and >= 0, got {self.mass!r}")
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "position", _frozen(np.atleast_1d(self.position)))

    def is_zero(self) -> bool:
        return self.mass == 0.0


@dataclass(frozen=True)
class WeightedCurve:
    """Time-sampled curve ``t -> h(t) delta_{gamma(t)}``.

    ``positions`` are only meaningful where the mass is above the support
    threshold; elsewhere they hold a sentinel (see :func:`fill_sentinels`).
    A ``support_threshold`` of ``None`` means the relative default
    ``1e-12 * max(h)``, which keeps the support invariant under mass scaling.
    """

    times: np.ndarray
    masses: np.ndarray
    positions: np.ndarray
    support_threshold: Optional[float] = None
    _threshold: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = _frozen(self.times)
        h = _frozen(self.masses)
        x = np.array(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x.setflags(write=False)
        if t.ndim != 1 or t.size < 2:
            raise ValidationError("a curve needs at least two time nodes")
        if h.shape != t.shape or x.shape[0] != t.size:
            raise ValidationError("times, masses and positions must have matching lengths")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise ValidationError("time grid must start at 0 and end at 1")
        if not np.all(np.diff(t) > 0):
            raise ValidationError("times must be strictly increasing")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ValidationError("masses must be finite and nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "masses", h)
        object.__setattr__(self, "positions", x)
        if self.support_threshold is None:
            thr = RELATIVE_THRESHOLD * float(h.max())
        else:
            thr = float(self.support_threshold)
            if not thr >= 0:
                raise ValidationError("support_threshold must be >= 0")
        object.__setattr__(self, "_threshold", thr)

    @property
    def threshold(self) -> float:
        return self._threshold

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.times.size

    @property
    def supported(self) -> np.ndarray:
        """Boolean mask of nodes in the discrete support ``{h > threshold}``."""
        return self.masses > self._threshold

    def with_masses(self, masses) -> "WeightedCurve":
        return WeightedCurve(self.times, masses, self.positions, self.support_threshold)

    def scaled(self, factor: float) -> "WeightedCurve":
        return self.with_masses(self.masses * factor)

    def at(self, t: float):
        """Linearly interpolated ``(h(t), gamma(t))``.

        Positions are interpolated only between supported nodes; next to an
        unsupported node the supported neighbour's position is used.
        """
        times = self.times
        if t <= 0.0:
            return float(self.masses[0]), self.positions[0].copy()
        if t >= 1.0:
            return float(self.masses[-1]), self.positions[-1].copy()
        k = int(np.searchsorted(times, t, side="right")) - 1
        s = (t - times[k]) / (times[k + 1] - times[k])
        h = (1.0 - s) * self.masses[k] + s * self.masses[k + 1]
        sup = self.supported
        if sup[k] and sup[k + 1]:
            x = (1.0 - s) * self.positions[k] + s * self.positions[k + 1]
        elif sup[k + 1] and not sup[k]:
            x = self.positions[k + 1].copy()
        else:
            x = self.positions[k].copy()
        return float(h), x

    def to_json(self) -> dict:
        out = {
            "times": self.times.tolist(),
            "masses": self.masses.tolist(),
            "positions": self.positions.tolist(),
        }
        if self.support_threshold is not None:
            out["support_threshold"] = self.support_threshold
        return out

    @classmethod
    def from_json(cls, obj) -> "WeightedCurve":
        return cls(obj["times"], obj["masses"], obj["positions"], obj.get("support_threshold"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "h"] + [f"x{j + 1}" for j in range(self.dim)])
        for t, h, x in zip(self.times, self.masses, self.positions):
            w.writerow([repr(float(t)), repr(float(h))] + [repr(float(v)) for v in x])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, support_threshold=None) -> "WeightedCurve":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        if header[:2] != ["t", "h"]:
            raise ValidationError("curve CSV header must start with t,h")
        data = np.array([[float(v) for v in r] for r in body])
        return cls(data[:, 0], data[:, 1], data[:, 2:], support_threshold)


def fill_sentinels(masses, positions, threshold: float, fallback) -> np.ndarray:
    """Replace positions on ``{h <= threshold}`` by the last valid position.

    Nodes before the first supported node get ``fallback`` (typically the
    domain center).
    """
    x = np.array(positions, dtype=float)
    last = np.asarray(fallback, dtype=float)
    for k, h in enumerate(masses):
        if h > threshold and np.all(np.isfinite(x[k])):
            last = x[k]
        else:
            x[k] = last
    return x


def constant_curve(times, mass: float, position) -> WeightedCurve:
    times = np.asarray(times, dtype=float)
    pos = np.tile(np.atleast_1d(np.asarray(position, dtype=float)), (times.size, 1))
    return WeightedCurve(times, np.full(times.size, float(mass)), pos)


# -- distances ------------------------------------------------------------------


def flat_distance_arrays(h1, x1, h2, x2) -> np.ndarray:
    """Vectorised flat distance between atoms ``h1 d_x1`` and ``h2 d_x2``.

    ``x1``, ``x2`` have shape ``(..., d)``.  Positions are ignored wherever
    either mass is zero.
    """
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    both = (h1 > 0) & (h2 > 0)
    diff = np.where(both[..., None], x1 - x2, 0.0)
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    hmin = np.minimum(h1, h2)
    near = np.abs(h1 - h2) + hmin * dist
    return np.where(dist <= 2.0, near, h1 + h2)


def flat_distance(a: ConeAtom, b: ConeAtom) -> float:
    """Flat (bounded-Lipschitz) distance between two cone atoms."""
    return float(flat_distance_arrays(a.mass, a.position, b.mass, b.position))


def hk_cone_distance(a: ConeAtom, b: ConeAtom) -> float:
    """Hellinger-Kantorovich cone distance between two atoms."""
    h1, h2 = a.mass, b.mass
    root = math.sqrt(h1 * h2)
    if root == 0.0:
        sq = h1 + h2
    else:
        d = float(np.linalg.norm(a.position - b.position))
        if d <= math.pi:
            sq = h1 + h2 - 2.0 * root * math.cos(d)
        else:
            sq = h1 + h2 + 2.0 * root
    return math.sqrt(max(sq, 0.0))


def union_grid(*grids) -> np.ndarray:
    return np.unique(np.concatenate([np.asarray(g, dtype=float) for g in grids]))


def resample(c: WeightedCurve, times) -> WeightedCurve:
    """Interpolate ``c`` onto a new time grid (see :meth:`WeightedCurve.at`)."""
    times = np.asarray(times, dtype=float)
    hs, xs = zip(*(c.at(t) for t in times))
    return WeightedCurve(times, np.array(hs), np.array(xs), c.support_threshold)


def sup_distance(c1: WeightedCurve, c2: WeightedCurve, resample_grids: bool = False) -> float:
    """Maximum over the shared time grid of the per-time flat distance."""
    if c1.times.shape != c2.times.shape or not np.array_equal(c1.times, c2.times):
        if not resample_grids:
            raise MismatchedGrids("curves live on different time grids")
        grid = union_grid(c1.times, c2.times)
        c1, c2 = resample(c1, grid), resample(c2, grid)
    per_time = flat_distance_arrays(c1.masses, c1.positions, c2.masses, c2.positions)
    return float(per_time.max())


# -- support and validation -----------------------------------------------------


def support_components(c: WeightedCurve) -> list[tuple[int, int]]:
    """Maximal runs ``(first, last)`` (inclusive) of supported node indices."""
    sup = c.supported.astype(np.int8)
    edges = np.diff(np.concatenate([[0], sup, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


@dataclass
class CurveReport:
    ok: bool
    mass_increments: np.ndarray
    position_increments: np.ndarray
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "max_mass_increment": float(np.max(self.mass_increments, initial=0.0)),
            "max_position_increment": float(np.max(self.position_increments, initial=0.0)),
            "violations": [list(v) for v in self.violations],
            "warnings": list(self.warnings),
        }


def validate_curve(
    c: WeightedCurve,
    speed_bound: Optional[float] = None,
    mass_step_bound: Optional[float] = None,
    box: Optional[DomainBox] = None,
) -> CurveReport:
    """Check discrete narrow continuity of ``c``.

    Position increments are measured only across steps whose two nodes are
    both supported; ``speed_bound`` (a Lipschitz constant) caps them at
    ``speed_bound * dt``.  Without a bound the check only warns.
    """
    dt = np.diff(c.times)
    dh = np.abs(np.diff(c.masses))
    sup = c.supported
    both = sup[:-1] & sup[1:]
    dx = np.linalg.norm(np.diff(c.positions, axis=0), axis=1)
    dx = np.where(both, dx, 0.0)
    violations = []
    warnings = []
    if not np.all(np.isfinite(c.positions[sup])):
        for k in np.flatnonzero(sup & ~np.all(np.isfinite(c.positions), axis=1)):
            violations.append((int(k), "non_finite_position", float("nan")))
    if speed_bound is None:
        warnings.append("no speed bound given; position continuity not enforced")
    else:
        for k in np.flatnonzero(dx > speed_bound * dt * (1 + 1e-12) + 1e-15):
            violations.append((int(k), "position_jump", float(dx[k])))
    if mass_step_bound is not None:
        for k in np.flatnonzero(dh > mass_step_bound):
            violations.append((int(k), "mass_jump", float(dh[k])))
    if box is not None:
        outside = sup & ~box.contains(c.positions, tol=1e-12)
        for k in np.flatnonzero(outside):
            violations.append((int(k), "outside_domain", float("nan")))
    return CurveReport(not violations, dh, dx, violations, warnings)

