"""Wasserstein-Fisher-Rao integrand, energy and the coercive curve energy.

Curves are discretised in the variable ``z = sqrt(h)``: on every time cell
``z`` is the linear interpolant of its nodal values and ``gamma`` moves at the
constant cell velocity.  With this convention every term of

    J(gamma, h) = int_{h>0} beta/2 |gamma'|^2 h + beta delta^2/2 (h')^2/h + alpha h dt
                = int beta/2 |gamma'|^2 z^2 + 2 beta delta^2 (z')^2 + alpha z^2 dt

is integrated exactly, so one-homogeneity, additivity over sub-intervals and
the coercivity inequalities hold to round-off.  On a cell with an
unsupported endpoint the position is frozen (no kinetic term), which is the
cheapest extension of ``gamma`` outside ``{h > 0}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple, Union

import numpy as np

from .cone_space import WeightedCurve, validate_curve
from .errors import (
    InvalidCurve,
    InvalidInterval,
    NonAbsolutelyContinuous,
    RangeError,
    SchemaError,
    ZeroEnergy,
)


@dataclass(frozen=True)
class EnergyParams:
    """Weights of ``J = beta * B_delta + alpha * |rho|``."""

    alpha: float
    beta: float
    delta: float

    def __post_init__(self):
        for name in ("alpha", "beta", "delta"):
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise RangeError(name, f"must be a real number, got {value!r}") from None
            if not (math.isfinite(value) and value > 0):
                raise RangeError(name, f"must be finite and > 0, got {value!r}")
            object.__setattr__(self, name, value)

    @property
    def coercivity_constant(self) -> float:
        return min(2.0 * self.alpha, self.beta * min(1.0, self.delta**2))

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "delta": self.delta}

    @classmethod
    def from_json(cls, obj, path: str = "energy") -> "EnergyParams":
        if not isinstance(obj, dict):
            raise SchemaError(path, "must be an object with alpha, beta, delta")
        for key in ("alpha", "beta", "delta"):
            if key not in obj:
                raise SchemaError(f"{path}.{key}", "required")
        return cls(obj["alpha"], obj["beta"], obj["delta"])


def psi_delta(t: float, x, y: float, delta: float) -> float:
    """Perspective integrand ``(|x|^2 + delta^2 y^2) / (2t)``, extended to ``t <= 0``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xx = float(x @ x)
    if t > 0:
        return (xx + delta * delta * y * y) / (2.0 * t)
    if t == 0 and xx == 0 and y == 0:
        return 0.0
    return math.inf


@dataclass(frozen=True)
class DiscreteTriple:
    """``(rho, m = v rho, mu = g rho)`` stored through densities ``rho, v, g``.

    Arrays share a leading sample axis; ``v`` has a trailing spatial axis.
    """

    rho: np.ndarray
    v: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if v.ndim == rho.ndim:
            v = v[..., None]
        g = np.asarray(self.g, dtype=float)
        if np.any(rho < 0) or not np.all(np.isfinite(rho)):
            raise NonAbsolutelyContinuous("density must be finite and nonnegative")
        pos = rho > 0
        if not (np.all(np.isfinite(v[pos])) and np.all(np.isfinite(g[pos]))):
            raise NonAbsolutelyContinuous("velocity and growth must be finite where rho > 0")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "g", g)

    @classmethod
    def from_raw(cls, rho, m, mu, atol: float = 0.0) -> "DiscreteTriple":
        """Recover ``(v, g)`` from raw weights; fails if ``m`` or ``mu`` are not ``<< rho``."""
        rho = np.asarray(rho, dtype=float)
        m = np.asarray(m, dtype=float)
        if m.ndim == rho.ndim:
            m = m[..., None]
        mu = np.asarray(mu, dtype=float)
        zero = rho <= 0
        if np.any(np.abs(m[zero]) > atol) or np.any(np.abs(mu[zero]) > atol):
            raise NonAbsolutelyContinuous("m or mu is nonzero where rho vanishes")
        safe = np.where(zero, 1.0, rho)
        v = np.where(zero[..., None], 0.0, m / safe[..., None])
        g = np.where(zero, 0.0, mu / safe)
        return cls(rho, v, g)

    @property
    def momentum(self) -> np.ndarray:
        return self.v * self.rho[..., None]

    @property
    def source(self) -> np.ndarray:
        return self.g * self.rho


def b_delta(triple: DiscreteTriple, weights, delta: float) -> float:
    """Quadrature of ``1/2 int (|v|^2 + delta^2 g^2) d rho``."""
    w = np.broadcast_to(np.asarray(weights, dtype=float), triple.rho.shape)
    rho = triple.rho
    pos = rho > 0
    speed2 = np.sum(triple.v**2, axis=-1)
    dens = np.where(pos, speed2 + delta * delta * triple.g**2, 0.0)
    return 0.5 * float(np.sum(dens * rho * w))


def b_delta_raw(rho, m, mu, weights, delta: float) -> float:
    """``sum_k w_k psi_delta(rho_k, m_k, mu_k)``; ``inf`` when ``m`` or ``mu`` is not ``<< rho``."""
    rho = np.asarray(rho, dtype=float)
    m = np.asarray(m, dtype=float)
    if m.ndim == rho.ndim:
        m = m[..., None]
    mu = np.asarray(mu, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), rho.shape)
    total = 0.0
    for r, mk, uk, wk in zip(rho.ravel(), m.reshape(-1, m.shape[-1]), mu.ravel(), w.ravel()):
        val = psi_delta(r, mk, uk, delta)
        if val == math.inf:
            return math.inf
        total += wk * val
    return total


# -- curve energy -------------------------------------------------------------


@dataclass(frozen=True)
class _Cells:
    dt: np.ndarray
    z0: np.ndarray
    z1: np.ndarray
    speed2: np.ndarray
    t0: np.ndarray
    h0: np.ndarray
    h1: np.ndarray


def _cells(c: WeightedCurve) -> _Cells:
    sup = c.supported
    h = np.where(sup, c.masses, 0.0)
    z = np.sqrt(h)
    dt = np.diff(c.times)
    both = sup[:-1] & sup[1:]
    vel = np.diff(c.positions, axis=0) / dt[:, None]
    speed2 = np.where(both, np.sum(vel * vel, axis=1), 0.0)
    return _Cells(dt, z[:-1], z[1:], speed2, c.times[:-1], h[:-1], h[1:])


def _z2_integral(cells: _Cells, u0, u1):
    """``int z^2 dt`` over the cell fraction ``[u0, u1]`` for linear ``z``.

    Written in ``h`` and ``sqrt(h0 h1)`` so that constant masses integrate
    without round-off.
    """
    h0, h1 = cells.h0, cells.h1
    r = np.sqrt(h0 * h1)
    full = (h0 + r + h1) / 3.0

    def prim(u):
        return h0 * u + (r - h0) * u * u + (h0 + h1 - 2.0 * r) * u**3 / 3.0

    u0 = np.broadcast_to(u0, h0.shape)
    u1 = np.broadcast_to(u1, h0.shape)
    whole = (u0 == 0.0) & (u1 == 1.0)
    return cells.dt * np.where(whole, full, prim(u1) - prim(u0))


def _fractions(cells: _Cells, interval):
    if interval is None:
        n = cells.dt.size
        return np.zeros(n), np.ones(n)
    a, b = interval
    u0 = np.clip((a - cells.t0) / cells.dt, 0.0, 1.0)
    u1 = np.clip((b - cells.t0) / cells.dt, 0.0, 1.0)
    return u0, u1


def _check(c: WeightedCurve, validate: bool):
    if validate:
        report = validate_curve(c)
        if not report.ok:
            raise InvalidCurve(f"curve fails validation: {report.violations[:3]}", report)


def _check_interval(interval):
    a, b = interval
    if not (0.0 <= a < b <= 1.0):
        raise InvalidInterval(f"need 0 <= a < b <= 1, got [{a}, {b}]")


def energy_terms(c: WeightedCurve, p: EnergyParams, interval=None) -> dict:
    """Separate contributions ``kinetic``, ``growth``, ``mass`` of the curve energy."""
    cells = _cells(c)
    u0, u1 = _fractions(cells, interval)
    z2 = _z2_integral(cells, u0, u1)
    zdot2 = ((cells.z1 - cells.z0) / cells.dt) ** 2
    kinetic = 0.5 * p.beta * math.fsum(cells.speed2 * z2)
    growth = 2.0 * p.beta * p.delta**2 * math.fsum(zdot2 * cells.dt * (u1 - u0))
    mass = p.alpha * math.fsum(z2)
    return {"kinetic": kinetic, "growth": growth, "mass": mass}


def curve_energy(c: WeightedCurve, p: EnergyParams, validate: bool = True) -> float:
    """Coercive energy ``J_{alpha,beta,delta}`` of a weighted curve."""
    _check(c, validate)
    return math.fsum(energy_terms(c, p).values())


def curve_energy_localized(c: WeightedCurve, p: EnergyParams, interval, validate: bool = True) -> float:
    """Energy restricted to ``interval`` (intersected with the support)."""
    _check_interval(interval)
    _check(c, validate)
    return math.fsum(energy_terms(c, p, interval).values())


def mass_integral(c: WeightedCurve, interval=None) -> float:
    """``int h dt`` with the same piecewise-linear ``sqrt(h)`` convention."""
    if interval is not None:
        _check_interval(interval)
    cells = _cells(c)
    u0, u1 = _fractions(cells, interval)
    return math.fsum(_z2_integral(cells, u0, u1))


def fisher_information(c: WeightedCurve) -> float:
    """``int_{h>0} (h')^2 / h dt = 4 int (z')^2 dt``."""
    cells = _cells(c)
    return 4.0 * float(np.sum((cells.z1 - cells.z0) ** 2 / cells.dt))


def momentum_norm(c: WeightedCurve) -> float:
    """``int h |gamma'| dt``."""
    cells = _cells(c)
    return float(np.sum(np.sqrt(cells.speed2) * _z2_integral(cells, 0.0, 1.0)))


def source_norm(c: WeightedCurve) -> float:
    """``int |h'| dt``: total variation of the (thresholded) mass sequence."""
    cells = _cells(c)
    return float(np.sum(np.abs(cells.z1**2 - cells.z0**2)))


def normalize_to_unit_energy(c: WeightedCurve, p: EnergyParams) -> WeightedCurve:
    energy = curve_energy(c, p)
    if energy <= 0:
        raise ZeroEnergy("cannot normalise a curve with zero energy")
    return c.scaled(1.0 / energy)


def induced_triple(c: WeightedCurve) -> Tuple[DiscreteTriple, np.ndarray]:
    """Lagrangian triple ``rho = h dt (x) delta_gamma``, ``v = gamma'``, ``g = h'/h``.

    Sampled at two Gauss-Legendre points per cell, which integrates the
    quadratic ``h`` exactly.  Returns the triple and quadrature weights.
    """
    cells = _cells(c)
    nodes = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
    dz = (cells.z1 - cells.z0)[:, None]
    z = cells.z0[:, None] + dz * nodes[None, :]
    zdot = dz / cells.dt[:, None]
    h = z * z
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(z > 0, 2.0 * zdot / z, 0.0)
    vel = np.diff(c.positions, axis=0) / cells.dt[:, None]
    sup = c.supported
    moving = (sup[:-1] & sup[1:])[:, None]
    v = np.where(moving, vel, 0.0)
    v = np.repeat(v[:, None, :], 2, axis=1)
    weights = np.repeat(0.5 * cells.dt[:, None], 2, axis=1)
    return DiscreteTriple(h.ravel(), v.reshape(-1, c.dim), g.ravel()), weights.ravel()


@dataclass
class CoercivityReport:
    mass_norm: float
    momentum_norm: float
    source_norm: float
    energy: float
    constant: float
    alpha: float

    @property
    def bound(self) -> float:
        c = self.constant
        return max(self.alpha * self.mass_norm, c * self.momentum_norm, c * self.source_norm)

    @property
    def holds(self) -> bool:
        return self.bound <= self.energy * (1 + 1e-12) + 1e-14

    def to_json(self) -> dict:
        return {
            "mass_norm": self.mass_norm,
            "momentum_norm": self.momentum_norm,
            "source_norm": self.source_norm,
            "energy": self.energy,
            "constant": self.constant,
            "bound": self.bound,
            "holds": self.holds,
        }


CurveOrEnsemble = Union[WeightedCurve, DiscreteTriple, Iterable]


def coercivity_bounds(obj, p: EnergyParams, weights=None) -> CoercivityReport:
    """Compare ``max(alpha|rho|, C|m|, C|mu|)`` with the energy.

    ``obj`` is a :class:`WeightedCurve`, a :class:`DiscreteTriple` (with
    quadrature ``weights``), or an iterable of ``(coefficient, curve)`` pairs,
    for which norms and energies are summed atom-wise.
    """
    C = p.coercivity_constant
    if isinstance(obj, WeightedCurve):
        return CoercivityReport(
            mass_integral(obj), momentum_norm(obj), source_norm(obj), curve_energy(obj, p), C, p.alpha
        )
    if isinstance(obj, DiscreteTriple):
        if weights is None:
            raise ValueError("a DiscreteTriple needs quadrature weights")
        w = np.broadcast_to(np.asarray(weights, dtype=float), obj.rho.shape)
        rho_n = float(np.sum(obj.rho * w))
        m_n = float(np.sum(np.linalg.norm(obj.v, axis=-1) * obj.rho * w))
        mu_n = float(np.sum(np.abs(obj.g) * obj.rho * w))
        energy = p.beta * b_delta(obj, w, p.delta) + p.alpha * rho_n
        return CoercivityReport(rho_n, m_n, mu_n, energy, C, p.alpha)
    parts = [(float(coef), coercivity_bounds(curve, p)) for coef, curve in obj]
    return CoercivityReport(
        sum(a * r.mass_norm for a, r in parts),
        sum(a * r.momentum_norm for a, r in parts),
        sum(a * r.source_norm for a, r in parts),
        sum(a * r.energy for a, r in parts),
        C,
        p.alpha,
    )


def holder_gap(c: WeightedCurve, i: int, j: int, fisher: Optional[float] = None) -> float:
    """Slack of ``|h(t_j) - h(t_i)| <= (int h'^2/h)^(1/2) (int_{t_i}^{t_j} h)^(1/2)``.

    Nonnegative when the estimate holds.
    """
    if i > j:
        i, j = j, i
    fi = fisher_information(c) if fisher is None else fisher
    sup = c.supported
    h = np.where(sup, c.masses, 0.0)
    if i == j:
        return 0.0
    local = mass_integral(c, (c.times[i], c.times[j]))
    return math.sqrt(fi) * math.sqrt(local) - abs(h[j] - h[i])
