"""Superposition of weighted-Dirac curves and lifting of grid solutions.

Two directions are covered:

* an ensemble ``sigma = sum_i c_i delta_{(gamma_i, h_i)}`` defines the
  measure curve ``rho_t = sum_i c_i h_i(t) delta_{gamma_i(t)}``
  (:func:`superpose`), whose weak continuity-equation defect against smooth
  test functions is :func:`continuity_residual`;
* a grid solution ``(rho, v, g)`` is regularised (:func:`mollify`) and its
  characteristics, weighted by their initial density and normalised to unit
  ``L^1`` mass, form an ensemble (:func:`lift`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .cone_space import DomainBox, WeightedCurve
from .characteristics import FieldGrid, integrate_many, sample_fields, _interp
from .energy import mass_integral
from .errors import InvalidEpsilon, ValidationError


@dataclass(frozen=True, eq=False)
class CurveEnsemble:
    """Finite nonnegative combination of weighted curves on one time grid."""

    atoms: Tuple[Tuple[float, WeightedCurve], ...] = ()
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        atoms = tuple((float(c), curve) for c, curve in self.atoms)
        times = self.times
        for c, curve in atoms:
            if not (c >= 0 and math.isfinite(c)):
                raise ValidationError(f"ensemble coefficients must be finite and >= 0, got {c}")
            if times is None:
                times = curve.times
            elif not np.array_equal(np.asarray(times, dtype=float), curve.times):
                raise ValidationError("all curves of an ensemble must share one time grid")
        if times is not None:
            times = np.asarray(times, dtype=float)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.atoms)

    def __iter__(self):
        return iter(self.atoms)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([c for c, _ in self.atoms])

    @property
    def curves(self) -> List[WeightedCurve]:
        return [curve for _, curve in self.atoms]

    def union(self, other: "CurveEnsemble") -> "CurveEnsemble":
        return CurveEnsemble(self.atoms + other.atoms, self.times if self.times is not None else other.times)

    __add__ = union

    def total_mass(self, t: float) -> float:
        return superpose(self, t).total_mass

    def total_variation(self) -> float:
        """``|rho|(X) = sum_i c_i int h_i dt``."""
        return math.fsum(c * mass_integral(curve) for c, curve in self.atoms)

    def map_curves(self, fn) -> "CurveEnsemble":
        return CurveEnsemble(tuple((c, fn(curve)) for c, curve in self.atoms), self.times)

    def to_json(self) -> dict:
        return {
            "times": None if self.times is None else self.times.tolist(),
            "atoms": [{"coefficient": c, "curve": curve.to_json()} for c, curve in self.atoms],
        }

    @classmethod
    def from_json(cls, obj) -> "CurveEnsemble":
        atoms = tuple((a["coefficient"], WeightedCurve.from_json(a["curve"])) for a in obj["atoms"])
        return cls(atoms, obj.get("times"))


@dataclass
class MeasureSlice:
    """Atomic measure ``sum_k m_k delta_{x_k}`` at time ``t``."""

    t: float
    masses: np.ndarray
    positions: np.ndarray

    @property
    def total_mass(self) -> float:
        return math.fsum(self.masses)

    def centroid(self) -> np.ndarray:
        total = self.total_mass
        if total == 0:
            return np.full(self.positions.shape[1] if self.positions.ndim == 2 else 0, np.nan)
        return (self.masses[:, None] * self.positions).sum(axis=0) / total

    def pair(self, phi) -> float:
        """``int phi d rho_t`` for ``phi(x)`` vectorised over ``(k, d)`` points."""
        if self.masses.size == 0:
            return 0.0
        return float(np.dot(self.masses, phi(self.positions)))


def superpose(e: CurveEnsemble, t: float) -> MeasureSlice:
    masses, positions = [], []
    for c, curve in e.atoms:
        h, x = curve.at(t)
        if h > curve.threshold and c > 0:
            masses.append(c * h)
            positions.append(x)
    dim = e.atoms[0][1].dim if e.atoms else 0
    return MeasureSlice(
        t,
        np.array(masses, dtype=float),
        np.array(positions, dtype=float).reshape(len(positions), dim),
    )


# -- test functions ---------------------------------------------------------------


def _bump(s, power=3):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1
    return np.where(inside, (1 - s * s) ** power, 0.0)


def _bump_prime(s, power=3):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1
    return np.where(inside, -2 * power * s * (1 - s * s) ** (power - 1), 0.0)


@dataclass(frozen=True)
class PolyBump:
    """Tensor-product bump ``b((t - t0)/rt) prod_j b((x_j - x0_j)/rx_j)``, ``b(s) = (1 - s^2)^p``.

    ``b`` is ``C^(p-1)`` and vanishes with its first ``p - 1`` derivatives at
    ``|s| = 1``.  The default ``p = 4`` keeps quadrature errors of the
    weak-form residual free of kink contributions at second order.
    """

    t0: float
    rt: float
    x0: Tuple[float, ...]
    rx: Tuple[float, ...]
    amplitude: float = 1.0
    power: int = 4

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        rx = np.broadcast_to(np.atleast_1d(np.asarray(self.rx, dtype=float)), (len(self.x0),))
        object.__setattr__(self, "rx", tuple(float(v) for v in rx))
        if self.rt <= 0 or min(self.rx) <= 0:
            raise ValidationError("bump radii must be positive")

    def check_support(self, box: DomainBox) -> bool:
        """True if the support lies in ``(0, 1) x box``."""
        lo = np.asarray(self.x0) - np.asarray(self.rx)
        hi = np.asarray(self.x0) + np.asarray(self.rx)
        return (
            self.t0 - self.rt >= 0
            and self.t0 + self.rt <= 1
            and bool(np.all(lo >= box.lower))
            and bool(np.all(hi <= box.upper))
        )

    def _parts(self, t, X):
        X = np.asarray(X, dtype=float)
        st = (t - self.t0) / self.rt
        sx = (X - np.asarray(self.x0)) / np.asarray(self.rx)
        return st, sx

    def value(self, t, X):
        st, sx = self._parts(t, X)
        p = self.power
        return self.amplitude * _bump(st, p) * np.prod(_bump(sx, p), axis=-1)

    def dt(self, t, X):
        st, sx = self._parts(t, X)
        p = self.power
        return self.amplitude * _bump_prime(st, p) / self.rt * np.prod(_bump(sx, p), axis=-1)

    def grad(self, t, X):
        st, sx = self._parts(t, X)
        p = self.power
        b = _bump(sx, p)
        bp = _bump_prime(sx, p) / np.asarray(self.rx)
        d = sx.shape[-1]
        cols = []
        for j in range(d):
            others = np.prod(np.delete(b, j, axis=-1), axis=-1) if d > 1 else 1.0
            cols.append(bp[..., j] * others)
        return self.amplitude * _bump(st, p)[..., None] * np.stack(cols, axis=-1)


def default_test_functions(box: DomainBox, count: int = 10, seed: int = 0, power: int = 4) -> List[PolyBump]:
    """Deterministic family of bumps supported inside ``(0, 1) x box``."""
    rng = np.random.default_rng(seed)
    out = []
    w = box.widths
    while len(out) < count:
        rt = rng.uniform(0.2, 0.45)
        t0 = rng.uniform(rt, 1 - rt)
        rx = rng.uniform(0.25, 0.5, size=box.dim) * w
        x0 = rng.uniform(box.lower + rx, box.upper - rx)
        out.append(PolyBump(t0, rt, tuple(x0), tuple(rx), power=power))
    return out


def continuity_residuals(
    e: CurveEnsemble, fg: FieldGrid, tests: Sequence[PolyBump], nodes_per_cell: int = 3
) -> np.ndarray:
    """``sum_i c_i int h_i [d_t phi + grad phi . v + phi g](t, gamma_i(t)) dt`` per test function.

    Curves are read as their piecewise-linear interpolants (see
    :meth:`WeightedCurve.at`) and the time integral uses Gauss-Legendre
    nodes inside every cell, so the defect between grid nodes is seen too.
    """
    if len(e) == 0 or len(tests) == 0:
        return np.zeros(len(tests))
    times = e.times
    coef = e.coefficients
    sup = np.stack([c.supported for c in e.curves], axis=1)
    H = np.where(sup, np.stack([c.masses for c in e.curves], axis=1), 0.0)
    X = np.stack([c.positions for c in e.curves], axis=1)
    s, gw = np.polynomial.legendre.leggauss(nodes_per_cell)
    s = 0.5 * (s + 1.0)
    gw = 0.5 * gw
    dt = np.diff(times)[:, None]
    left, right = sup[:-1], sup[1:]
    # next to an unsupported node the supported end's position is used
    x0 = np.where((left | ~right)[..., None], X[:-1], X[1:])
    x1 = np.where((right | ~left)[..., None], X[1:], X[:-1])
    out = np.zeros(len(tests))
    for sq, wq in zip(s, gw):
        t = np.broadcast_to(times[:-1, None] + sq * dt, H[:-1].shape)
        h = (1.0 - sq) * H[:-1] + sq * H[1:]
        x = (1.0 - sq) * x0 + sq * x1
        v, g = sample_fields(fg, t.ravel(), x.reshape(-1, x.shape[-1]))
        v, g = v.reshape(x.shape), g.reshape(h.shape)
        weight = wq * dt * coef * h
        for j, phi in enumerate(tests):
            integrand = phi.dt(t, x) + np.sum(phi.grad(t, x) * v, axis=-1) + phi.value(t, x) * g
            out[j] += math.fsum((weight * integrand).ravel())
    return out


def continuity_residual(e: CurveEnsemble, fg: FieldGrid, tests: Sequence[PolyBump]) -> float:
    res = continuity_residuals(e, fg, tests)
    return float(np.max(np.abs(res))) if res.size else 0.0


# -- mollification and lifting ------------------------------------------------------


def enlarged_box(omega: DomainBox, inflation: float = 2.0) -> DomainBox:
    """Box ``V`` containing every point within ``inflation`` of ``omega``."""
    return omega.inflate(inflation)


def mollifier_weights(eps: float, h: float) -> np.ndarray:
    """Discrete 1-d weights of ``(1 - (x/eps)^2)^3`` on a grid of step ``h``, summing to 1."""
    r = int(math.ceil(eps / h))
    offs = np.arange(-r, r + 1) * h
    w = _bump(offs / eps)
    if w.sum() == 0:
        w = (offs == 0).astype(float)
    return w / w.sum()


def _convolve(fg: FieldGrid, data: np.ndarray, eps: float) -> np.ndarray:
    out = data
    for ax, h in enumerate(fg.spacing):
        out = correlate1d(out, mollifier_weights(eps, h), axis=ax + 1, mode="constant", cval=0.0)
    return out


def mollify(fg: FieldGrid, eps: float) -> FieldGrid:
    """Regularised grid ``(rho * xi + eps, (v rho) * xi / rho_eps, (g rho) * xi / rho_eps)``.

    The convolution acts in space on every time slice with zero padding
    outside the grid box.
    """
    if fg.rho is None:
        raise ValidationError("mollify needs a density")
    if not (eps > 0 and math.isfinite(eps)):
        raise InvalidEpsilon(f"epsilon must be finite and > 0, got {eps!r}")
    rho = fg.rho
    rho_e = _convolve(fg, rho, eps) + eps
    m_e = np.stack([_convolve(fg, fg.v[..., j] * rho, eps) for j in range(fg.dim)], axis=-1)
    mu_e = _convolve(fg, fg.g * rho, eps)
    return FieldGrid(fg.box, m_e / rho_e[..., None], mu_e / rho_e, rho_e, density_weighted=True)


def weighted_energies(fg: FieldGrid) -> Tuple[float, float]:
    """``(sum |v|^2 rho, sum g^2 rho)`` times the cell volume, per unit time (trapezoid)."""
    if fg.rho is None:
        raise ValidationError("grid has no density")
    wt = np.full(fg.M + 1, 1.0 / fg.M)
    wt[[0, -1]] *= 0.5
    kin = np.sum(np.sum(fg.v**2, axis=-1) * fg.rho, axis=tuple(range(1, fg.dim + 1)))
    src = np.sum(fg.g**2 * fg.rho, axis=tuple(range(1, fg.dim + 1)))
    vol = fg.cell_volume
    return float(np.dot(wt, kin) * vol), float(np.dot(wt, src) * vol)


def time_integral(values, times) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.sum(0.5 * np.diff(times) * (values[:-1] + values[1:])))


@dataclass
class LiftResult:
    ensemble: CurveEnsemble
    mollified: FieldGrid
    report: dict = field(default_factory=dict)


def lift(
    fg: FieldGrid,
    eps: float,
    samples_per_axis: Optional[Sequence[int]] = None,
    steps: Optional[int] = None,
    workers: int = 1,
) -> LiftResult:
    """Characteristic ensemble representing the regularised grid solution.

    Every sample ``x`` (cell centre, volume ``w``) yields the curve
    ``(X_x, R_x / int R_x)`` with coefficient ``w int R_x``, where ``X_x`` and
    ``R_x = rho_eps(0, x) exp(int g_eps)`` are the regularised characteristics.
    """
    reg = mollify(fg, eps)
    shape = tuple(fg.shape) if samples_per_axis is None else tuple(np.broadcast_to(samples_per_axis, (fg.dim,)))
    steps = fg.M if steps is None else int(steps)
    axes = FieldGrid._axes(fg.box, shape)
    X0 = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, fg.dim)
    w = float(np.prod(fg.box.widths / np.asarray(shape)))
    r0 = _interp(reg, reg.rho[..., None], 0.0, X0)[..., 0]
    traj = integrate_many(reg, X0, r0, steps, workers=workers)
    atoms = []
    for i in range(X0.shape[0]):
        curve = traj.curve(i)
        total = mass_integral(curve)
        atoms.append((w * total, curve.scaled(1.0 / total)))
    ensemble = CurveEnsemble(tuple(atoms), traj.times)
    rho_norm = time_integral(fg.total_mass(), fg.times)
    eps_volume = eps * fg.box.volume
    sum_c = math.fsum(c for c, _ in atoms)
    # transported mass against the regularised grid mass: zero up to discretisation
    carried = sum(c * curve.masses for c, curve in atoms)
    grid_mass = np.interp(traj.times, reg.times, reg.total_mass())
    defect = time_integral(np.abs(carried - grid_mass), traj.times)
    quad_tol = defect + abs(sum_c - time_integral(carried, traj.times))
    report = {
        "epsilon": eps,
        "n_atoms": len(atoms),
        "sum_coefficients": sum_c,
        "rho_norm": rho_norm,
        "eps_volume": eps_volume,
        "bound": rho_norm + eps_volume,
        "bound_holds": sum_c <= rho_norm + eps_volume + 1e-8,
        "transport_defect": defect,
        "quadrature_tolerance": quad_tol,
        "bound_holds_within_tolerance": sum_c <= rho_norm + eps_volume + 1e-8 + quad_tol,
        "min_rho_eps": float(reg.rho.min()),
        "max_unit_mass_error": max(abs(mass_integral(curve) - 1.0) for _, curve in atoms),
    }
    return LiftResult(ensemble, reg, report)


# -- rasterisation ------------------------------------------------------------


def _uniform_steps(times) -> int:
    times = np.asarray(times, dtype=float)
    M = times.size - 1
    if not np.allclose(times, np.linspace(0.0, 1.0, M + 1), rtol=0, atol=1e-12):
        raise ValidationError("rasterisation needs a uniform time grid")
    return M


def grid_solution_from_ensemble(
    e: CurveEnsemble, box: DomainBox, shape: Sequence[int], kernel_width: float = 1.5, times=None
) -> FieldGrid:
    """Deposit ``rho``, ``m = gamma' rho`` and ``mu = h' delta`` of an ensemble on a grid.

    Each atom spreads over the cell centres with the normalised tensor
    bump of half-width ``kernel_width`` cells, so slice masses are preserved.
    Velocities and growth rates are ``m / rho`` and ``mu / rho`` (zero where
    ``rho = 0``).
    """
    if kernel_width < 1:
        raise ValidationError("kernel width must be at least one cell")
    if times is None:
        times = e.times
    if times is None:
        raise ValidationError("empty ensemble without a time grid; pass times")
    if e.times is not None and not np.array_equal(np.asarray(times, dtype=float), e.times):
        raise ValidationError("times differ from the ensemble grid")
    shape = tuple(int(n) for n in shape)
    M = _uniform_steps(times)
    d = box.dim
    spacing = box.widths / np.asarray(shape)
    vol = float(np.prod(spacing))
    axes = FieldGrid._axes(box, shape)
    rho = np.zeros((M + 1,) + shape)
    mom = np.zeros((M + 1,) + shape + (d,))
    src = np.zeros((M + 1,) + shape)
    reach = int(math.ceil(kernel_width))
    for c, curve in e.atoms:
        if c == 0:
            continue
        sup = curve.supported
        h = np.where(sup, curve.masses, 0.0)
        hdot = np.gradient(h, curve.times, edge_order=2)
        xdot = np.gradient(curve.positions, curve.times, axis=0, edge_order=2)
        for k in range(M + 1):
            if h[k] <= 0:
                continue
            x = curve.positions[k]
            sl, wts = [], []
            for j in range(d):
                centre = int(np.floor((x[j] - box.lower[j]) / spacing[j]))
                idx = np.arange(centre - reach, centre + reach + 1)
                idx = idx[(idx >= 0) & (idx < shape[j])]
                wj = _bump((axes[j][idx] - x[j]) / (kernel_width * spacing[j]))
                sl.append(idx)
                wts.append(wj)
            kern = wts[0]
            for wj in wts[1:]:
                kern = np.multiply.outer(kern, wj)
            total = kern.sum()
            if total == 0:
                raise ValidationError("atom outside the rasterisation box")
            kern = kern / total
            ix = np.ix_(*sl)
            rho[(k,) + ix] += c * h[k] * kern / vol
            mom[(k,) + ix] += (c * h[k] * kern / vol)[..., None] * xdot[k]
            src[(k,) + ix] += c * hdot[k] * kern / vol
    pos = rho > 0
    safe = np.where(pos, rho, 1.0)
    v = np.where(pos[..., None], mom / safe[..., None], 0.0)
    g = np.where(pos, src / safe, 0.0)
    return FieldGrid(box, v, g, rho)
