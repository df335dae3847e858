"""Sparse reconstruction of dynamic measures from time-sampled observations.

The problem is

    min  1/2 sum_i |K_i rho_{t_i} - y_i|^2 + J(rho, m, mu)

over finite combinations ``sum_j c_j (gamma_j, h_j)`` of unit-energy curves
with connected support.  :func:`gcg_solve` alternates

1. insertion of the curve maximising ``<w, curve> / J(curve)`` for the dual
   certificate ``w`` of the current residual (:func:`insertion_step`),
2. a nonnegative reweighting of all atoms (:func:`coefficient_step`),
3. optionally a joint continuous refinement of all atoms (sliding).

Regularisation uses ``sum_j c_j``, the convex upper bound of ``J`` of the
combined triple (exact when the atoms have disjoint supports).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .cone_space import DomainBox, WeightedCurve, support_components
from .characteristics import cutoff
from .energy import EnergyParams, curve_energy
from .errors import EmptyInput, NoImprovingCurve, ValidationError
from .superposition import CurveEnsemble, superpose

log = logging.getLogger(__name__)


# -- observation model ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Gaussian point evaluations ``K_i rho = (int k(x, p_ij) d rho(x))_j`` at times ``t_i``."""

    times: np.ndarray
    detectors: Tuple[np.ndarray, ...]
    kernel_width: float
    data: Optional[Tuple[np.ndarray, ...]] = None

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if times.size < 1 or np.any(np.diff(times) <= 0) or times[0] < 0 or times[-1] > 1:
            raise ValidationError("observation times must be increasing in [0, 1]")
        dets = tuple(np.atleast_2d(np.asarray(p, dtype=float)) for p in self.detectors)
        if len(dets) != times.size:
            raise ValidationError("one detector array per observation time is required")
        if not (self.kernel_width > 0):
            raise ValidationError("kernel width must be > 0")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "detectors", dets)
        if self.data is not None:
            data = tuple(np.asarray(y, dtype=float).ravel() for y in self.data)
            if len(data) != times.size or any(y.size != p.shape[0] for y, p in zip(data, dets)):
                raise ValidationError("data shape does not match the detectors")
            object.__setattr__(self, "data", data)

    @classmethod
    def on_grid(cls, box: DomainBox, times, per_axis: int, kernel_width: float, data=None):
        """Same square detector lattice (cell centres of ``box``) at every time."""
        axes = [box.lower[j] + (np.arange(per_axis) + 0.5) * box.widths[j] / per_axis for j in range(box.dim)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.dim)
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return cls(times, tuple(pts for _ in times), kernel_width, data)

    @property
    def dim_H(self) -> int:
        return sum(p.shape[0] for p in self.detectors)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([p.shape[0] for p in self.detectors])])

    def with_data(self, y) -> "ObservationModel":
        return ObservationModel(self.times, self.detectors, self.kernel_width, self.split(y))

    def split(self, flat) -> Tuple[np.ndarray, ...]:
        flat = np.asarray(flat, dtype=float)
        o = self.offsets
        return tuple(flat[o[i]:o[i + 1]] for i in range(len(self.detectors)))

    @property
    def y(self) -> np.ndarray:
        if self.data is None:
            return np.zeros(self.dim_H)
        return np.concatenate(self.data)

    def kernel(self, i: int, X) -> np.ndarray:
        """``k(x, p_ij)`` for points ``X`` of shape ``(..., d)``: array ``(..., m_i)``."""
        X = np.asarray(X, dtype=float)
        diff = X[..., None, :] - self.detectors[i]
        return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * self.kernel_width**2))

    def kernel_grad(self, i: int, X) -> np.ndarray:
        """Spatial gradient of :meth:`kernel` w.r.t. ``x``: array ``(..., m_i, d)``."""
        X = np.asarray(X, dtype=float)
        diff = X[..., None, :] - self.detectors[i]
        k = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * self.kernel_width**2))
        return -k[..., None] * diff / self.kernel_width**2

    def to_json(self) -> dict:
        out = {
            "times": self.times.tolist(),
            "detectors": [p.tolist() for p in self.detectors],
            "kernel_width": self.kernel_width,
        }
        if self.data is not None:
            out["data"] = [y.tolist() for y in self.data]
        return out


def curve_observation(curve: WeightedCurve, om: ObservationModel) -> np.ndarray:
    out = []
    for i, t in enumerate(om.times):
        h, x = curve.at(t)
        out.append(h * om.kernel(i, x) if h > curve.threshold else np.zeros(om.detectors[i].shape[0]))
    return np.concatenate(out)


def observe(e: CurveEnsemble, om: ObservationModel) -> np.ndarray:
    """``K rho`` for the measure curve of an ensemble, flattened over times."""
    total = np.zeros(om.dim_H)
    for c, curve in e.atoms:
        total += c * curve_observation(curve, om)
    return total


def tikhonov_value(e: CurveEnsemble, om: ObservationModel, p: EnergyParams) -> float:
    r = observe(e, om) - om.y
    reg = math.fsum(c * curve_energy(curve, p, validate=False) for c, curve in e.atoms)
    return 0.5 * float(r @ r) + reg


@dataclass
class Certificate:
    """``w_i(x) = sum_j (y_ij - (K rho)_ij) k(x, p_ij)`` for each observation time."""

    om: ObservationModel
    residual: np.ndarray

    def value(self, i: int, X) -> np.ndarray:
        r = self.om.split(self.residual)[i]
        return self.om.kernel(i, X) @ r

    def grad(self, i: int, X) -> np.ndarray:
        r = self.om.split(self.residual)[i]
        return np.einsum("...md,m->...d", self.om.kernel_grad(i, X), r)

    def pairing(self, curve: WeightedCurve) -> float:
        """Linearised decrease ``sum_i h(t_i) w_i(gamma(t_i))`` of the fidelity."""
        total = 0.0
        for i, t in enumerate(self.om.times):
            h, x = curve.at(t)
            if h > curve.threshold:
                total += h * float(self.value(i, x))
        return total

    def is_zero(self) -> bool:
        return not np.any(self.residual)


def dual_certificate(e: CurveEnsemble, om: ObservationModel) -> Certificate:
    return Certificate(om, om.y - observe(e, om))


# -- curves on a fixed support -----------------------------------------------------


@dataclass
class _SupportModel:
    """Energy and observation of a curve parametrised by ``(z, gamma)`` on nodes ``a..b``.

    Nodes outside ``[a, b]`` carry zero mass.  Cells inside the support use
    the full energy; the (at most two) cells joining the support to zero mass
    carry only the growth and mass terms.
    """

    times: np.ndarray
    a: int
    b: int
    p: EnergyParams
    obs_nodes: np.ndarray  # node index of each observation time

    def energy(self, Z, G):
        p = self.p
        dt = np.diff(self.times)
        a, b = self.a, self.b
        dJz = np.zeros_like(Z)
        dJg = np.zeros_like(G)
        J = 0.0
        if b > a:
            d = dt[a:b]
            z0, z1 = Z[:-1], Z[1:]
            I2 = d * (z0 * z0 + z0 * z1 + z1 * z1) / 3.0
            dG = G[1:] - G[:-1]
            sp2 = np.sum(dG * dG, axis=1) / (d * d)
            coef = 0.5 * p.beta * sp2 + p.alpha
            grow = 2.0 * p.beta * p.delta**2 * (z1 - z0) ** 2 / d
            J += float(np.sum(coef * I2 + grow))
            dI0 = d * (2 * z0 + z1) / 3.0
            dI1 = d * (z0 + 2 * z1) / 3.0
            dgrow = 4.0 * p.beta * p.delta**2 * (z1 - z0) / d
            dJz[:-1] += coef * dI0 - dgrow
            dJz[1:] += coef * dI1 + dgrow
            kin = (p.beta * I2 / (d * d))[:, None] * dG
            dJg[:-1] -= kin
            dJg[1:] += kin
        for node, idx in ((a, 0), (b, -1)):
            cell = node - 1 if idx == 0 else node
            if (idx == 0 and a > 0) or (idx == -1 and b < self.times.size - 1):
                d = dt[cell]
                z = Z[idx]
                J += d * p.alpha * z * z / 3.0 + 2.0 * p.beta * p.delta**2 * z * z / d
                dJz[idx] += 2.0 * d * p.alpha * z / 3.0 + 4.0 * p.beta * p.delta**2 * z / d
        return J, dJz, dJg

    def observation(self, om: ObservationModel, Z, G):
        """Observation vector and a closure for its adjoint gradient."""
        parts = []
        active = []
        for i, k in enumerate(self.obs_nodes):
            m = om.detectors[i].shape[0]
            if self.a <= k <= self.b:
                j = k - self.a
                kv = om.kernel(i, G[j])
                parts.append(Z[j] ** 2 * kv)
                active.append((i, j, kv))
            else:
                parts.append(np.zeros(m))
        vec = np.concatenate(parts)

        def adjoint(r):
            gz = np.zeros_like(Z)
            gg = np.zeros_like(G)
            rs = om.split(r)
            for i, j, kv in active:
                gz[j] += 2.0 * Z[j] * float(kv @ rs[i])
                gg[j] += Z[j] ** 2 * (om.kernel_grad(i, G[j]).T @ rs[i])
            return gz, gg

        return vec, adjoint

    def to_curve(self, Z, G) -> WeightedCurve:
        n = self.times.size
        masses = np.zeros(n)
        masses[self.a:self.b + 1] = Z**2
        pos = np.empty((n, G.shape[1]))
        pos[self.a:self.b + 1] = G
        pos[: self.a] = G[0]
        pos[self.b + 1:] = G[-1]
        return WeightedCurve(self.times, masses, pos)


# -- insertion ---------------------------------------------------------------------


@dataclass
class InsertionConfig:
    """Resolution of the lattice search and of the continuous refinement."""

    lattice: Tuple[int, ...] = (15, 15)
    time_steps: int = 20
    n_levels: int = 6
    level_ratio: float = 0.6
    stencil_radius: int = 2
    refine: bool = True
    refine_iters: int = 200
    restarts: int = 2
    restart_scale: float = 0.02
    max_dinkelbach: int = 50


def solver_time_grid(om: ObservationModel, steps: int) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform grid refined with the observation times; returns grid and obs node indices."""
    grid = np.unique(np.concatenate([np.linspace(0.0, 1.0, steps + 1), om.times]))
    merged = [grid[0]]
    for t in grid[1:]:
        if t - merged[-1] > 1e-9:
            merged.append(t)
        else:
            # keep observation times exactly
            merged[-1] = t if np.any(np.abs(om.times - t) <= 1e-9) else merged[-1]
    grid = np.array(merged)
    grid[0], grid[-1] = 0.0, 1.0
    idx = np.array([int(np.argmin(np.abs(grid - t))) for t in om.times])
    return grid, idx


def lattice_points(box: DomainBox, shape) -> np.ndarray:
    axes = [box.lower[j] + (np.arange(n) + 0.5) * box.widths[j] / n for j, n in enumerate(shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class LatticeResult:
    curve: Optional[WeightedCurve]
    ratio: float
    support: Tuple[int, int]
    iterations: int


def _offsets(d: int, radius: int) -> np.ndarray:
    rng = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return grid[np.sum(grid * grid, axis=1) <= radius * radius]


def _shift(arr: np.ndarray, off, fill) -> np.ndarray:
    """``out[x] = arr[x - off]`` over the leading ``len(off)`` axes, ``fill`` outside."""
    out = np.full_like(arr, fill)
    src, dst = [], []
    for o, n in zip(off, arr.shape):
        if o >= 0:
            src.append(slice(0, n - o))
            dst.append(slice(o, n))
        else:
            src.append(slice(-o, n))
            dst.append(slice(0, n + o))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _dp(cert: Certificate, box, cfg: InsertionConfig, p: EnergyParams, times, obs_idx, lam):
    """Maximise ``A(c) - lam J(c)`` over lattice curves with connected support.

    Returns ``(value, masses, positions, support)``; ``masses is None`` for the
    empty curve.
    """
    shape = tuple(cfg.lattice)
    d = len(shape)
    pts = lattice_points(box, shape)
    spacing = box.widths / np.asarray(shape)
    levels = cfg.level_ratio ** np.arange(cfg.n_levels)
    L = levels.size
    z0 = levels[:, None]
    z1 = levels[None, :]
    I2_unit = (z0 * z0 + z0 * z1 + z1 * z1) / 3.0
    dz2 = (z1 - z0) ** 2
    offs = _offsets(d, cfg.stencil_radius)
    disp2 = np.sum((offs * spacing) ** 2, axis=1)
    n = times.size
    dt = np.diff(times)
    rewards = np.zeros((n,) + shape + (L,))
    for i, k in enumerate(obs_idx):
        w = cert.value(i, pts.reshape(-1, d)).reshape(shape)
        rewards[k] += w[..., None] * (levels**2)
    neg = -np.inf
    V = rewards[0].copy()
    dead = neg
    back_off = np.zeros((n,) + shape + (L,), dtype=np.int32)
    back_lvl = np.zeros((n,) + shape + (L,), dtype=np.int32)  # -1 means born here
    back_lvl[0] = -1
    dead_from = None  # (node, flat state index) where the best dead path died
    dead_hist = [None] * n
    for k in range(n - 1):
        h = dt[k]
        best = np.full(shape + (L,), neg)
        arg_off = np.zeros(shape + (L,), dtype=np.int32)
        arg_lvl = np.zeros(shape + (L,), dtype=np.int32)
        for oi, off in enumerate(offs):
            cost = h * I2_unit * (0.5 * p.beta * disp2[oi] / (h * h) + p.alpha) + 2.0 * p.beta * p.delta**2 * dz2 / h
            shifted = _shift(V, off, neg)
            cand = shifted[..., :, None] - lam * cost
            lvl = np.argmax(cand, axis=-2)
            val = np.take_along_axis(cand, lvl[..., None, :], axis=-2)[..., 0, :]
            better = val > best
            best = np.where(better, val, best)
            arg_off = np.where(better, oi, arg_off)
            arg_lvl = np.where(better, lvl, arg_lvl)
        birth = -lam * (h * p.alpha * levels**2 / 3.0 + 2.0 * p.beta * p.delta**2 * levels**2 / h)
        born = birth > best
        best = np.where(born, birth, best)
        arg_lvl = np.where(born, -1, arg_lvl)
        death = V - lam * (h * p.alpha * levels**2 / 3.0 + 2.0 * p.beta * p.delta**2 * levels**2 / h)
        j = int(np.argmax(death))
        if death.flat[j] > dead:
            dead = float(death.flat[j])
            dead_from = (k, j)
        dead_hist[k + 1] = dead_from
        V = best + rewards[k + 1]
        back_off[k + 1] = arg_off
        back_lvl[k + 1] = arg_lvl
    j = int(np.argmax(V))
    alive_val = float(V.flat[j])
    if max(alive_val, dead) <= 0.0:
        return 0.0, None, None, None
    if alive_val >= dead:
        end_node, state = n - 1, j
        value = alive_val
    else:
        end_node, state = dead_hist[n - 1]
        value = dead
    masses = np.zeros(n)
    positions = np.zeros((n, d))
    idx = np.array(np.unravel_index(state, shape + (L,)))
    k = end_node
    while True:
        x_idx, lvl = idx[:-1], idx[-1]
        masses[k] = levels[lvl] ** 2
        positions[k] = pts[tuple(x_idx)]
        prev_lvl = back_lvl[(k,) + tuple(idx)]
        if prev_lvl < 0:
            break
        off = offs[back_off[(k,) + tuple(idx)]]
        idx = np.concatenate([x_idx - off, [prev_lvl]])
        k -= 1
    start = k
    positions[:start] = positions[start]
    positions[end_node + 1:] = positions[end_node]
    return value, masses, positions, (start, end_node)


def lattice_search(cert: Certificate, box: DomainBox, p: EnergyParams, cfg: InsertionConfig) -> LatticeResult:
    """Best Rayleigh quotient ``A(c) / J(c)`` over lattice curves (Dinkelbach iteration)."""
    times, obs_idx = solver_time_grid(cert.om, cfg.time_steps)
    lam = 0.0
    best = LatticeResult(None, 0.0, (0, -1), 0)
    for it in range(cfg.max_dinkelbach):
        value, masses, positions, support = _dp(cert, box, cfg, p, times, obs_idx, lam)
        if masses is None:
            break
        curve = WeightedCurve(times, masses, positions)
        J = curve_energy(curve, p, validate=False)
        ratio = cert.pairing(curve) / J
        if ratio <= best.ratio * (1 + 1e-12):
            break
        best = LatticeResult(curve, ratio, support, it + 1)
        lam = ratio
    return best


def _refine(cert: Certificate, box: DomainBox, p: EnergyParams, cfg: InsertionConfig, start: LatticeResult, rng):
    """Projected quasi-Newton ascent of the Rayleigh quotient on the lattice curve's support."""
    curve = start.curve
    times = curve.times
    _, obs_idx = solver_time_grid(cert.om, cfg.time_steps)
    a, b = start.support
    model = _SupportModel(times, a, b, p, obs_idx)
    n = b - a + 1
    d = curve.dim
    Z0 = np.sqrt(curve.masses[a:b + 1])
    G0 = curve.positions[a:b + 1].copy()
    scale = Z0.max()
    Z0 = Z0 / scale

    def neg_ratio(theta):
        Z = theta[:n]
        G = theta[n:].reshape(n, d)
        J, dJz, dJg = model.energy(Z, G)
        vec, adj = model.observation(cert.om, Z, G)
        A = float(vec @ cert.residual)
        dAz, dAg = adj(cert.residual)
        R = A / J
        gz = (dAz * J - A * dJz) / J**2
        gg = (dAg * J - A * dJg) / J**2
        return -R, -np.concatenate([gz, gg.ravel()])

    bounds = [(0.0, None)] * n + [(lo, hi) for _ in range(n) for lo, hi in zip(box.lower, box.upper)]
    starts = [np.concatenate([Z0, G0.ravel()])]
    for _ in range(cfg.restarts):
        Gp = box.clamp(G0 + cfg.restart_scale * box.widths * rng.standard_normal(G0.shape))
        Zp = Z0 * np.exp(0.1 * rng.standard_normal(n))
        starts.append(np.concatenate([Zp, Gp.ravel()]))
    best_theta, best_val = None, -start.ratio
    for theta0 in starts:
        res = minimize(neg_ratio, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.refine_iters})
        if np.all(np.isfinite(res.x)) and res.fun < best_val:
            best_val, best_theta = res.fun, res.x
    if best_theta is None:
        return None
    Z = best_theta[:n]
    G = best_theta[n:].reshape(n, d)
    return model.to_curve(Z, G)


@dataclass
class InsertionResult:
    curve: WeightedCurve
    value: float
    lattice_value: float


def _unit(curve: WeightedCurve, p: EnergyParams) -> WeightedCurve:
    curve = _trim_support(curve)
    J = curve_energy(curve, p, validate=False)
    return curve.scaled(1.0 / J)


def _trim_support(curve: WeightedCurve) -> WeightedCurve:
    """Keep only the largest-mass support component (connected support)."""
    comps = support_components(curve)
    if len(comps) <= 1:
        return curve
    masses = curve.masses
    a, b = max(comps, key=lambda ab: masses[ab[0]:ab[1] + 1].sum())
    h = np.zeros_like(masses)
    h[a:b + 1] = masses[a:b + 1]
    return curve.with_masses(h)


def insertion_step(
    cert: Certificate, box: DomainBox, p: EnergyParams, cfg: Optional[InsertionConfig] = None, seed: int = 0
) -> InsertionResult:
    """Unit-energy curve with connected support maximising the certificate pairing."""
    cfg = cfg or InsertionConfig()
    if len(cfg.lattice) != box.dim:
        raise ValidationError("lattice dimension does not match the domain")
    lat = lattice_search(cert, box, p, cfg)
    if lat.curve is None or lat.ratio <= 0:
        raise NoImprovingCurve(lat.ratio)
    best_curve, best_val = _unit(lat.curve, p), lat.ratio
    if cfg.refine:
        rng = np.random.default_rng(seed)
        refined = _refine(cert, box, p, cfg, lat, rng)
        if refined is not None:
            unit = _unit(refined, p)
            val = cert.pairing(unit)
            if val > best_val:
                best_curve, best_val = unit, val
    return InsertionResult(best_curve, cert.pairing(best_curve), lat.ratio)


# -- coefficients ------------------------------------------------------------------


def _objective(A, y, c):
    r = A @ c - y
    return 0.5 * float(r @ r) + float(np.sum(c))


def coefficient_step(
    observations: np.ndarray,
    y: np.ndarray,
    c0: Optional[np.ndarray] = None,
    tol: float = 1e-13,
    max_iter: int = 50000,
    prune: float = 1e-10,
) -> Tuple[np.ndarray, np.ndarray]:
    """Minimise ``1/2 |A c - y|^2 + sum c`` over ``c >= 0``.

    ``observations`` holds one column per unit-energy atom.  Projected
    gradient with step ``1/|A|^2`` (monotone), finished by an exact solve on
    the active set when that lowers the objective.  Returns the coefficients
    and the boolean mask of atoms kept after pruning.
    """
    A = np.asarray(observations, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    y = np.asarray(y, dtype=float)
    n = A.shape[1]
    c = np.zeros(n) if c0 is None else np.maximum(np.asarray(c0, dtype=float), 0.0)
    Lip = float(np.linalg.norm(A, 2) ** 2)
    if Lip == 0:
        return np.zeros(n), np.zeros(n, dtype=bool)
    f = _objective(A, y, c)
    for _ in range(max_iter):
        grad = A.T @ (A @ c - y) + 1.0
        c_new = np.maximum(c - grad / Lip, 0.0)
        f_new = _objective(A, y, c_new)
        if f_new > f:
            break
        done = np.max(np.abs(c_new - c)) <= tol * max(1.0, np.max(c_new))
        c, f = c_new, f_new
        if done:
            break
    active = c > 0
    if active.any():
        As = A[:, active]
        try:
            cs = np.linalg.lstsq(As.T @ As, As.T @ y - 1.0, rcond=None)[0]
        except np.linalg.LinAlgError:
            cs = None
        if cs is not None and np.all(cs > 0):
            trial = c.copy()
            trial[active] = cs
            if _objective(A, y, trial) <= f:
                c = trial
    keep = c > prune * max(1.0, float(np.max(c, initial=0.0)))
    c = np.where(keep, c, 0.0)
    return c, keep


# -- sliding -------------------------------------------------------------------------


def _slide(atoms, om: ObservationModel, p: EnergyParams, box: DomainBox, obs_nodes, iters: int):
    """Jointly refine all atoms' ``(z, gamma)`` on their supports; returns new atoms or None."""
    models, thetas, sizes = [], [], []
    for c, curve in atoms:
        comps = support_components(curve)
        if len(comps) != 1:
            return None
        a, b = comps[0]
        model = _SupportModel(curve.times, a, b, p, obs_nodes)
        Z = np.sqrt(c * curve.masses[a:b + 1])
        G = curve.positions[a:b + 1]
        models.append(model)
        thetas.append(np.concatenate([Z, G.ravel()]))
        sizes.append(b - a + 1)
    d = box.dim
    y = om.y
    splits = np.cumsum([t.size for t in thetas])[:-1]

    def objective(theta):
        parts = np.split(theta, splits)
        total = np.zeros(om.dim_H)
        cache = []
        reg = 0.0
        for model, part, n in zip(models, parts, sizes):
            Z, G = part[:n], part[n:].reshape(n, d)
            vec, adj = model.observation(om, Z, G)
            J, dJz, dJg = model.energy(Z, G)
            total += vec
            reg += J
            cache.append((adj, dJz, dJg))
        r = total - y
        grads = []
        for adj, dJz, dJg in cache:
            gz, gg = adj(r)
            grads.append(np.concatenate([gz + dJz, (gg + dJg).ravel()]))
        return 0.5 * float(r @ r) + reg, np.concatenate(grads)

    bounds = []
    for n in sizes:
        bounds += [(0.0, None)] * n + [(lo, hi) for _ in range(n) for lo, hi in zip(box.lower, box.upper)]
    theta0 = np.concatenate(thetas)
    f0, _ = objective(theta0)
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": iters})
    if not (np.all(np.isfinite(res.x)) and res.fun < f0):
        return None
    out = []
    for model, part, n in zip(models, np.split(res.x, splits), sizes):
        curve = model.to_curve(part[:n], part[n:].reshape(n, d))
        curve = _trim_support(curve)
        if not np.any(curve.supported):
            continue
        J = curve_energy(curve, p, validate=False)
        if J <= 0:
            continue
        out.append((J, curve.scaled(1.0 / J)))
    return out


# -- solver ------------------------------------------------------------------------


@dataclass
class SolverConfig:
    max_iters: int = 20
    tol: float = 1e-3
    seed: int = 0
    sliding: bool = True
    sliding_iters: int = 300
    insertion: InsertionConfig = field(default_factory=InsertionConfig)

    def to_json(self) -> dict:
        out = asdict(self)
        out["insertion"]["lattice"] = list(self.insertion.lattice)
        return out


@dataclass
class SparseSolution:
    ensemble: CurveEnsemble
    objective_trace: List[float]
    certificate_trace: List[float]
    iterations: int
    converged: bool
    max_iterations_reached: bool
    residual_norm: float
    data_norm: float
    dim_H: int

    @property
    def coefficients(self) -> np.ndarray:
        return self.ensemble.coefficients

    def to_json(self) -> dict:
        return {
            "atoms": [{"coefficient": c, "curve": curve.to_json()} for c, curve in self.ensemble.atoms],
            "diagnostics": {
                "objective_trace": self.objective_trace,
                "certificate_trace": self.certificate_trace,
                "iterations": self.iterations,
                "converged": self.converged,
                "max_iterations_reached": self.max_iterations_reached,
                "residual_norm": self.residual_norm,
                "data_norm": self.data_norm,
                "dim_H": self.dim_H,
                "n_atoms": len(self.ensemble),
            },
        }


def gcg_solve(om: ObservationModel, p: EnergyParams, box: DomainBox, config: Optional[SolverConfig] = None) -> SparseSolution:
    """Generalised conditional gradient for ``1/2 |K rho - y|^2 + J``."""
    cfg = config or SolverConfig()
    y = om.y
    times, obs_idx = solver_time_grid(om, cfg.insertion.time_steps)
    atoms: List[Tuple[float, WeightedCurve]] = []
    ens = CurveEnsemble((), times)
    objective = [tikhonov_value(ens, om, p)]
    cert_trace: List[float] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        cert = dual_certificate(ens, om)
        try:
            ins = insertion_step(cert, box, p, cfg.insertion, seed=cfg.seed + it)
        except NoImprovingCurve as exc:
            cert_trace.append(float(exc.best_value))
            converged = True
            break
        cert_trace.append(ins.value)
        log.info("iteration %d: certificate %.6g, %d atoms", it, ins.value, len(atoms))
        if ins.value <= 1.0 + cfg.tol:
            converged = True
            break
        candidates = atoms + [(0.0, ins.curve)]
        cols = np.stack([curve_observation(curve, om) for _, curve in candidates], axis=1)
        c, keep = coefficient_step(cols, y, np.array([a for a, _ in candidates]))
        new_atoms = [(float(ci), curve) for ci, (_, curve), k in zip(c, candidates, keep) if k]
        new_ens = CurveEnsemble(tuple(new_atoms), times)
        new_obj = tikhonov_value(new_ens, om, p)
        if new_obj > objective[-1] + 1e-12 * max(1.0, abs(objective[-1])):
            log.info("insertion did not lower the objective; stopping")
            converged = True
            break
        atoms, ens = new_atoms, new_ens
        if cfg.sliding and atoms:
            slid = _slide(atoms, om, p, box, obs_idx, cfg.sliding_iters)
            if slid:
                cols = np.stack([curve_observation(curve, om) for _, curve in slid], axis=1)
                c, keep = coefficient_step(cols, y, np.array([a for a, _ in slid]))
                slid = [(float(ci), curve) for ci, (_, curve), k in zip(c, slid, keep) if k]
                slid_ens = CurveEnsemble(tuple(slid), times)
                slid_obj = tikhonov_value(slid_ens, om, p)
                if slid_obj < new_obj:
                    atoms, ens, new_obj = slid, slid_ens, slid_obj
        objective.append(new_obj)
    else:
        it = cfg.max_iters
    r = observe(ens, om) - y
    return SparseSolution(
        ens,
        objective,
        cert_trace,
        it,
        converged,
        not converged,
        float(np.linalg.norm(r)),
        float(np.linalg.norm(y)),
        om.dim_H,
    )


# -- extremality and selection -------------------------------------------------------------


@dataclass
class ExtremalityReport:
    regularity: bool
    connected: bool
    unit_energy: bool
    energy: float
    n_components: int
    norms: dict

    @property
    def ok(self) -> bool:
        return self.regularity and self.connected and self.unit_energy

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "regularity": self.regularity,
            "connected": self.connected,
            "unit_energy": self.unit_energy,
            "energy": self.energy,
            "n_components": self.n_components,
            "norms": self.norms,
        }


def extremality_check(
    c: WeightedCurve, p: EnergyParams, energy_tol: float = 1e-6, cap: float = 1e8
) -> ExtremalityReport:
    """Check the three defining properties of an extremal curve.

    (i) finite discrete L^2 norms of ``h'``, ``sqrt(h)'`` and ``(sqrt(h) gamma)'``
    below ``cap``; (ii) connected support; (iii) ``|J - 1| <= energy_tol``.
    """
    sup = c.supported
    h = np.where(sup, c.masses, 0.0)
    z = np.sqrt(h)
    dt = np.diff(c.times)
    zg = z[:, None] * np.where(sup[:, None], c.positions, 0.0)
    norms = {
        "h_dot": float(np.sqrt(np.sum(np.diff(h) ** 2 / dt))),
        "sqrt_h_dot": float(np.sqrt(np.sum(np.diff(z) ** 2 / dt))),
        "sqrt_h_gamma_dot": float(np.sqrt(np.sum(np.sum(np.diff(zg, axis=0) ** 2, axis=1) / dt))),
    }
    regular = all(math.isfinite(v) and v <= cap for v in norms.values())
    comps = support_components(c)
    energy = curve_energy(c, p, validate=False)
    return ExtremalityReport(regular, len(comps) <= 1, abs(energy - 1.0) <= energy_tol, energy, len(comps), norms)


def minimal_tv_select(solutions: Sequence[CurveEnsemble], atol: float = 1e-8) -> CurveEnsemble:
    """Cut off every curve at its vanishing time and return the candidate of least ``|rho|``."""
    if not solutions:
        raise EmptyInput("no candidate ensembles")
    m0 = [superpose(e, 0.0).total_mass for e in solutions]
    if max(m0) - min(m0) > atol * max(1.0, max(m0)):
        raise ValidationError("candidates do not share the initial slice")
    cut = [e.map_curves(cutoff) for e in solutions]
    tv = [e.total_variation() for e in cut]
    return cut[int(np.argmin(tv))]
