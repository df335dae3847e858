import itertools

import numpy as np
import pytest
from scipy.optimize import minimize

from wfrcurves import (
    CurveEnsemble,
    DomainBox,
    EmptyInput,
    EnergyParams,
    NoImprovingCurve,
    ObservationModel,
    SolverConfig,
    ValidationError,
    WeightedCurve,
    coefficient_step,
    curve_energy,
    dual_certificate,
    extremality_check,
    gcg_solve,
    insertion_step,
    minimal_tv_select,
    observe,
    superpose,
    tikhonov_value,
)
from wfrcurves.inverse import Certificate, InsertionConfig, lattice_search, solver_time_grid

BOX = DomainBox.unit(2)
P = EnergyParams(0.05, 0.05, 1.0)


def unit(curve, p=P):
    return curve.scaled(1.0 / curve_energy(curve, p))


def segment(x0, x1, n=21):
    t = np.linspace(0, 1, n)
    return unit(WeightedCurve(t, np.ones(n), np.outer(1 - t, x0) + np.outer(t, x1)))


def static(x, n=21, mass=1.0):
    t = np.linspace(0, 1, n)
    return WeightedCurve(t, np.full(n, mass), np.tile(x, (n, 1)))


def model(per_axis=5, times=np.linspace(0, 1, 5), width=0.15):
    return ObservationModel.on_grid(BOX, times, per_axis, width)


# -- observation ------------------------------------------------------------------------


def test_observation_model_checks():
    with pytest.raises(ValidationError):
        ObservationModel([0.5, 0.2], ([[0.0, 0.0]], [[0.0, 0.0]]), 0.1)
    with pytest.raises(ValidationError):
        ObservationModel([0.5], ([[0.0, 0.0]],), 0.0)
    with pytest.raises(ValidationError):
        ObservationModel([0.5], ([[0.0, 0.0]],), 0.1, data=([1.0, 2.0],))


def test_observe_empty_is_zero():
    om = model()
    assert np.array_equal(observe(CurveEnsemble(), om), np.zeros(om.dim_H))


def test_observe_atom_on_detector():
    om = ObservationModel([0.5], ([[0.3, 0.4], [0.3, 0.7]],), 0.1)
    e = CurveEnsemble(((2.0, static([0.3, 0.4], mass=1.5)),))
    got = observe(e, om)
    assert got[0] == pytest.approx(3.0, abs=1e-15)
    assert got[1] == pytest.approx(3.0 * np.exp(-0.09 / 0.02), rel=1e-14)


def test_observe_is_linear():
    om = model()
    a = CurveEnsemble(((0.7, segment([0.2, 0.3], [0.7, 0.4])),))
    b = CurveEnsemble(((1.3, segment([0.8, 0.8], [0.3, 0.7])),))
    assert np.allclose(observe(a + b, om), observe(a, om) + observe(b, om), rtol=1e-14, atol=0)


def test_kernel_gradient_matches_finite_differences():
    om = model()
    X = np.array([0.33, 0.61])
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (om.kernel(0, X + e) - om.kernel(0, X - e)) / (2 * h)
        assert np.allclose(om.kernel_grad(0, X)[:, j], fd, rtol=1e-6, atol=1e-10)


def test_tikhonov_value_cases():
    om = model()
    assert tikhonov_value(CurveEnsemble(), om, P) == 0.0
    y = np.linspace(0, 1, om.dim_H)
    om = om.with_data(y)
    assert tikhonov_value(CurveEnsemble(), om, P) == pytest.approx(0.5 * y @ y, rel=1e-15)
    c = segment([0.2, 0.3], [0.7, 0.4])
    e = CurveEnsemble(((0.4, c),))
    r = observe(e, om) - y
    assert tikhonov_value(e, om, P) == pytest.approx(0.5 * r @ r + 0.4, rel=1e-12)


# -- certificate ---------------------------------------------------------------------------


def test_certificate_zero_residual():
    om = model()
    truth = CurveEnsemble(((1.0, segment([0.2, 0.3], [0.7, 0.4])),))
    om = om.with_data(observe(truth, om))
    cert = dual_certificate(truth, om)
    assert cert.is_zero()
    with pytest.raises(NoImprovingCurve):
        insertion_step(cert, BOX, P, InsertionConfig(lattice=(5, 5), time_steps=4))


def test_certificate_single_detector():
    om = ObservationModel([0.5], ([[0.5, 0.5]],), 0.2, data=([1.0],))
    cert = dual_certificate(CurveEnsemble(), om)
    assert float(cert.value(0, [0.5, 0.5])) == 1.0
    assert float(cert.value(0, [0.7, 0.5])) == pytest.approx(np.exp(-0.5), rel=1e-14)


def test_certificate_pairing_is_directional_derivative(rng):
    om = model().with_data(rng.normal(size=125))
    base = CurveEnsemble(((0.5, segment([0.3, 0.3], [0.6, 0.5])),))
    cert = dual_certificate(base, om)
    c = static([0.45, 0.55])
    s = 1e-6

    def fidelity(e):
        r = observe(e, om) - om.y
        return 0.5 * r @ r

    fd = (fidelity(base + CurveEnsemble(((s, c),))) - fidelity(base)) / s
    assert -fd == pytest.approx(cert.pairing(c), rel=1e-4)


# -- insertion ------------------------------------------------------------------------------


def test_solver_time_grid_contains_observation_times():
    om = model(times=[0.1, 0.37, 0.9])
    grid, idx = solver_time_grid(om, 10)
    assert grid[0] == 0.0 and grid[-1] == 1.0
    assert np.array_equal(grid[idx], om.times)


def brute_force_ratio(levels, steps, reward, p):
    """Best A/J over all mass profiles with connected support at one fixed point."""
    n = steps + 1
    dt = 1.0 / steps
    best = 0.0
    for prof in itertools.product([0.0, *levels], repeat=n):
        z = np.sqrt(np.array(prof))
        nz = np.flatnonzero(z)
        if nz.size == 0 or nz[-1] - nz[0] + 1 != nz.size:
            continue
        z0, z1 = z[:-1], z[1:]
        J = np.sum(p.alpha * dt * (z0 * z0 + z0 * z1 + z1 * z1) / 3 + 2 * p.beta * p.delta**2 * (z1 - z0) ** 2 / dt)
        A = float(np.dot(reward, prof))
        best = max(best, A / J)
    return best


def test_lattice_search_matches_brute_force():
    steps, L, ratio = 4, 3, 0.5
    p = EnergyParams(0.3, 0.2, 0.8)
    om = ObservationModel([0.25, 0.75], ([[0.5, 0.5]], [[0.5, 0.5]]), 0.2, data=([1.0], [3.0]))
    cert = dual_certificate(CurveEnsemble(), om)
    cfg = InsertionConfig(lattice=(1, 1), time_steps=steps, n_levels=L, level_ratio=ratio, refine=False)
    got = lattice_search(cert, BOX, p, cfg)
    reward = np.zeros(steps + 1)
    reward[1], reward[3] = 1.0, 3.0
    ref = brute_force_ratio([ratio ** (2 * k) for k in range(L)], steps, reward, p)
    assert got.ratio == pytest.approx(ref, rel=1e-12)


def test_insertion_locates_static_atom():
    om = model(per_axis=5)
    truth = CurveEnsemble(((2.0, unit(static([0.45, 0.55]))),))
    om = om.with_data(observe(truth, om))
    cfg = InsertionConfig(lattice=(15, 15), time_steps=8)
    res = insertion_step(dual_certificate(CurveEnsemble(), om), BOX, P, cfg)
    assert curve_energy(res.curve, P) == pytest.approx(1.0, abs=1e-8)
    assert res.value >= res.lattice_value
    cell = 1.0 / 15
    h, x = res.curve.at(0.5)
    assert h > 0 and np.linalg.norm(x - [0.45, 0.55]) <= 2 * cell


def test_insertion_rejects_lattice_dimension():
    om = model().with_data(np.ones(125))
    with pytest.raises(ValidationError):
        insertion_step(dual_certificate(CurveEnsemble(), om), BOX, P, InsertionConfig(lattice=(5,)))


# -- coefficients ------------------------------------------------------------------------------


def test_coefficient_step_scalar_closed_form(rng):
    a = rng.normal(size=8)
    y = 3 * a
    c, keep = coefficient_step(a, y)
    assert c[0] == pytest.approx(max(0.0, (a @ y - 1) / (a @ a)), rel=1e-10)
    assert keep.tolist() == [True]


def test_coefficient_step_zero_data():
    c, keep = coefficient_step(np.eye(3), np.zeros(3))
    assert np.all(c == 0) and not keep.any()


def test_coefficient_step_duplicate_columns(rng):
    a = rng.normal(size=6)
    y = 2 * a
    c, _ = coefficient_step(np.stack([a, a], axis=1), y)
    assert c.sum() == pytest.approx((a @ y - 1) / (a @ a), rel=1e-8)


def test_coefficient_step_matches_lbfgsb(rng):
    A = rng.normal(size=(10, 4))
    y = rng.normal(size=10) * 3
    c, _ = coefficient_step(A, y)

    def f(x):
        r = A @ x - y
        return 0.5 * r @ r + x.sum()

    ref = minimize(f, np.ones(4), jac=lambda x: A.T @ (A @ x - y) + 1, bounds=[(0, None)] * 4, method="L-BFGS-B",
                   options={"ftol": 1e-15, "gtol": 1e-12})
    assert f(c) <= ref.fun + 1e-9


# -- solver --------------------------------------------------------------------------------


def test_gcg_zero_data():
    sol = gcg_solve(model(), P, BOX, SolverConfig(insertion=InsertionConfig(lattice=(5, 5), time_steps=4)))
    assert len(sol.ensemble) == 0
    assert sol.converged and sol.iterations == 1
    assert sol.residual_norm == 0.0


def test_gcg_static_atom():
    om = model()
    truth = CurveEnsemble(((2.0, unit(static([0.45, 0.55]))),))
    om = om.with_data(observe(truth, om))
    sol = gcg_solve(om, P, BOX)
    assert sol.converged
    assert sol.residual_norm <= 1e-2 * sol.data_norm
    assert np.linalg.norm(superpose(sol.ensemble, 0.5).centroid() - [0.45, 0.55]) <= 0.02


@pytest.fixture(scope="module")
def two_atoms():
    truth = CurveEnsemble(((1.0, segment([0.2, 0.3], [0.7, 0.4])), (1.0, segment([0.8, 0.8], [0.3, 0.7]))))
    om = model()
    om = om.with_data(observe(truth, om))
    return truth, om, gcg_solve(om, P, BOX)


def test_gcg_two_moving_atoms(two_atoms):
    truth, om, sol = two_atoms
    assert sol.converged
    assert sol.residual_norm <= 1e-3 * sol.data_norm
    assert all(b <= a + 1e-12 for a, b in zip(sol.objective_trace, sol.objective_trace[1:]))
    for c, curve in sol.ensemble.atoms:
        assert extremality_check(curve, P).ok
    ends = sorted(tuple(np.round(curve.at(0.0)[1], 1)) for _, curve in sol.ensemble.atoms)
    assert ends == [(0.2, 0.3), (0.8, 0.8)]


def test_gcg_is_deterministic(two_atoms):
    _, om, sol = two_atoms
    again = gcg_solve(om, P, BOX)
    assert np.array_equal(again.coefficients, sol.coefficients)
    assert again.objective_trace == sol.objective_trace


def test_solution_json_shape(two_atoms):
    doc = two_atoms[2].to_json()
    assert doc["diagnostics"]["n_atoms"] == len(doc["atoms"])
    assert doc["diagnostics"]["dim_H"] == 125


# -- extremality and selection --------------------------------------------------------------


def test_extremality_cases():
    good = unit(static([0.5, 0.5]))
    assert extremality_check(good, P).ok
    t = np.linspace(0, 1, 3)
    split = unit(WeightedCurve(t, [1.0, 0.0, 1.0], np.zeros((3, 2))))
    rep = extremality_check(split, P)
    assert not rep.connected and rep.n_components == 2 and not rep.ok
    doubled = extremality_check(good.scaled(2.0), P)
    assert doubled.regularity and doubled.connected and not doubled.unit_energy


def test_extremality_cap():
    rep = extremality_check(unit(segment([0.1, 0.1], [0.9, 0.9])), P, cap=1e-3)
    assert not rep.regularity


def test_minimal_tv_select():
    t = np.linspace(0, 1, 3)
    x = np.zeros((3, 2))
    flat = CurveEnsemble(((1.0, WeightedCurve(t, [1.0, 1.0, 1.0], x)),))
    growing = CurveEnsemble(((1.0, WeightedCurve(t, [1.0, 2.0, 3.0], x)),))
    revived = CurveEnsemble(((1.0, WeightedCurve(t, [1.0, 0.0, 5.0], x)),))
    assert minimal_tv_select([growing, flat]).curves[0].masses.tolist() == [1.0, 1.0, 1.0]
    assert minimal_tv_select([growing, flat, revived]).curves[0].masses.tolist() == [1.0, 0.0, 0.0]
    assert minimal_tv_select([flat]).curves[0].masses.tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(EmptyInput):
        minimal_tv_select([])
    other = CurveEnsemble(((1.0, WeightedCurve(t, [2.0, 2.0, 2.0], x)),))
    with pytest.raises(ValidationError):
        minimal_tv_select([flat, other])


def test_zero_certificate_pairs_to_zero():
    om = model()
    cert = Certificate(om, np.zeros(om.dim_H))
    assert cert.pairing(static([0.5, 0.5])) == 0.0
