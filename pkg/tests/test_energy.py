import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wfrcurves import (
    EnergyParams,
    InvalidCurve,
    InvalidInterval,
    NonAbsolutelyContinuous,
    RangeError,
    SchemaError,
    WeightedCurve,
    ZeroEnergy,
    b_delta,
    coercivity_bounds,
    curve_energy,
    curve_energy_localized,
    normalize_to_unit_energy,
    psi_delta,
)
from wfrcurves.cone_space import constant_curve
from wfrcurves.energy import (
    DiscreteTriple,
    b_delta_raw,
    energy_terms,
    fisher_information,
    holder_gap,
    induced_triple,
    mass_integral,
    momentum_norm,
    source_norm,
)

from oracles import smooth_random_curve, trapezoid

positive = st.floats(0.05, 5.0)


# -- parameters --------------------------------------------------------------------


@pytest.mark.parametrize("name", ["alpha", "beta", "delta"])
@pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
def test_params_range(name, bad):
    kw = {"alpha": 1.0, "beta": 1.0, "delta": 1.0, name: bad}
    with pytest.raises(RangeError, match=name):
        EnergyParams(**kw)


def test_params_from_json_requires_all_keys():
    with pytest.raises(SchemaError, match="energy.delta"):
        EnergyParams.from_json({"alpha": 1, "beta": 1})
    p = EnergyParams.from_json({"alpha": 1, "beta": 2, "delta": 0.5})
    assert p.coercivity_constant == min(2.0, 2.0 * 0.25)


# -- psi and B -------------------------------------------------------------------------


def test_psi_branches():
    assert psi_delta(1.0, [1.0, 2.0], 3.0, 0.5) == (5.0 + 0.25 * 9.0) / 2.0
    assert psi_delta(0.0, [0.0, 0.0], 0.0, 1.0) == 0.0
    assert psi_delta(0.0, [1.0, 0.0], 0.0, 1.0) == math.inf
    assert psi_delta(-1.0, [0.0], 0.0, 1.0) == math.inf


@given(positive, st.floats(-3, 3), st.floats(-3, 3), positive, positive)
def test_psi_one_homogeneous(t, x, y, lam, delta):
    assert psi_delta(lam * t, [lam * x], lam * y, delta) == pytest.approx(lam * psi_delta(t, [x], y, delta), rel=1e-12)


def test_b_delta_zero_fields(rng):
    rho = rng.exponential(size=20)
    tri = DiscreteTriple(rho, np.zeros((20, 2)), np.zeros(20))
    assert b_delta(tri, 0.05, 0.7) == 0.0


def test_b_delta_uniform_unit_speed():
    n = 40
    tri = DiscreteTriple(np.full(n, 1.0), np.tile([1.0, 0.0], (n, 1)), np.zeros(n))
    w = np.full(n, 1.0 / n)
    ref = 0.5 * sum(1.0 * 1.0 * wk for wk in w)
    assert b_delta(tri, w, 3.0) == pytest.approx(ref, abs=1e-15)
    assert ref == pytest.approx(0.5)


def test_b_delta_raw_singular_part_is_infinite():
    rho = np.array([1.0, 0.0])
    m = np.array([[0.0], [1.0]])
    assert b_delta_raw(rho, m, np.zeros(2), 1.0, 1.0) == math.inf
    with pytest.raises(NonAbsolutelyContinuous):
        DiscreteTriple.from_raw(rho, m, np.zeros(2))


def test_b_delta_raw_matches_density_form(rng):
    rho = rng.exponential(size=10)
    v = rng.normal(size=(10, 2))
    g = rng.normal(size=10)
    tri = DiscreteTriple(rho, v, g)
    raw = b_delta_raw(rho, v * rho[:, None], g * rho, 0.1, 0.8)
    assert raw == pytest.approx(b_delta(tri, 0.1, 0.8), rel=1e-12)


def test_b_delta_convex(rng):
    for _ in range(50):
        r1, r2 = rng.exponential(size=(2, 15))
        m1, m2 = rng.normal(size=(2, 15, 2))
        u1, u2 = rng.normal(size=(2, 15))
        mid = b_delta_raw((r1 + r2) / 2, (m1 + m2) / 2, (u1 + u2) / 2, 1.0, 0.6)
        avg = 0.5 * (b_delta_raw(r1, m1, u1, 1.0, 0.6) + b_delta_raw(r2, m2, u2, 1.0, 0.6))
        assert mid <= avg * (1 + 1e-12)


# -- curve energy -------------------------------------------------------------------------


def test_stationary_atom_energy():
    c = constant_curve(np.linspace(0, 1, 11), 2.0, [0.3, 0.3])
    assert curve_energy(c, EnergyParams(1, 1, 1)) == 2.0


def test_quadratic_mass_fixture():
    t = np.linspace(0, 1, 10001)
    c = WeightedCurve(t, t**2, np.zeros((t.size, 2)))
    p = EnergyParams(3.0, 1.0, 1.0)
    # hdot^2 / h == 4 away from t = 0
    ref = trapezoid(0.5 * p.beta * p.delta**2 * 4.0 + p.alpha * t**2, t)
    assert curve_energy(c, p) == pytest.approx(ref, abs=1e-6)
    assert curve_energy(c, p) == pytest.approx(3.0, abs=1e-6)


def test_unit_speed_fixture():
    t = np.linspace(0, 1, 10001)
    c = WeightedCurve(t, np.ones_like(t), np.stack([t, 0 * t], axis=1))
    p = EnergyParams(1.0, 2.0, 1.0)
    assert curve_energy(c, p) == pytest.approx(p.beta / 2 + p.alpha, abs=1e-6)


@given(st.floats(1e-3, 1e3))
def test_energy_homogeneous(lam):
    rng = np.random.default_rng(7)
    t, h, x = smooth_random_curve(rng)
    c = WeightedCurve(t, h, x)
    p = EnergyParams(0.7, 1.3, 0.4)
    assert curve_energy(c.scaled(lam), p) == pytest.approx(lam * curve_energy(c, p), rel=1e-12)


def test_energy_lower_bound_and_equality(rng):
    p = EnergyParams(0.5, 1.0, 1.0)
    for _ in range(20):
        t, h, x = smooth_random_curve(rng)
        c = WeightedCurve(t, h, x)
        assert curve_energy(c, p) >= p.alpha * mass_integral(c)
    still = constant_curve(np.linspace(0, 1, 7), 1.5, [0.2])
    assert curve_energy(still, p) == p.alpha * mass_integral(still)


def test_energy_ignores_unsupported_positions():
    t = np.linspace(0, 1, 5)
    h = np.array([1.0, 1.0, 0.0, 1.0, 1.0])
    a = WeightedCurve(t, h, [[0.0], [0.0], [0.0], [0.0], [0.0]])
    b = WeightedCurve(t, h, [[0.0], [0.0], [50.0], [0.0], [0.0]])
    p = EnergyParams(1, 1, 1)
    assert curve_energy(a, p) == curve_energy(b, p)


def test_energy_rejects_invalid_curve():
    t = np.linspace(0, 1, 3)
    bad = WeightedCurve(t, np.ones(3), [[0.0], [np.nan], [0.0]])
    with pytest.raises(InvalidCurve):
        curve_energy(bad, EnergyParams(1, 1, 1))


def test_energy_matches_induced_triple(rng):
    p = EnergyParams(0.3, 1.7, 0.6)
    for positive_mass in (True, False):
        t, h, x = smooth_random_curve(rng, positive=positive_mass)
        c = WeightedCurve(t, h, x)
        tri, w = induced_triple(c)
        bridge = p.beta * b_delta(tri, w, p.delta) + p.alpha * float(np.sum(tri.rho * w))
        assert bridge == pytest.approx(curve_energy(c, p), rel=1e-8)


def test_energy_terms_sum():
    t = np.linspace(0, 1, 21)
    c = WeightedCurve(t, 1 + t, np.stack([t, t], axis=1))
    p = EnergyParams(1, 1, 1)
    terms = energy_terms(c, p)
    assert set(terms) == {"kinetic", "growth", "mass"}
    assert math.fsum(terms.values()) == curve_energy(c, p)


# -- localisation ---------------------------------------------------------------------


def test_localized_full_interval(rng):
    t, h, x = smooth_random_curve(rng)
    c = WeightedCurve(t, h, x)
    p = EnergyParams(1, 1, 1)
    assert curve_energy_localized(c, p, (0.0, 1.0)) == pytest.approx(curve_energy(c, p), rel=1e-14)


def test_localized_stationary_half():
    c = constant_curve(np.linspace(0, 1, 11), 1.0, [0.0])
    assert curve_energy_localized(c, EnergyParams(2, 1, 1), (0.0, 0.5)) == pytest.approx(1.0, abs=1e-15)


@given(st.floats(0.01, 0.99))
def test_localized_additive(s):
    rng = np.random.default_rng(3)
    t, h, x = smooth_random_curve(rng, positive=False)
    c = WeightedCurve(t, h, x)
    p = EnergyParams(0.4, 1.1, 0.9)
    parts = curve_energy_localized(c, p, (0.0, s)) + curve_energy_localized(c, p, (s, 1.0))
    assert parts == pytest.approx(curve_energy(c, p), abs=1e-10)


@pytest.mark.parametrize("interval", [(0.5, 0.5), (0.6, 0.4), (-0.1, 0.5), (0.2, 1.5)])
def test_localized_bad_interval(interval):
    c = constant_curve(np.linspace(0, 1, 3), 1.0, [0.0])
    with pytest.raises(InvalidInterval):
        curve_energy_localized(c, EnergyParams(1, 1, 1), interval)


# -- normalisation and coercivity -----------------------------------------------------------


def test_normalize_scales_by_energy():
    c = constant_curve(np.linspace(0, 1, 5), 4.0, [0.0])
    u = normalize_to_unit_energy(c, EnergyParams(1, 1, 1))
    assert np.array_equal(u.masses, np.full(5, 1.0))
    again = normalize_to_unit_energy(u, EnergyParams(1, 1, 1))
    assert np.allclose(again.masses, u.masses, rtol=1e-15)


def test_normalize_random(rng):
    p = EnergyParams(0.2, 0.9, 1.4)
    for _ in range(20):
        c = normalize_to_unit_energy(WeightedCurve(*smooth_random_curve(rng)), p)
        assert abs(curve_energy(c, p) - 1.0) <= 1e-8


def test_normalize_zero_energy():
    c = constant_curve(np.linspace(0, 1, 3), 0.0, [0.0])
    with pytest.raises(ZeroEnergy):
        normalize_to_unit_energy(c, EnergyParams(1, 1, 1))


def test_coercivity_stationary_tight():
    rep = coercivity_bounds(constant_curve(np.linspace(0, 1, 5), 1.0, [0.0]), EnergyParams(1, 1, 1))
    assert rep.bound == 1.0 and rep.energy == 1.0 and rep.holds


def test_coercivity_moving():
    t = np.linspace(0, 1, 101)
    c = WeightedCurve(t, np.ones_like(t), t[:, None])
    rep = coercivity_bounds(c, EnergyParams(1, 1, 1))
    assert rep.constant == 1.0
    assert rep.momentum_norm == pytest.approx(1.0, rel=1e-12)
    assert rep.energy == pytest.approx(1.5, rel=1e-12)
    assert rep.holds


def test_coercivity_norms_match_direct_sums(rng):
    t, h, x = smooth_random_curve(rng)
    c = WeightedCurve(t, h, x)
    assert source_norm(c) == pytest.approx(np.sum(np.abs(np.diff(h))), rel=1e-12)
    z = np.sqrt(h)
    seg = np.linalg.norm(np.diff(x, axis=0), axis=1)
    ref_m = np.sum(seg * (z[:-1] ** 2 + z[:-1] * z[1:] + z[1:] ** 2) / 3.0)
    assert momentum_norm(c) == pytest.approx(ref_m, rel=1e-12)


def test_coercivity_ensemble_and_triple(rng):
    p = EnergyParams(0.3, 2.0, 0.5)
    ens = [(rng.uniform(0.1, 2), WeightedCurve(*smooth_random_curve(rng))) for _ in range(5)]
    assert coercivity_bounds(ens, p).holds
    tri, w = induced_triple(ens[0][1])
    assert coercivity_bounds(tri, p, w).holds


# -- Hölder chain ---------------------------------------------------------------------------------


def test_fisher_information_closed_form():
    t = np.linspace(0, 1, 201)
    c = WeightedCurve(t, t**2, np.zeros((t.size, 1)))
    assert fisher_information(c) == pytest.approx(4.0, rel=1e-12)


def test_holder_chain(rng):
    for _ in range(10):
        c = WeightedCurve(*smooth_random_curve(rng, n=41, positive=False))
        fi = fisher_information(c)
        for i in range(0, 41, 5):
            for j in range(i, 41, 3):
                assert holder_gap(c, i, j, fi) >= -1e-6
