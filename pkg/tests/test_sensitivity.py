import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.stats import norm

from msqm import (
    ConfoundingFunctionSpec,
    dr_smoothed_fit,
    icr_fit,
    ipw_smoothed_fit,
    sensitivity_grid,
)
from msqm.errors import NonPositiveArea, NonPositiveVariance, PeakOutOfRange
from msqm.sensitivity import (
    BellPeriod,
    Constant,
    bc_dr_fit,
    bc_icr_fit,
    bc_ipw_fit,
    bc_outcome_fit,
    bell,
    confounding_star,
    confounding_value,
    cstar_moments,
    grid_to_csv,
    shift_to_bell,
    spec_from_dict,
    tabular_spec,
)
from msqm.simulation import ScenarioConfig, calibrate_confounding, generate_scenario


@pytest.mark.parametrize("r,b,m", [(0.3, 1.0, 0.0), (-0.8, 2.5, 10.0), (1.0, 0.2, -3.0), (-0.05, 7.0, 1.5)])
def test_bell_peak_and_area(r, b, m):
    ys = np.linspace(m - 5 * b, m + 5 * b, 20001)
    c = confounding_value(ys, r, b, m)
    assert abs(np.max(np.abs(c)) - abs(r)) <= 1e-9
    assert abs(confounding_value(m, r, b, m) - r) <= 1e-15
    area = integrate.quad(lambda y: abs(confounding_value(y, r, b, m)), -np.inf, np.inf,
                          epsabs=1e-12, epsrel=1e-12)[0]
    assert abs(area - b) <= 1e-6


@pytest.mark.parametrize("r,b,m,pi", [(0.3, 1.0, 0.0, 0.4), (-0.8, 2.5, 10.0, 0.9), (0.6, 0.7, -4.0, 0.15)])
def test_cstar_moments_vs_quadrature(r, b, m, pi):
    a = 1
    p_treated = 1 - pi
    d = lambda y: float(confounding_star(y, r, b, m, p_treated, a)[1])
    lo, hi = m - 12 * b / abs(r), m + 12 * b / abs(r)
    quad = [integrate.quad(lambda y: y ** j * d(y), lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
            for j in range(3)]
    closed = cstar_moments(r, b, m, pi)
    for got, want in zip(closed, quad):
        assert abs(float(got) - want) <= 1e-8 * max(1.0, abs(want))


def test_bell_derivative():
    y = np.linspace(-3, 3, 13)
    h = 1e-6
    c, dc = bell(y, 0.4, 1.3, 0.2)
    fd = (bell(y + h, 0.4, 1.3, 0.2)[0] - bell(y - h, 0.4, 1.3, 0.2)[0]) / (2 * h)
    np.testing.assert_allclose(dc, fd, atol=1e-8)
    c0, dc0 = bell(y, 0.0, 1.0, 0.0)
    assert np.all(c0 == 0) and np.all(dc0 == 0)


def test_component_validation():
    with pytest.raises(PeakOutOfRange):
        confounding_value(0.0, 1.2, 1.0, 0.0)
    with pytest.raises(NonPositiveArea):
        confounding_value(0.0, 0.5, 0.0, 0.0)
    with pytest.raises(NonPositiveVariance):
        shift_to_bell(0.0, 0.0, 1.0)


def test_shift_to_bell_examples():
    r, b, m = shift_to_bell(2.0, 1.0, 1.0)
    assert r == pytest.approx(-1 / np.sqrt(2 * np.pi), abs=1e-15)
    assert b == 1.0 and m == 2.0
    r, b, m = shift_to_bell(0.0, 4.0, -0.5)
    assert r == pytest.approx(0.5 / np.sqrt(8 * np.pi), abs=1e-15) and b == 0.5


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(0.5, 4.0), st.floats(-0.3, 0.3).filter(lambda s: abs(s) > 1e-3))
def test_shift_to_bell_approximates_gaussian_shift(mu, s2, s):
    r, b, m = shift_to_bell(mu, s2, s)
    sd = np.sqrt(s2)
    ys = np.linspace(mu - 6 * sd, mu + 6 * sd, 401)
    exact = norm.cdf(ys, mu, sd) - norm.cdf(ys, mu - s, sd)
    # area of the exact difference equals |s|, and the bell matches to O(s^2)
    assert abs(integrate.trapezoid(np.abs(exact), ys) - b) <= 1e-3 * sd
    assert np.max(np.abs(bell(ys, r, b, m)[0] - exact)) <= 0.5 * s * s / s2 + 1e-12


def _zero_spec(K=3):
    return ConfoundingFunctionSpec({k: BellPeriod(Constant(0.0), Constant(1.0), Constant(0.0))
                                    for k in range(1, K + 1)})


def test_gamma_zero_reductions(fits_small, data_small, structural):
    prop, om_specs, om = fits_small
    spec = _zero_spec()
    ipw = ipw_smoothed_fit(data_small, 0.5, structural, prop)
    bipw = bc_ipw_fit(data_small, 0.5, structural, prop, spec, tau=ipw.bandwidth)
    np.testing.assert_allclose(bipw.theta, ipw.theta, atol=1e-8)
    np.testing.assert_allclose(bipw.cov, ipw.cov, rtol=1e-5)
    seq = bc_outcome_fit(data_small, om_specs, prop, spec)
    np.testing.assert_allclose(seq.beta_flat, om.beta_flat, atol=1e-12)
    icr = icr_fit(data_small, 0.5, structural, om)
    bicr = bc_icr_fit(data_small, 0.5, structural, prop, om_specs, spec, bc_fitseq=seq)
    np.testing.assert_allclose(bicr.theta, icr.theta, atol=1e-8)
    dr = dr_smoothed_fit(data_small, 0.5, structural, prop, om)
    bdr = bc_dr_fit(data_small, 0.5, structural, prop, seq, tau=dr.bandwidth)
    np.testing.assert_allclose(bdr.theta, dr.theta, atol=1e-8)
    np.testing.assert_allclose(bdr.cov, dr.cov, rtol=1e-5, atol=1e-10)


def test_grid_anchor_is_dr_contrast(fits_small, data_small, structural):
    prop, om_specs, om = fits_small
    rows = sensitivity_grid(data_small, 0.5, structural, prop, om_specs,
                            {1: {"g1": [-0.1, 0.0, 0.1]}}, outcome_fitseq=om)
    assert len(rows) == 3 and all(r.converged for r in rows)
    anchor = [r for r in rows if r.gammas[1][0] == 0][0]
    dr = dr_smoothed_fit(data_small, 0.5, structural, prop, om)
    assert anchor.estimate == pytest.approx(dr.theta[1:].sum(), abs=1e-8)
    L = np.array([0, 1, 1, 1.0])
    assert anchor.se == pytest.approx(np.sqrt(L @ dr.cov @ L), rel=1e-6)
    assert [r.gammas[1][0] for r in rows] == [-0.1, 0.0, 0.1]
    csv = grid_to_csv(rows, 3).splitlines()
    assert csv[0].startswith("gamma_11,gamma_12,gamma_13,gamma_21")
    assert len(csv) == 4 and len(csv[1].split(",")) == 14


def test_grid_is_continuous_near_zero(fits_small, data_small, structural):
    prop, om_specs, om = fits_small
    g = [-0.02, -0.01, 0.0, 0.01, 0.02]
    rows = sensitivity_grid(data_small, 0.5, structural, prop, om_specs, {1: {"g1": g}}, outcome_fitseq=om)
    est = np.array([r.estimate for r in rows])
    steps = np.diff(est)
    assert np.all(np.isfinite(est))
    assert np.max(np.abs(np.diff(steps))) <= 0.2 * np.max(np.abs(steps)) + 1e-6


def test_tabular_spec_omits_zero_periods(fits_small):
    spec = tabular_spec({1: (0.0, 1.0, 1.0), 2: (0.2, 1.0, 1.0)}, fits_small[2], 3)
    assert not spec.active(1) and spec.active(2)


def test_spec_dict_round_trip(fits_small, data_small):
    spec = tabular_spec({2: (0.2, 0.7, 0.9)}, fits_small[2], 3)
    again = spec_from_dict(json.loads(json.dumps(spec.to_dict())), data_small)
    T = data_small.treatment_matrix()
    for x, y in zip(spec.parameters(2, data_small, T), again.parameters(2, data_small, T)):
        np.testing.assert_array_equal(x, y)


def test_calibrated_spec_round_trip(data_small):
    spec = calibrate_confounding("case2", big_n=100_000, chunk=50_000)
    assert spec.active(2) and not spec.active(1)
    again = spec_from_dict(json.loads(json.dumps(spec.to_dict())), data_small)
    T = data_small.treatment_matrix()
    for x, y in zip(spec.parameters(2, data_small, T), again.parameters(2, data_small, T)):
        np.testing.assert_allclose(x, y, rtol=1e-15)


def test_null_confounding_oracle():
    spec = calibrate_confounding("case1", big_n=400_000, chunk=200_000, zero_effect=("L11",))
    T = np.array([[0, 0, 0], [1, 1, 1], [1, 0, 1]], dtype=float)
    data = generate_scenario(ScenarioConfig(50, 1.0, "case1", seed=3))
    for a in T:
        Ta = np.broadcast_to(a, (50, 3)).copy()
        r, b, m = spec.parameters(1, data, Ta)
        assert np.max(np.abs(r)) < 0.02


def test_calibrated_case1_is_material():
    spec = calibrate_confounding("case1", big_n=400_000, chunk=200_000)
    data = generate_scenario(ScenarioConfig(50, 1.0, "case1", seed=3))
    Ta = np.ones((50, 3))
    r, b, m = spec.parameters(1, data, Ta)
    assert np.min(np.abs(r)) > 0.05


def test_bell_zero_peak_and_extremum():
    ys = np.linspace(-10, 10, 41)
    assert np.all(confounding_value(ys, 0.0, 1.0, 0.5) == 0)
    assert confounding_value(2.0, -0.35, 1.7, 2.0) == -0.35


def test_bell_area_on_finite_range():
    r, b, m = 0.3, 2.5, 1.0
    half = 20 * b / (abs(r) * np.sqrt(2 * np.pi))
    area = integrate.quad(lambda y: abs(confounding_value(y, r, b, m)), m - half, m + half,
                          epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    assert abs(area - b) <= 1e-6


def test_cstar_scaling_and_null():
    ys = np.linspace(-4, 6, 51)
    c = confounding_value(ys, 0.4, 1.2, 1.0)
    for a in (0, 1):
        np.testing.assert_array_equal(confounding_star(ys, 0.4, 1.2, 1.0, 0.5, a)[0], c / 2)
        cs, dcs = confounding_star(ys, 0.0, 1.2, 1.0, 0.3, a)
        assert np.all(cs == 0) and np.all(dcs == 0)


@pytest.mark.parametrize("a", [0, 1])
@pytest.mark.parametrize("delta,p1", [(0.5, 0.3), (-0.8, 0.65), (0.2, 0.5)])
def test_cstar_matches_two_cdf_difference(a, delta, p1):
    # Y | A = a, L ~ N(mu_a, sd^2) with mu_1 = mu_0 + delta; the coarser history mixes both arms
    mu0, sd = 1.5, 2.0
    mus = (mu0, mu0 + delta)
    ys = np.linspace(mu0 - 8 * sd, mu0 + 8 * sd, 2001)
    F = [norm.cdf(ys, m_, sd) for m_ in mus]
    exact = F[a] - ((1 - p1) * F[0] + p1 * F[1])
    np.testing.assert_allclose(exact, (p1 if a == 0 else 1 - p1) * (F[a] - F[1 - a]), atol=1e-15)
    r, b, m = shift_to_bell(mus[a], sd * sd, mus[a] - mus[1 - a])
    cs = confounding_star(ys, r, b, m, p1, a)[0]
    assert np.max(np.abs(cs - exact)) <= 0.02 * (p1 if a == 0 else 1 - p1)


def test_shift_to_bell_null_and_example():
    r, b, m = shift_to_bell(0.7, 2.0, 0.0)
    assert (r, b, m) == (0.0, 0.0, 0.7)
    assert np.all(bell(np.linspace(-3, 3, 7), r, b, m)[0] == 0)
    r, b, m = shift_to_bell(0.0, 1.0, 0.5)
    assert r == pytest.approx(-0.19947114020071635, abs=1e-15)
    assert (b, m) == (0.5, 0.0)


def _shift_sup_error(ratio, sd, mu=-1.0):
    s = ratio * sd
    ys = np.linspace(mu - 10 * sd, mu + 10 * sd, 20001)
    exact = norm.cdf(ys, mu, sd) - norm.cdf(ys, mu - s, sd)
    r, b, m = shift_to_bell(mu, sd * sd, s)
    return np.max(np.abs(bell(ys, r, b, m)[0] - exact))


@pytest.mark.parametrize("ratio", [-0.4, -0.3, -0.1, 0.1, 0.3, 0.4])
@pytest.mark.parametrize("sd", [0.5, 1.0, 3.0])
def test_shift_to_bell_sup_error(ratio, sd):
    assert _shift_sup_error(ratio, sd) <= 0.02


@pytest.mark.xfail(strict=True, reason="first-order bell misses the exact difference by 0.0298 at |s|/sd = 0.5")
def test_shift_to_bell_sup_error_at_half_sd():
    assert _shift_sup_error(0.5, 1.0) <= 0.02


def test_cstar_moment_example():
    r, b, m, pi = -0.4, 3.0, 2.0, 0.35
    d = lambda y: float(confounding_star(y, r, b, m, 1 - pi, 1)[1])
    lo, hi = m - 12 * b / abs(r), m + 12 * b / abs(r)
    quad = [integrate.quad(lambda y: y ** j * d(y), lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
            for j in (1, 2)]
    _, M1, M2 = cstar_moments(r, b, m, pi)
    assert abs(M1 - quad[0]) <= 1e-8 and abs(M2 - quad[1]) <= 1e-8


def test_grid_scan_over_peak(fits_small, data_small, structural):
    prop, om_specs, om = fits_small
    rows = sensitivity_grid(data_small, 0.5, structural, prop, om_specs, {1: {"g1": [-0.2, 0.0, 0.2]}},
                            outcome_fitseq=om)
    est = np.array([r.estimate for r in rows])
    assert all(r.converged for r in rows) and np.all(np.isfinite(est))
    # a bigger peak moves the contrast further in the same direction
    assert np.sign(est[1] - est[0]) == np.sign(est[2] - est[1])
