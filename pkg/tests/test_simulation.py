import numpy as np
import pytest

from msqm.errors import ConfigError, QuantileOutOfRange
from msqm.estimators import regimen_index
from msqm.montecarlo import MonteCarloSummary, StudyConfig, parse_cell, run_monte_carlo
from msqm.simulation import (
    INTERCEPTS,
    ScenarioConfig,
    calibrate_intercepts,
    generate_scenario,
    model_presets,
    true_theta,
)


def test_true_theta_examples():
    np.testing.assert_array_equal(true_theta(0.5), [10.0, -4.0, -4.0, -10.0])
    t = true_theta(0.75)
    assert t[0] == pytest.approx(13.569064, abs=1e-6)
    assert t[3] == pytest.approx(-9.303217, abs=1e-6)
    np.testing.assert_allclose(true_theta(0.75, "rounded"), [13.5694, -4, -4, -9.3033], atol=1e-4)
    with pytest.raises(QuantileOutOfRange):
        true_theta(0.0)


@pytest.mark.parametrize("q", [0.05, 0.25, 0.4])
def test_true_theta_symmetry(q):
    a, b = true_theta(q), true_theta(1 - q)
    np.testing.assert_allclose(a + b, 2 * true_theta(0.5), atol=1e-12)


def test_true_theta_matches_potential_outcome_quantiles():
    _, po = generate_scenario(ScenarioConfig(400_000, seed=77, keep_potential_outcomes=True))
    for q in (0.25, 0.75):
        t = true_theta(q)
        for r, a in ((0, (0, 0, 0)), (7, (1, 1, 1)), (2, (0, 1, 0))):
            h = t[0] + t[1:] @ np.array(a)
            assert abs(np.quantile(po.Y[:, r], q) - h) < 0.05


def test_phi_zero_first_intercept_is_zero():
    a = calibrate_intercepts(0.0, precision_n=20_000)
    assert abs(a[0]) <= 1e-10
    assert a[1] > 0


def test_cached_intercepts_reproduce():
    a = calibrate_intercepts(1.0, precision_n=200_000, seed=1)
    np.testing.assert_allclose(a, INTERCEPTS[1.0], atol=0.05)


@pytest.mark.parametrize("phi", [1.0, 1.5])
def test_treated_fractions(phi):
    data = generate_scenario(ScenarioConfig(200_000, phi, seed=5))
    frac = data.treatments.mean(axis=0)
    assert np.all(np.abs(frac - 0.5) < 0.01)


def test_stronger_phi_reduces_overlap():
    from msqm import fit_propensity_sequence
    pmin = []
    for phi in (1.0, 1.5):
        d = generate_scenario(ScenarioConfig(5000, phi, seed=6))
        cum = fit_propensity_sequence(d, model_presets("ps_correct")).cumulative()[:, -1]
        pmin.append(np.quantile(cum, 0.05))
    assert pmin[1] < pmin[0]


def test_potential_outcome_consistency(scen_small):
    data, po = scen_small
    A = data.treatments
    i = np.arange(data.n)
    np.testing.assert_array_equal(data.outcome, po.Y[i, regimen_index(A)])
    np.testing.assert_array_equal(data.covariates[1], po.L2[i, A[:, 0]])
    np.testing.assert_array_equal(data.covariates[2], po.L3[i, A[:, 1]])


def test_regimen_effects_are_exact(scen_small):
    _, po = scen_small
    # regimens differ only through the mean shift and the a3-dependent noise scale
    d = po.Y[:, 4] - po.Y[:, 0]  # (1,0,0) vs (0,0,0)
    L2 = po.L2
    expect = -10.0 + 2.0 * ((L2[:, 1] - L2[:, 0]).sum(axis=1))
    np.testing.assert_allclose(d, expect, atol=1e-12)


def test_unmeasured_drop_keeps_outcome():
    full = generate_scenario(ScenarioConfig(300, seed=9))
    for case, col in (("case1", "L11"), ("case2", "L21"), ("case3_L31", "L31")):
        d = generate_scenario(ScenarioConfig(300, unmeasured=case, seed=9))
        np.testing.assert_array_equal(d.outcome, full.outcome)
        np.testing.assert_array_equal(d.treatments, full.treatments)
        assert col not in d.columns() and col in full.columns()
    with pytest.raises(ConfigError):
        ScenarioConfig(10, unmeasured="case9")


def test_generate_is_deterministic():
    a = generate_scenario(ScenarioConfig(100, seed=3))
    b = generate_scenario(ScenarioConfig(100, seed=3))
    c = generate_scenario(ScenarioConfig(100, seed=4))
    np.testing.assert_array_equal(a.outcome, b.outcome)
    assert not np.array_equal(a.outcome, c.outcome)


def test_presets():
    ps = model_presets("ps_correct")
    assert [str(s) for s in ps] == ["1 + L11 + pos(L12)", "1 + A1 + L21 + pos(L22)", "1 + A2 + L31 + pos(L32)"]
    assert str(model_presets("ps_wrong")[0]) == "1 + pos(L11*L12)"
    om = model_presets("om_wrong")
    assert str(om[0].mean_terms) == "1 + A1 + a2 + a3 + L11 + sq(L12)"
    assert str(om[2].var_terms) == "1 + A3"
    assert str(model_presets("ps_correct", "case1")[0]) == "1 + pos(L12)"
    assert "L21" not in str(model_presets("om_correct", "case2")[2].mean_terms)
    with pytest.raises(ConfigError):
        model_presets("nope")


def test_parse_cell():
    assert parse_cell("dr:TF") == ("dr", "T", "F")
    assert parse_cell("icr:F") == ("icr", None, "F")
    assert parse_cell("ipw:T") == ("ipw", "T", None)
    assert parse_cell("qr:adj") == ("qr", "adj", None)
    for bad in ("dr:T", "zz:T", "ipw", "qr:xx", "icr:Q"):
        with pytest.raises(ConfigError):
            parse_cell(bad)


def test_summary_statistics_oracle():
    study = StudyConfig(R=4, cells=("dr:TT",), qs=(0.5,))
    t = true_theta(0.5)
    est = np.array([t * 1.1, t * 0.9, t * 1.2, t]).reshape(4, 1, 1, 4)
    se = np.full((4, 1, 1, 4), 0.5)
    se[2] = 0.1
    est[3, 0, 0, :] = np.nan
    s = MonteCarloSummary(study, est, se, np.full(est.shape + (2,), np.nan))
    np.testing.assert_allclose(s.percent_bias("dr:TT", 0.5), [100 * (0.1 - 0.1 + 0.2) / 3] * 4)
    assert s.n_failed("dr:TT", 0.5) == 1
    np.testing.assert_allclose(s.mc_se("dr:TT", 0.5), np.std([1.1 * t, 0.9 * t, 1.2 * t], axis=0, ddof=1))
    # |0.1 t| < 1.96 * 0.5 only for |t| < 9.8, i.e. theta_1 and theta_2
    np.testing.assert_allclose(s.wald_coverage("dr:TT", 0.5), [0, 2 / 3, 2 / 3, 0])
    lines = s.to_csv().splitlines()
    assert lines[0].split(",")[:4] == ["method", "cell", "q", "coordinate"]
    assert lines[1].startswith("dr,TT,0.5,theta_0,10.000000,6.67,")


def test_monte_carlo_workers_identical():
    study = StudyConfig(R=4, n=300, cells=("dr:TT", "ipw:F", "qr:unadj", "qr:adj"), qs=(0.5,), seed=3)
    a = run_monte_carlo(study, workers=1).to_csv()
    b = run_monte_carlo(study, workers=2).to_csv()
    assert a == b
    assert len(a.splitlines()) == 1 + 4 * 4


def test_study_validation():
    with pytest.raises(ConfigError):
        StudyConfig(R=0)
    with pytest.raises(ConfigError):
        StudyConfig(qs=(1.5,))


def test_calibration_bracket_and_phi_dependence():
    from msqm.errors import BisectionFailed
    with pytest.raises(BisectionFailed):
        calibrate_intercepts(1.0, precision_n=20_000, bracket=(5.0, 20.0))
    a1 = calibrate_intercepts(1.0, precision_n=200_000)
    a15 = calibrate_intercepts(1.5, precision_n=200_000)
    # the pos(L12) term shifts the linear predictor up by phi on average, so alpha_10 < 0
    assert a1[0] < -0.5 and a15[0] < a1[0]


def test_propensity_spread_grows_with_phi():
    from msqm import fit_propensity_sequence
    sds = []
    for phi in (1.0, 1.5):
        d = generate_scenario(ScenarioConfig(20_000, phi, seed=8))
        p = fit_propensity_sequence(d, model_presets("ps_correct")).prob_treated()[:, 0]
        sds.append(np.std(np.log(p / (1 - p))))
    assert sds[1] > sds[0]


def test_preset_design_rows():
    from msqm import LongitudinalDataset
    from msqm.data import build_design
    covs = (np.zeros((1, 2)), np.array([[0.5, -1.0]]), np.zeros((1, 2)))
    names = (("L11", "L12"), ("L21", "L22"), ("L31", "L32"))
    d = LongitudinalDataset(covs, np.array([[1, 0, 1]], dtype=np.int8), np.zeros(1), names)
    np.testing.assert_array_equal(build_design(d, model_presets("ps_correct")[1], 2), [[1, 1, 0.5, 0]])
    om = model_presets("om_correct")
    assert str(om[2].mean_terms) == "1 + A1 + A2 + A3 + L11 + L12 + L21 + L22 + L31 + L32"
    assert len(om[2].mean_terms.terms) - 1 == 9
    assert [str(s.var_terms) for s in om] == ["1 + a3", "1 + a3", "1 + A3"]


def test_confounding_calibration_is_deterministic():
    from msqm.simulation import calibrate_confounding
    a = calibrate_confounding("case1", big_n=60_000, chunk=30_000).to_dict()
    b = calibrate_confounding("case1", big_n=60_000, chunk=30_000).to_dict()
    c = calibrate_confounding("case1", big_n=60_000, chunk=30_000, seed=7).to_dict()
    assert a == b and a != c


def test_summary_of_exact_stub():
    study = StudyConfig(R=2, cells=("ipw:T",), qs=(0.5,))
    t = true_theta(0.5)
    est = np.broadcast_to(t, (2, 1, 1, 4)).copy()
    s = MonteCarloSummary(study, est, np.full(est.shape, 0.3), np.full(est.shape + (2,), np.nan))
    np.testing.assert_array_equal(s.percent_bias("ipw:T", 0.5), 0.0)
    np.testing.assert_array_equal(s.wald_coverage("ipw:T", 0.5), 1.0)
    np.testing.assert_array_equal(s.mc_se("ipw:T", 0.5), 0.0)
