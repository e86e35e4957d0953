"""Sensitivity analysis for an unmeasured confounder.

Here L11 is dropped from the data, so the first treatment is confounded.
We compare the uncorrected DR estimate with the bias-corrected one, using a
confounding function calibrated from a large simulated sample, and then
scan a small grid of hypothesised confounding strengths.
"""
import warnings

import numpy as np

from msqm import (
    dr_smoothed_fit,
    fit_icr,
    fit_propensity_sequence,
    linear_msqm,
    model_presets,
    true_theta,
)
from msqm.estimators import ExtremeWeights
from msqm.sensitivity import bc_dr_fit, bc_outcome_fit, grid_to_csv, sensitivity_grid
from msqm.simulation import ScenarioConfig, calibrate_confounding, generate_scenario

warnings.simplefilter("ignore", ExtremeWeights)
np.set_printoptions(precision=3, suppress=True)

case = "case1"
data = generate_scenario(ScenarioConfig(n=2000, unmeasured=case, seed=3))
print("observed covariates:", data.covariate_names)

ps = model_presets("ps_correct", case)
om = model_presets("om_correct", case)
prop = fit_propensity_sequence(data, ps)
outfit = fit_icr(data, om)
st = linear_msqm(data.K)

naive = dr_smoothed_fit(data, 0.5, st, prop, outfit)
print("truth:      ", true_theta(0.5))
print("uncorrected:", naive.theta)

# Working confounding function for period 1, fitted on 2e6 simulated subjects
# (takes a few seconds).
spec = calibrate_confounding(case)
bc_out = bc_outcome_fit(data, om, prop, spec, designs=outfit.designs)
bc = bc_dr_fit(data, 0.5, st, prop, bc_out)
print("BC-DR:      ", bc.theta, " se", bc.se)

# Without a calibrated function, an analyst scans hypothetical strengths.
# gamma_11 sets the peak r = gamma_11 (2 a_1 - 1); the contrast reported is
# always-treat minus never-treat, theta_1 + theta_2 + theta_3.
grid = {1: {"g1": [-0.2, -0.1, 0.0, 0.1, 0.2]}}
rows = sensitivity_grid(data, 0.5, st, prop, om, grid, outcome_fitseq=outfit)
print()
print(grid_to_csv(rows, data.K))
