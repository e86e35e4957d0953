import numpy as np
import pytest

from msqm import fit_icr, fit_propensity_sequence, linear_msqm
from msqm.simulation import ScenarioConfig, generate_scenario, model_presets


@pytest.fixture(scope="session")
def scen_small():
    """Scenario I dataset, n=400, with potential outcomes."""
    return generate_scenario(ScenarioConfig(400, 1.0, seed=11, keep_potential_outcomes=True))


@pytest.fixture(scope="session")
def data_small(scen_small):
    return scen_small[0]


@pytest.fixture(scope="session")
def data_2000():
    return generate_scenario(ScenarioConfig(2000, 1.0, seed=12))


@pytest.fixture(scope="session")
def fits_small(data_small):
    prop = fit_propensity_sequence(data_small, model_presets("ps_correct"))
    om = model_presets("om_correct")
    return prop, om, fit_icr(data_small, om)


@pytest.fixture(scope="session")
def structural():
    return linear_msqm(3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
