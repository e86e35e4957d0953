"""Marginal structural quantile models for time-varying binary treatments."""
from .data import (
    LongitudinalDataset,
    StructuralModelSpec,
    TermSpec,
    build_design,
    enumerate_regimens,
    linear_msqm,
    load_dataset,
    parse_terms,
    write_dataset,
)
from .errors import ComputationError, ConfigError, MSQMError
from .estimators import (
    QuantileFit,
    bootstrap_ci,
    dr_smoothed_fit,
    icr_fit,
    ipw_smoothed_fit,
    unadjusted_qr_fit,
)
from .outcome import OutcomeModelSpec, fit_icr
from .propensity import fit_propensity_sequence
from .sensitivity import (
    BiasCorrection,
    ConfoundingFunctionSpec,
    bc_dr_fit,
    bc_icr_fit,
    bc_ipw_fit,
    sensitivity_grid,
)
from .simulation import ScenarioConfig, generate_scenario, model_presets, true_theta

__version__ = "0.1.0"
