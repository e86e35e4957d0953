"""Three-period simulation design, model presets and confounding calibration.

Baseline covariates L11, L12 and noise X21, X22, X31, X32 are standard
normal.  Later covariates respond to earlier treatment,

    L_{2,a1} = (X21 + a1, X22 + 2 a1),   L_{3,a2} = (X31 + a2, X32 + 2 a2),

treatment k follows expit(alpha_k0 - 1.5 A_{k-1} + phi L_k1 + 2 phi 1(L_k2 > 0)),
and every potential outcome is

    Y_a = 10 - 10 (a1 + a2 + a3) + 2 * (sum of the six covariate potentials)
          + sqrt(4 + 12 a3) * eps,

so that marginally Y_a ~ N(10 - 4 a1 - 4 a2 - 10 a3, 28 + 12 a3).  One eps
per subject is shared by all eight regimens.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import (
    Covariate,
    FutureTreatment,
    IndicatorPositive,
    Intercept,
    Interaction,
    LongitudinalDataset,
    Square,
    TermSpec,
    Treatment,
    enumerate_regimens,
)
from .errors import BisectionFailed, ConfigError, QuantileOutOfRange, UncalibratedIntercepts
from .numerics import rng_stream, standard_normal_quantile

COVARIATES = ("L11", "L12", "L21", "L22", "L31", "L32")
UNMEASURED = {"none": None, "case1": "L11", "case2": "L21", "case3": "L31"}
UNMEASURED_PERIOD = {"case1": 1, "case2": 2, "case3": 3}

CALIBRATION_SEED = 20240531
CALIBRATION_N = 1_000_000

# bisection results of calibrate_intercepts(phi, CALIBRATION_N, CALIBRATION_SEED)
INTERCEPTS = {
    1.0: (-1.0025752180459335, -1.2465818191398625, -1.2472892018260495),
    1.5: (-1.5039050366655715, -2.3006858092296056, -2.302051105218368),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Settings for one simulated dataset.

    ``unmeasured`` is one of ``none``, ``case1`` (L11), ``case2`` (L21) or
    ``case3`` (L31); the named column is removed from the emitted dataset.
    ``zero_effect`` names covariates whose coefficients in the treatment
    and outcome models are set to zero.
    """

    n: int
    phi: float = 1.0
    unmeasured: str = "none"
    seed: int = 0
    keep_potential_outcomes: bool = False
    intercepts: tuple | None = None
    zero_effect: tuple = ()

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if not self.phi > 0:
            raise ConfigError("phi must be positive")
        key = {"case1_L11": "case1", "case2_L21": "case2", "case3_L31": "case3"}.get(
            self.unmeasured, self.unmeasured)
        if key not in UNMEASURED:
            raise ConfigError(f"unknown unmeasured case {self.unmeasured!r}")
        object.__setattr__(self, "unmeasured", key)
        bad = set(self.zero_effect) - set(COVARIATES)
        if bad:
            raise ConfigError(f"unknown covariates in zero_effect: {sorted(bad)}")


@dataclass(frozen=True, eq=False)
class PotentialOutcomes:
    """Full counterfactual table behind one simulated dataset.

    ``Y`` is (n, 8) in lexicographic regimen order; ``L2`` is (n, 2, 2)
    indexed by a1; ``L3`` is (n, 2, 2) indexed by a2.
    """

    L1: np.ndarray
    L2: np.ndarray
    L3: np.ndarray
    Y: np.ndarray
    treatments: np.ndarray

    def observed_Y(self):
        idx = self.treatments.astype(int) @ np.array([4, 2, 1])
        return self.Y[np.arange(self.Y.shape[0]), idx]


def _weights(zero_effect):
    return {c: 0.0 if c in zero_effect else 1.0 for c in COVARIATES}


def _draw_noise(n, rng):
    Z = rng.standard_normal((n, 6))
    eps = rng.standard_normal(n)
    U = rng.random((n, 3))
    return Z, eps, U


def _propensity_linear(phi, w, Lk1, Lk2, name1, name2):
    return phi * w[name1] * Lk1 + 2.0 * phi * w[name2] * (Lk2 > 0)


def _simulate(n, rng, phi, intercepts, zero_effect=()):
    """Observed arrays and the potential-outcome table."""
    w = _weights(zero_effect)
    Z, eps, U = _draw_noise(n, rng)
    L11, L12, X21, X22, X31, X32 = Z.T
    a10, a20, a30 = intercepts
    A1 = (U[:, 0] < expit(a10 + _propensity_linear(phi, w, L11, L12, "L11", "L12"))).astype(np.int8)
    L2 = np.stack([np.column_stack([X21 + a, X22 + 2 * a]) for a in (0, 1)], axis=1)
    L21, L22 = X21 + A1, X22 + 2 * A1
    A2 = (U[:, 1] < expit(a20 - 1.5 * A1 + _propensity_linear(phi, w, L21, L22, "L21", "L22"))).astype(np.int8)
    L3 = np.stack([np.column_stack([X31 + a, X32 + 2 * a]) for a in (0, 1)], axis=1)
    L31, L32 = X31 + A2, X32 + 2 * A2
    A3 = (U[:, 2] < expit(a30 - 1.5 * A2 + _propensity_linear(phi, w, L31, L32, "L31", "L32"))).astype(np.int8)
    base = 10.0 + 2.0 * (w["L11"] * L11 + w["L12"] * L12)
    Y = np.empty((n, 8))
    for r, (a1, a2, a3) in enumerate(enumerate_regimens(3)):
        cov = (w["L21"] * L2[:, a1, 0] + w["L22"] * L2[:, a1, 1]
               + w["L31"] * L3[:, a2, 0] + w["L32"] * L3[:, a2, 1])
        Y[:, r] = base - 10.0 * (a1 + a2 + a3) + 2.0 * cov + np.sqrt(4.0 + 12.0 * a3) * eps
    A = np.column_stack([A1, A2, A3])
    po = PotentialOutcomes(np.column_stack([L11, L12]), L2, L3, Y, A)
    covs = (np.column_stack([L11, L12]), np.column_stack([L21, L22]), np.column_stack([L31, L32]))
    return covs, A, po.observed_Y(), po


def calibrate_intercepts(phi, precision_n=CALIBRATION_N, seed=CALIBRATION_SEED, zero_effect=(),
                         bracket=(-20.0, 20.0)):
    """Intercepts giving a treated fraction of one half in every period.

    Each intercept is found by bisection on the mean fitted probability over
    a calibration sample, in period order since A_k feeds period k+1.
    """
    if not phi > 0 and phi != 0:
        raise ConfigError("phi must be nonnegative")
    rng = rng_stream(seed, 0)
    Z, _, U = _draw_noise(int(precision_n), rng)
    w = _weights(zero_effect)
    L11, L12, X21, X22, X31, X32 = Z.T

    def solve(lin):
        f = lambda a: float(np.mean(expit(a + lin))) - 0.5
        lo, hi = bracket
        flo, fhi = f(lo), f(hi)
        if not (flo < 0 < fhi):
            raise BisectionFailed(f"no sign change on [{lo}, {hi}]")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = f(mid)
            if fm == 0 or hi - lo < 1e-12:
                break
            if fm < 0:
                lo = mid
            else:
                hi = mid
        a = 0.5 * (lo + hi)
        if abs(f(a)) > 1e-3:
            raise BisectionFailed("bisection did not reach the target treated fraction")
        return a

    a10 = solve(_propensity_linear(phi, w, L11, L12, "L11", "L12"))
    A1 = (U[:, 0] < expit(a10 + _propensity_linear(phi, w, L11, L12, "L11", "L12"))).astype(float)
    L21, L22 = X21 + A1, X22 + 2 * A1
    lin2 = -1.5 * A1 + _propensity_linear(phi, w, L21, L22, "L21", "L22")
    a20 = solve(lin2)
    A2 = (U[:, 1] < expit(a20 + lin2)).astype(float)
    L31, L32 = X31 + A2, X32 + 2 * A2
    a30 = solve(-1.5 * A2 + _propensity_linear(phi, w, L31, L32, "L31", "L32"))
    return (a10, a20, a30)


def scenario_intercepts(config: ScenarioConfig):
    if config.intercepts is not None:
        return tuple(float(a) for a in config.intercepts)
    if config.zero_effect:
        raise UncalibratedIntercepts("zero_effect designs need explicit intercepts")
    got = INTERCEPTS.get(float(config.phi))
    if got is None:
        raise UncalibratedIntercepts(
            f"no cached intercepts for phi={config.phi}; pass calibrate_intercepts(phi)")
    return got


def _to_dataset(covs, A, Y, unmeasured):
    names = (("L11", "L12"), ("L21", "L22"), ("L31", "L32"))
    data = LongitudinalDataset(covs, A, Y, names)
    col = UNMEASURED[unmeasured]
    return data.drop_covariate(col) if col else data


def generate_scenario(config: ScenarioConfig, rng=None):
    """Simulated dataset, plus the potential-outcome table when requested.

    Returns ``data`` or ``(data, potential_outcomes)``.
    """
    ints = scenario_intercepts(config)
    rng = rng_stream(config.seed, 0) if rng is None else rng
    covs, A, Y, po = _simulate(config.n, rng, config.phi, ints, config.zero_effect)
    data = _to_dataset(covs, A, Y, config.unmeasured)
    return (data, po) if config.keep_potential_outcomes else data


# ---------------------------------------------------------------------------
# truth


SQRT28 = float(np.sqrt(28.0))
SHIFT3 = float(np.sqrt(40.0) - np.sqrt(28.0))


def true_theta(q, precision="full"):
    """(theta_0, theta_1, theta_2, theta_3) of the linear quantile model.

    theta_0 = 10 + sqrt(28) z_q and theta_3 = -10 + (sqrt(40) - sqrt(28)) z_q.
    ``precision="rounded"`` uses the three-decimal constants 5.292 and 1.033.
    """
    if not 0 < q < 1:
        raise QuantileOutOfRange(f"q must lie in (0, 1), got {q}")
    z = 0.0 if q == 0.5 else float(standard_normal_quantile(q))
    if precision == "rounded":
        c0, c3 = 5.292, 1.033
    elif precision == "full":
        c0, c3 = SQRT28, SHIFT3
    else:
        raise ConfigError(f"precision must be 'full' or 'rounded', got {precision!r}")
    return np.array([10.0 + c0 * z, -4.0, -4.0, -10.0 + c3 * z])


# ---------------------------------------------------------------------------
# model presets


def _c(name):
    return Covariate(int(name[1]), name)


def _pos(t):
    return IndicatorPositive(t)


def _ps_correct():
    return [
        TermSpec((Intercept(), _c("L11"), _pos(_c("L12")))),
        TermSpec((Intercept(), Treatment(1), _c("L21"), _pos(_c("L22")))),
        TermSpec((Intercept(), Treatment(2), _c("L31"), _pos(_c("L32")))),
    ]


def _ps_wrong():
    return [
        TermSpec((Intercept(), _pos(Interaction(_c("L11"), _c("L12"))))),
        TermSpec((Intercept(), Treatment(1), _pos(Interaction(_c("L21"), _c("L22"))))),
        TermSpec((Intercept(), Treatment(2), _pos(Interaction(_c("L31"), _c("L32"))))),
    ]


def _om(wrong):
    from .outcome import OutcomeModelSpec
    f = (lambda nm: Square(_c(nm))) if wrong else _c
    m1 = (Intercept(), Treatment(1), FutureTreatment(2), FutureTreatment(3), _c("L11"), f("L12"))
    m2 = (Intercept(), Treatment(1), Treatment(2), FutureTreatment(3),
          _c("L11"), f("L12"), _c("L21"), f("L22"))
    m3 = (Intercept(), Treatment(1), Treatment(2), Treatment(3),
          _c("L11"), f("L12"), _c("L21"), f("L22"), _c("L31"), f("L32"))
    v12 = TermSpec((Intercept(), FutureTreatment(3)))
    v3 = TermSpec((Intercept(), Treatment(3)))
    return [OutcomeModelSpec(TermSpec(m1), v12), OutcomeModelSpec(TermSpec(m2), v12),
            OutcomeModelSpec(TermSpec(m3), v3)]


PRESETS = ("ps_correct", "ps_wrong", "om_correct", "om_wrong")


def model_presets(kind, unmeasured="none"):
    """Propensity (list of TermSpec) or outcome (list of OutcomeModelSpec) presets.

    With an unmeasured case, every term touching the missing column is
    removed.
    """
    builders = {"ps_correct": _ps_correct, "ps_wrong": _ps_wrong,
                "om_correct": lambda: _om(False), "om_wrong": lambda: _om(True)}
    if kind not in builders:
        raise ConfigError(f"unknown preset {kind!r}; choose from {', '.join(PRESETS)}")
    specs = builders[kind]()
    col = UNMEASURED.get(unmeasured, unmeasured)
    if col:
        specs = [s.without_covariate(col) for s in specs]
    return specs


# ---------------------------------------------------------------------------
# confounding-function calibration


def _observed_features(covs, A, k, unmeasured_col):
    """[1, A_1..A_k, observed L_1..L_k] for every subject."""
    names = (("L11", "L12"), ("L21", "L22"), ("L31", "L32"))
    cols = [np.ones(A.shape[0])] + [A[:, j].astype(float) for j in range(k)]
    labels = []
    for p in range(k):
        for j, nm in enumerate(names[p]):
            if nm != unmeasured_col:
                cols.append(covs[p][:, j])
                labels.append(nm)
    return np.column_stack(cols), labels


def calibrate_confounding(case, big_n=2_000_000, seed=CALIBRATION_SEED + 1, phi=1.0,
                          chunk=250_000, intercepts=None, zero_effect=()):
    """Working confounding function for an unmeasured-covariate case.

    For every regimen a, Y_a is regressed on [1, A_1..A_k, observed L_1..L_k]
    over a large simulated sample (k is the period of the unmeasured
    covariate).  The fit at A = a gives mu_k, the same regression of the
    squared residuals gives sigma_k^2, and the A_k coefficient gives
    s_k = beta_k (2 a_k - 1).  These map to (r, b, m) through ``shift_to_bell``.
    """
    from .sensitivity import ConfoundingFunctionSpec, RegimenLinearForm, ShiftPeriod
    if case not in UNMEASURED_PERIOD:
        raise ConfigError(f"calibrate_confounding needs case1, case2 or case3, got {case!r}")
    k = UNMEASURED_PERIOD[case]
    col = UNMEASURED[case]
    if intercepts is None:
        intercepts = scenario_intercepts(ScenarioConfig(1, phi))
    nchunks = int(np.ceil(big_n / chunk))
    sizes = [min(chunk, big_n - i * chunk) for i in range(nchunks)]

    def chunks():
        for i, m in enumerate(sizes):
            covs, A, _, po = _simulate(m, rng_stream(seed, i), phi, intercepts, zero_effect)
            X, labels = _observed_features(covs, A, k, col)
            yield X, po.Y, labels

    XtX, XtY, labels = None, None, None
    for X, Y, labels in chunks():
        XtX = X.T @ X if XtX is None else XtX + X.T @ X
        XtY = X.T @ Y if XtY is None else XtY + X.T @ Y
    B = np.linalg.solve(XtX, XtY)
    Xte = None
    for X, Y, _ in chunks():
        e2 = (Y - X @ B) ** 2
        Xte = X.T @ e2 if Xte is None else Xte + X.T @ e2
    V = np.linalg.solve(XtX, Xte)
    terms = TermSpec((Intercept(),) + tuple(Treatment(j) for j in range(1, k + 1))
                     + tuple(_c(nm) for nm in labels))
    beta_k = B[k]
    shift_coef = np.column_stack([-beta_k, 2.0 * beta_k])
    period = ShiftPeriod(
        mu=RegimenLinearForm(terms, B.T),
        sigma2=RegimenLinearForm(terms, V.T),
        shift=RegimenLinearForm(TermSpec((Intercept(), Treatment(k))), shift_coef),
    )
    return ConfoundingFunctionSpec({k: period})
