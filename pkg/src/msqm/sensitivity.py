"""Confounding-function sensitivity analysis.

The working confounding function at period k is the Gaussian bell

    c_k(y) = r * exp(-pi * (r (y - m) / b)^2),

with peak r in [-1, 1], area b = integral |c_k| dy and location m, each a
function of (a_1..a_K, l_1..l_k).  ``BiasCorrection`` plugs
c*_k = c_k * pi_k(1 - a_k | history) into the IPW, ICR and DR equations
and into the ICR backward steps.  For those steps only three moments of
dc*/dy are needed, and they are closed form:

    int c*' dy = 0,  int y c*' dy = -sign(r) b pi~,  int y^2 c*' dy = -2 sign(r) b m pi~.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Covariate,
    LongitudinalDataset,
    TermSpec,
    as_spec,
    design_from_T,
)
from .errors import (
    ComputationError,
    ConfigError,
    NonPositiveArea,
    NonPositiveVariance,
    PeakOutOfRange,
)
from .numerics import standard_normal_quantile

_SQRT_2PI = np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# component functions of (a, l_k)


@dataclass(frozen=True)
class Constant:
    value: float

    def evaluate(self, data, T):
        return np.full(T.shape[0], float(self.value))

    def to_dict(self):
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class LinearForm:
    """coef' features(a, l_k), features given by a term spec."""

    terms: TermSpec
    coef: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", as_spec(self.terms))
        object.__setattr__(self, "coef", tuple(float(c) for c in self.coef))
        if len(self.coef) != len(self.terms):
            raise ConfigError("LinearForm: coefficient count differs from term count")

    def evaluate(self, data, T):
        return design_from_T(data, self.terms, T) @ np.asarray(self.coef)

    def to_dict(self):
        return {"kind": "linear", "terms": [str(t) for t in self.terms], "coef": list(self.coef)}


@dataclass(frozen=True, eq=False)
class RegimenLinearForm:
    """coef[r]' features(a, l_k), with one coefficient row per regimen r.

    ``coef`` is (2^K, p) in lexicographic regimen order; the row is picked
    from the full treatment vector each subject is evaluated at.
    """

    terms: TermSpec
    coef: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "terms", as_spec(self.terms))
        c = np.atleast_2d(np.asarray(self.coef, dtype=float))
        if c.shape[1] != len(self.terms):
            raise ConfigError("RegimenLinearForm: coefficient width differs from term count")
        object.__setattr__(self, "coef", c)

    def evaluate(self, data, T):
        idx = (T.astype(np.int64) * (2 ** np.arange(T.shape[1] - 1, -1, -1))).sum(axis=1)
        if idx.max(initial=0) >= self.coef.shape[0]:
            raise ConfigError("RegimenLinearForm has fewer rows than regimens")
        X = design_from_T(data, self.terms, T)
        return np.einsum("ip,ip->i", X, self.coef[idx])

    def to_dict(self):
        return {"kind": "regimen_linear", "terms": [str(t) for t in self.terms],
                "coef": self.coef.tolist()}


@dataclass(frozen=True)
class SignedTreatment:
    """gamma * (2 a_k - 1)."""

    gamma: float
    period: int

    def evaluate(self, data, T):
        return self.gamma * (2.0 * T[:, self.period - 1] - 1.0)

    def to_dict(self):
        return {"kind": "signed_treatment", "gamma": self.gamma, "period": self.period}


@dataclass(frozen=True)
class ScaledOutcomeMean:
    """gamma * delta' g_k(a, l_k) for a fixed, previously fitted delta."""

    gamma: float
    terms: TermSpec
    delta: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", as_spec(self.terms))
        object.__setattr__(self, "delta", tuple(float(c) for c in self.delta))

    def evaluate(self, data, T):
        return self.gamma * (design_from_T(data, self.terms, T) @ np.asarray(self.delta))

    def to_dict(self):
        return {"kind": "scaled_outcome_mean", "gamma": self.gamma,
                "terms": [str(t) for t in self.terms], "delta": list(self.delta)}


def shift_to_bell(mu, sigma2, s):
    """(r, b, m) of the bell approximating a Gaussian location shift s."""
    s2 = np.asarray(sigma2, dtype=float)
    if np.any(~(s2 > 0)):
        raise NonPositiveVariance("shift_to_bell needs sigma2 > 0")
    s = np.asarray(s, dtype=float)
    r = -s / np.sqrt(2.0 * np.pi * s2)
    return r, np.abs(s), np.asarray(mu, dtype=float) + 0.0 * s


@dataclass(frozen=True)
class BellPeriod:
    """Explicit peak/area/location components."""

    peak: object
    area: object
    location: object

    def parameters(self, data, T):
        return self.peak.evaluate(data, T), self.area.evaluate(data, T), self.location.evaluate(data, T)

    def to_dict(self):
        return {"form": "bell", "peak": self.peak.to_dict(), "area": self.area.to_dict(),
                "location": self.location.to_dict()}


@dataclass(frozen=True)
class ShiftPeriod:
    """Bell obtained from (mu, sigma^2, s) linear forms through shift_to_bell."""

    mu: object
    sigma2: object
    shift: object

    def parameters(self, data, T):
        return shift_to_bell(self.mu.evaluate(data, T), self.sigma2.evaluate(data, T),
                         self.shift.evaluate(data, T))

    def to_dict(self):
        return {"form": "shift", "mu": self.mu.to_dict(), "sigma2": self.sigma2.to_dict(),
                "shift": self.shift.to_dict()}


@dataclass(frozen=True)
class ConfoundingFunctionSpec:
    """Per-period confounding functions; periods not listed have c_k = 0."""

    periods: dict = field(default_factory=dict)

    def active(self, k):
        return k in self.periods

    def parameters(self, k, data, T):
        r, b, m = self.periods[k].parameters(data, T)
        return check_components(r, b, m)

    def to_dict(self):
        return {str(k): v.to_dict() for k, v in sorted(self.periods.items())}


def component_from_dict(d, data):
    from .data import parse_terms
    kind = d["kind"]
    if kind == "constant":
        return Constant(d["value"])
    if kind == "linear":
        return LinearForm(parse_terms(d["terms"], data), d["coef"])
    if kind == "regimen_linear":
        return RegimenLinearForm(parse_terms(d["terms"], data), d["coef"])
    if kind == "signed_treatment":
        return SignedTreatment(d["gamma"], d["period"])
    if kind == "scaled_outcome_mean":
        return ScaledOutcomeMean(d["gamma"], parse_terms(d["terms"], data), d["delta"])
    raise ConfigError(f"unknown component kind {kind!r}")


def spec_from_dict(d, data) -> ConfoundingFunctionSpec:
    periods = {}
    for k, v in d.items():
        if v["form"] == "bell":
            periods[int(k)] = BellPeriod(*(component_from_dict(v[x], data)
                                           for x in ("peak", "area", "location")))
        elif v["form"] == "shift":
            periods[int(k)] = ShiftPeriod(*(component_from_dict(v[x], data)
                                            for x in ("mu", "sigma2", "shift")))
        else:
            raise ConfigError(f"unknown confounding form {v['form']!r}")
    return ConfoundingFunctionSpec(periods)


# ---------------------------------------------------------------------------
# the bell and its derivatives


def check_components(r, b, m):
    r = np.asarray(r, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(np.abs(r) > 1):
        raise PeakOutOfRange(f"|r| = {np.max(np.abs(r)):.3g} exceeds 1")
    if np.any((b <= 0) & (r != 0)):
        raise NonPositiveArea("area b must be positive wherever r != 0")
    return r, b, np.asarray(m, dtype=float)


def bell(y, r, b, m):
    """(c, dc/dy); zero wherever r == 0 or b == 0."""
    r, b, m = np.broadcast_arrays(np.asarray(r, float), np.asarray(b, float), np.asarray(m, float))
    y = np.asarray(y, dtype=float)
    live = (r != 0) & (b > 0)
    bs = np.where(live, b, 1.0)
    u = r * (y - m) / bs
    e = np.exp(-np.pi * u * u)
    c = np.where(live, r * e, 0.0)
    dc = np.where(live, -2.0 * np.pi * r * u * (r / bs) * e, 0.0)
    return c, dc


def confounding_value(y, r, b, m):
    r, b, m = check_components(r, b, m)
    return bell(y, r, b, m)[0]


def confounding_deriv(y, r, b, m):
    r, b, m = check_components(r, b, m)
    return bell(y, r, b, m)[1]


def cstar_moments(r, b, m, pi_opp):
    """(M0, M1, M2) = integrals of (1, y, y^2) * dc*/dy."""
    r, b, m = check_components(r, b, m)
    sgn = np.sign(r)
    m1 = -sgn * b * pi_opp
    return np.zeros_like(m1), m1, 2.0 * m * m1


def _opposite_prob(p_treated, a):
    """pi_k(1 - a_k | history) given P(A_k = 1 | history)."""
    return np.where(a == 1, 1.0 - p_treated, p_treated)


def confounding_star(y, r, b, m, p_treated, a):
    """c* and dc*/dy at treatment value a with P(A=1 | history) = p_treated."""
    r, b, m = check_components(r, b, m)
    c, dc = bell(y, r, b, m)
    w = _opposite_prob(p_treated, a)
    return c * w, dc * w


class BiasCorrection:
    """Adapter feeding a ConfoundingFunctionSpec into the estimating equations."""

    def __init__(self, spec: ConfoundingFunctionSpec, propensity_fit, data: LongitudinalDataset):
        self.spec, self.prop, self.data = spec, propensity_fit, data
        self._reg_cache = {}
        self._tail_cache = {}

    def active(self, k):
        return self.spec.active(k)

    def _regimen_params(self, k, regs):
        key = (k, regs.tobytes())
        if key not in self._reg_cache:
            n = self.data.n
            rs, bs, ms = [], [], []
            for reg in regs:
                T = np.broadcast_to(reg.astype(float), (n, reg.size)).copy()
                r, b, m = self.spec.parameters(k, self.data, T)
                rs.append(r)
                bs.append(b)
                ms.append(m)
            self._reg_cache[key] = (np.column_stack(rs), np.column_stack(bs), np.column_stack(ms))
        return self._reg_cache[key]

    def regimen_cstar(self, k, h, alpha, ctx):
        r, b, m = self._regimen_params(k, ctx.regs)
        p = self.prop.prob_treated(alpha)[:, [k - 1]]
        c, dc = bell(h, r, b, m)
        w = _opposite_prob(p, ctx.regs[None, :, k - 1])
        return c * w, dc * w

    def tail_moments(self, k, designs, alpha):
        """(M1, M2), each (n, T_k), from c_{k+1} for the backward step at k."""
        if not self.spec.active(k + 1):
            return None
        key = (k, id(designs))
        if key not in self._tail_cache:
            rs, bs, ms = [], [], []
            for T in designs.T_tail[k]:
                r, b, m = self.spec.parameters(k + 1, self.data, T)
                rs.append(r)
                bs.append(b)
                ms.append(m)
            self._tail_cache[key] = (np.column_stack(rs), np.column_stack(bs), np.column_stack(ms))
        r, b, m = self._tail_cache[key]
        a = designs.tails[k][:, 0][None, :]
        p = self.prop.prob_treated(alpha)[:, [k]]
        _, m1, m2 = cstar_moments(r, b, m, _opposite_prob(p, a))
        return m1, m2


# ---------------------------------------------------------------------------
# bias-corrected estimators


def bc_ipw_fit(data, q, structural, propensity_fit, spec, tau=None, x0=None, **kw):
    from .estimators import ipw_smoothed_fit
    corr = BiasCorrection(spec, propensity_fit, data)
    return ipw_smoothed_fit(data, q, structural, propensity_fit, tau=tau, x0=x0, correction=corr, **kw)


def bc_outcome_fit(data, outcome_specs, propensity_fit, spec, designs=None):
    """ICR backward recursion with the confounding-moment correction."""
    from .outcome import fit_icr
    corr = BiasCorrection(spec, propensity_fit, data)
    return fit_icr(data, outcome_specs, correction=corr, alpha_flat=propensity_fit.flat,
                   designs=designs)


def bc_icr_fit(data, q, structural, propensity_fit, outcome_specs, spec, bc_fitseq=None, x0=None, **kw):
    from .estimators import icr_fit
    seq = bc_fitseq if bc_fitseq is not None else bc_outcome_fit(data, outcome_specs, propensity_fit, spec)
    corr = seq.correction if seq.correction is not None else BiasCorrection(spec, propensity_fit, data)
    return icr_fit(data, q, structural, seq, x0=x0, correction=corr, prop=propensity_fit, **kw)


def bc_dr_fit(data, q, structural, propensity_fit, bc_outcome_fitseq, spec=None, tau=None, x0=None, **kw):
    from .estimators import dr_smoothed_fit
    corr = bc_outcome_fitseq.correction
    if corr is None:
        corr = BiasCorrection(spec, propensity_fit, data)
    return dr_smoothed_fit(data, q, structural, propensity_fit, bc_outcome_fitseq, tau=tau, x0=x0,
                           correction=corr, **kw)


# ---------------------------------------------------------------------------
# tabular sensitivity grid


def tabular_spec(gammas: dict, outcome_fitseq, K) -> ConfoundingFunctionSpec:
    """Spec with r = g1 (2 a_k - 1), b = g2, m = g3 * delta_k' g_k.

    ``gammas[k] = (g1, g2, g3)``; periods with g1 == 0 are omitted.
    """
    periods = {}
    for k, (g1, g2, g3) in gammas.items():
        if g1 == 0:
            continue
        delta = outcome_fitseq.deltas[k - 1]
        terms = outcome_fitseq.specs[k - 1].mean_terms
        periods[int(k)] = BellPeriod(SignedTreatment(float(g1), int(k)), Constant(float(g2)),
                                     ScaledOutcomeMean(float(g3), terms, delta))
    return ConfoundingFunctionSpec(periods)


@dataclass
class GridRow:
    gammas: dict
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    converged: bool


def _expand_grid(grid: dict, K):
    """grid[k] = {"g1": [...], "g2": [...], "g3": [...]} -> list of gamma dicts."""
    axes = []
    for k in range(1, K + 1):
        g = grid.get(k, grid.get(str(k), {}))
        for j in (1, 2, 3):
            vals = g.get(f"g{j}", [0.0] if j == 1 else [1.0])
            axes.append([float(v) for v in np.atleast_1d(vals)])
    cells = []
    for combo in itertools.product(*axes):
        cells.append({k: tuple(combo[3 * (k - 1):3 * k]) for k in range(1, K + 1)})
    return cells


def _is_anchor(cell):
    return all(v[0] == 0 for v in cell.values())


def sensitivity_grid(data, q, structural, propensity_fit, outcome_specs, grid, contrast=None,
                     method="BC_DR", outcome_fitseq=None, level=0.95):
    """One bias-corrected fit per grid cell; always includes the gamma = 0 anchor."""
    from .estimators import icr_fit, dr_smoothed_fit, ipw_smoothed_fit, icr_theta_solve
    from .outcome import fit_icr
    K = data.K
    if not grid:
        raise ConfigError("sensitivity grid is empty")
    base = outcome_fitseq if outcome_fitseq is not None else fit_icr(data, outcome_specs)
    cells = _expand_grid(grid, K)
    if not any(_is_anchor(c) for c in cells):
        cells.append({k: (0.0, 0.0, 0.0) for k in range(1, K + 1)})
    if contrast is None:
        contrast = (tuple([1] * K), tuple([0] * K))
    x1 = structural.features(data, np.array([contrast[0]])).mean(axis=0)[0]
    x0 = structural.features(data, np.array([contrast[1]])).mean(axis=0)[0]
    L = x1 - x0
    z = float(standard_normal_quantile(0.5 + level / 2))
    rows = []
    for cell in cells:
        try:
            spec = tabular_spec(cell, base, K)
            if method == "BC_DR":
                seq = bc_outcome_fit(data, outcome_specs, propensity_fit, spec, designs=base.designs)
                fit = bc_dr_fit(data, q, structural, propensity_fit, seq)
            elif method == "BC_ICR":
                seq = bc_outcome_fit(data, outcome_specs, propensity_fit, spec, designs=base.designs)
                fit = bc_icr_fit(data, q, structural, propensity_fit, outcome_specs, spec, bc_fitseq=seq)
            elif method == "BC_IPW":
                th0, _ = icr_theta_solve(base, q, structural, data)
                fit = bc_ipw_fit(data, q, structural, propensity_fit, spec, x0=th0)
            else:
                raise ConfigError(f"unknown sensitivity method {method!r}")
            est = float(L @ fit.theta)
            se = float(np.sqrt(max(L @ fit.cov @ L, 0.0)))
            rows.append(GridRow(cell, est, se, est - z * se, est + z * se, fit.report.converged))
        except (ComputationError, FloatingPointError) as exc:
            nan = float("nan")
            rows.append(GridRow(cell, nan, nan, nan, nan, False))
    rows.sort(key=lambda r: tuple(v for k in sorted(r.gammas) for v in r.gammas[k]))
    return rows


def grid_to_csv(rows, K) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = [f"gamma_{k}{j}" for k in range(1, K + 1) for j in (1, 2, 3)]
    w.writerow(head + ["estimate", "se", "ci_low", "ci_high", "converged"])
    for r in rows:
        g = [repr(float(r.gammas[k][j])) for k in range(1, K + 1) for j in range(3)]
        w.writerow(g + [repr(r.estimate), repr(r.se), repr(r.ci_low), repr(r.ci_high),
                        "true" if r.converged else "false"])
    return buf.getvalue()
