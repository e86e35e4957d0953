"""Monte Carlo evaluation of the estimators on the simulation design.

A cell is written ``method:models``:

    ipw:T  ipw:F          propensity preset correct / wrong
    icr:T  icr:F          outcome preset correct / wrong
    dr:TT  dr:TF ...      (propensity, outcome)
    bcipw:T bcicr:T bcdr:TT   bias-corrected versions
    qr:unadj  qr:adj      smoothed quantile regression without weights

Replication ``r`` draws its data from stream ``(seed, r)``, so results do
not depend on the number of workers.  All smoothed estimators in a
replication share the bandwidth and starting value derived from ICR with the
correct outcome models.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import parse_terms, linear_msqm
from .errors import AllReplicationsFailed, ComputationError, ConfigError, MSQMError
from .estimators import (
    ExtremeWeights,
    bandwidth,
    dr_smoothed_fit,
    icr_fit,
    icr_theta_solve,
    ipw_smoothed_fit,
    unadjusted_qr_fit,
    bootstrap_ci,
)
from .numerics import rng_stream, standard_normal_quantile
from .outcome import fit_icr
from .propensity import fit_propensity_sequence
from .simulation import ScenarioConfig, generate_scenario, model_presets, true_theta

METHODS = ("ipw", "icr", "dr", "bcipw", "bcicr", "bcdr", "qr")
_PRESET = {"T": "correct", "F": "wrong"}


def parse_cell(cell: str):
    """'dr:TF' -> ('dr', 'T', 'F'); 'icr:T' -> ('icr', None, 'T')."""
    try:
        method, models = cell.strip().split(":")
    except ValueError:
        raise ConfigError(f"cell {cell!r} is not of the form method:models") from None
    method = method.lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r} in cell {cell!r}")
    if method == "qr":
        if models not in ("unadj", "adj"):
            raise ConfigError("qr cells are qr:unadj or qr:adj")
        return method, models, None
    need = 2 if method in ("dr", "bcdr") else 1
    if len(models) != need or any(c not in "TF" for c in models):
        raise ConfigError(f"cell {cell!r} needs {need} of T/F")
    if method in ("ipw", "bcipw"):
        return method, models, None
    if method in ("icr", "bcicr"):
        return method, None, models
    return method, models[0], models[1]


@dataclass(frozen=True)
class StudyConfig:
    R: int = 200
    n: int = 2000
    phi: float = 1.0
    unmeasured: str = "none"
    cells: tuple = ("dr:TT",)
    qs: tuple = (0.5,)
    seed: int = 1
    bootstrap_B: int | None = None
    confounding: object = None

    def __post_init__(self):
        if self.R < 1:
            raise ConfigError("R must be at least 1")
        for c in self.cells:
            parse_cell(c)
        for q in self.qs:
            if not 0 < q < 1:
                raise ConfigError(f"q must lie in (0, 1), got {q}")


class _Replication:
    """Lazily fitted nuisance models for one simulated dataset."""

    def __init__(self, data, study: StudyConfig, spec):
        self.data, self.study, self.spec = data, study, spec
        self.structural = linear_msqm(data.K)
        self._prop, self._om, self._icr, self._bcom = {}, {}, {}, {}

    def prop(self, m):
        if m not in self._prop:
            self._prop[m] = fit_propensity_sequence(
                self.data, model_presets("ps_" + _PRESET[m], self.study.unmeasured))
        return self._prop[m]

    def om_specs(self, m):
        return model_presets("om_" + _PRESET[m], self.study.unmeasured)

    def om(self, m):
        if m not in self._om:
            self._om[m] = fit_icr(self.data, self.om_specs(m))
        return self._om[m]

    def bc_om(self, p, m):
        from .sensitivity import bc_outcome_fit
        if (p, m) not in self._bcom:
            self._bcom[(p, m)] = bc_outcome_fit(self.data, self.om_specs(m), self.prop(p), self.spec,
                                                designs=self.om(m).designs)
        return self._bcom[(p, m)]

    def start(self, q):
        """(theta_ICR(T), tau) shared by the smoothed estimators."""
        if q not in self._icr:
            th, _ = icr_theta_solve(self.om("T"), q, self.structural, self.data)
            res = self.data.outcome - self.structural.observed_features(self.data) @ th
            self._icr[q] = (th, bandwidth(res, self.data.n))
        return self._icr[q]

    def fit(self, cell, q):
        method, ps, om = parse_cell(cell)
        st, data = self.structural, self.data
        if method == "qr":
            names = [nm for blk in data.covariate_names for nm in blk]
            terms = ["1"] + [f"A{k}" for k in range(1, data.K + 1)]
            if ps == "adj":
                terms += names
            return unadjusted_qr_fit(data, q, parse_terms(terms, data))
        if method == "icr":
            return icr_fit(data, q, st, self.om(om))
        x0, tau = self.start(q)
        if method == "ipw":
            return ipw_smoothed_fit(data, q, st, self.prop(ps), tau=tau, x0=x0)
        if method == "dr":
            return dr_smoothed_fit(data, q, st, self.prop(ps), self.om(om), tau=tau, x0=x0)
        if self.spec is None:
            raise ConfigError("bias-corrected cells need a confounding function")
        from .sensitivity import BiasCorrection, bc_ipw_fit, bc_dr_fit
        if method == "bcipw":
            return bc_ipw_fit(data, q, st, self.prop(ps), self.spec, tau=tau, x0=x0)
        if method == "bcicr":
            seq = self.bc_om("T", om)
            return icr_fit(data, q, st, seq, x0=x0, correction=seq.correction, prop=self.prop("T"))
        seq = self.bc_om(ps, om)
        return bc_dr_fit(data, q, st, self.prop(ps), seq, tau=tau, x0=x0)


def _run_one(args):
    study, r = args
    cfg = ScenarioConfig(study.n, study.phi, study.unmeasured, study.seed)
    data = generate_scenario(cfg, rng=rng_stream(study.seed, r))
    rep = _Replication(data, study, study.confounding)
    nc, nq, p = len(study.cells), len(study.qs), data.K + 1
    est = np.full((nc, nq, p), np.nan)
    se = np.full((nc, nq, p), np.nan)
    boot = np.full((nc, nq, p, 2), np.nan)
    errors = []
    for i, cell in enumerate(study.cells):
        for j, q in enumerate(study.qs):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ExtremeWeights)
                    fit = rep.fit(cell, q)
                if not fit.report.converged:
                    raise ComputationError("solver did not converge")
                # adjusted QR carries covariate coefficients after the p treatment coordinates
                est[i, j], se[i, j] = fit.theta[:p], fit.se[:p]
                if study.bootstrap_B:
                    fn = _BootFit(study, cell, q)
                    lo, hi, _ = bootstrap_ci(fn, data, B=study.bootstrap_B,
                                             seed=int(rng_stream(study.seed, r).integers(2 ** 62)))
                    boot[i, j, :, 0], boot[i, j, :, 1] = lo, hi
            except (MSQMError, np.linalg.LinAlgError, FloatingPointError) as exc:
                errors.append(f"rep {r} {cell} q={q}: {type(exc).__name__}: {exc}")
    return est, se, boot, errors


class _BootFit:
    """Picklable refit of one cell on a resampled dataset."""

    def __init__(self, study, cell, q):
        self.study, self.cell, self.q = study, cell, q

    def __call__(self, data):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtremeWeights)
            return _Replication(data, self.study, self.study.confounding).fit(self.cell, self.q).theta


@dataclass
class MonteCarloSummary:
    study: StudyConfig
    estimates: np.ndarray  # (R, cells, qs, p)
    ses: np.ndarray
    boot: np.ndarray  # (R, cells, qs, p, 2)
    errors: list = field(default_factory=list)

    def truth(self, q):
        return true_theta(q)

    def _ok(self, i, j):
        return ~np.isnan(self.estimates[:, i, j, 0])

    def n_failed(self, cell, q):
        i, j = self._index(cell, q)
        return int((~self._ok(i, j)).sum())

    def _index(self, cell, q):
        return self.study.cells.index(cell), self.study.qs.index(q)

    def percent_bias(self, cell, q):
        i, j = self._index(cell, q)
        th = self.estimates[self._ok(i, j), i, j]
        return 100.0 * np.mean((th - self.truth(q)) / self.truth(q), axis=0)

    def mc_se(self, cell, q):
        i, j = self._index(cell, q)
        th = self.estimates[self._ok(i, j), i, j]
        return np.std(th, axis=0, ddof=1) if th.shape[0] > 1 else np.full(th.shape[1], np.nan)

    def mean_se(self, cell, q):
        i, j = self._index(cell, q)
        return np.mean(self.ses[self._ok(i, j), i, j], axis=0)

    def wald_coverage(self, cell, q, level=0.95):
        i, j = self._index(cell, q)
        ok = self._ok(i, j)
        z = float(standard_normal_quantile(0.5 + level / 2))
        th, se = self.estimates[ok, i, j], self.ses[ok, i, j]
        t = self.truth(q)
        return np.mean((th - z * se <= t) & (t <= th + z * se), axis=0)

    def bootstrap_coverage(self, cell, q):
        i, j = self._index(cell, q)
        b = self.boot[self._ok(i, j), i, j]
        if b.size == 0 or np.all(np.isnan(b)):
            return np.full(self.estimates.shape[-1], np.nan)
        t = self.truth(q)
        return np.mean((b[..., 0] <= t) & (t <= b[..., 1]), axis=0)

    def to_csv(self) -> str:
        """One row per (cell, q, coordinate) in table order."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "cell", "q", "coordinate", "truth", "percent_bias", "mc_se",
                    "mean_se", "wald_coverage", "bootstrap_coverage", "n_ok", "n_failed"])
        R = self.estimates.shape[0]
        for cell in self.study.cells:
            method, _, _ = parse_cell(cell)
            for q in self.study.qs:
                nf = self.n_failed(cell, q)
                if nf == R:
                    stats = [np.full(self.estimates.shape[-1], np.nan)] * 5
                else:
                    stats = [self.percent_bias(cell, q), self.mc_se(cell, q), self.mean_se(cell, q),
                             self.wald_coverage(cell, q), self.bootstrap_coverage(cell, q)]
                t = self.truth(q)
                for c in range(self.estimates.shape[-1]):
                    bias, sd, mse, cov, bcov = (s[c] for s in stats)
                    w.writerow([method, cell.split(":")[1], f"{q:g}", f"theta_{c}", f"{t[c]:.6f}",
                                f"{bias:.2f}", f"{sd:.4f}", f"{mse:.4f}", f"{cov:.3f}",
                                "" if np.isnan(bcov) else f"{bcov:.3f}", R - nf, nf])
        return buf.getvalue()


def run_monte_carlo(study: StudyConfig, workers=1, progress=None) -> MonteCarloSummary:
    """Run ``study.R`` replications and reduce them in index order."""
    jobs = [(study, r) for r in range(study.R)]
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            results = []
            for k, res in enumerate(ex.map(_run_one, jobs, chunksize=max(1, study.R // (4 * workers)))):
                results.append(res)
                if progress:
                    progress(k + 1, study.R)
    else:
        results = []
        for k, job in enumerate(jobs):
            results.append(_run_one(job))
            if progress:
                progress(k + 1, study.R)
    est = np.stack([r[0] for r in results])
    se = np.stack([r[1] for r in results])
    boot = np.stack([r[2] for r in results])
    errors = [e for r in results for e in r[3]]
    if np.all(np.isnan(est)):
        raise AllReplicationsFailed(f"all {study.R} replications failed; first error: "
                                    + (errors[0] if errors else "unknown"))
    return MonteCarloSummary(study, est, se, boot, errors)


def stderr_progress(done, total):
    if done == total or done % max(1, total // 20) == 0:
        print(f"replication {done}/{total}", file=sys.stderr, flush=True)
