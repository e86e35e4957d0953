"""Smoothed IPW, ICR and doubly robust MSQM estimators.

All three estimating functions share one representation: for subject i
and regimen r (R = 2^K of them, lexicographic order)

    U_i(theta) = sum_r d_ir * B_ir(h_ir),     d_ir = rho_ir * x_ir,

where x_ir are the h-features, h_ir = x_ir' theta, and B is a scalar
bracket.  With M_k[i, r] = 1{r_1..r_k = A_1..A_k} / pibar_k (M_0 = 1):

    IPW:  B = M_K (K((h - Y)/tau) - q)
    ICR:  B = Psi_1(h) - q
    DR:   B = M_K (K((h - Y)/tau) - Psi_K) + sum_{k=1}^{K-1} M_k (Psi_{k+1} - Psi_k)
              + Psi_1 - q

Bias-corrected variants subtract confounding terms inside B.  The literal
tail-sum forms of the influence-function components live in
``eif_components`` and ``t_decomposition`` and do not share this code.

Covariances come from the stacked M-estimation sandwich over
(alpha, beta, theta): the theta block of J^{-1} B J^{-T} / n, which equals
the nuisance-corrected sandwich with -S I^{-1} U score adjustments.
"""
from __future__ import annotations

import concurrent.futures as cf
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import (
    LongitudinalDataset,
    StructuralModelSpec,
    as_spec,
    design_from_T,
    enumerate_regimens,
)
from .errors import (
    BootstrapFailed,
    ConfigError,
    DegenerateResiduals,
    SingularInformation,
    SolverFailed,
)
from .numerics import (
    RootSolveConfig,
    SolveReport,
    gaussian_cdf,
    gaussian_pdf,
    logistic_kernel,
    logistic_kernel_deriv,
    numeric_jacobian,
    rng_stream,
    solve_root,
    symmetrize_psd,
)
from .outcome import OutcomeFitSequence, variance_grad
from .propensity import PropensityFit, WeightFunction, weight_function

SMOOTHED = ("IPW", "DR", "BC_IPW", "BC_DR", "UnadjustedQR")


class ExtremeWeights(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class QuantileFit:
    q: float
    theta: np.ndarray
    cov: np.ndarray
    method: str
    bandwidth: float | None
    report: SolveReport
    nuisance_refs: dict = field(default_factory=dict)
    rho: str = "stabilized"

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def wald_ci(self, level=0.95):
        from .numerics import standard_normal_quantile
        z = float(standard_normal_quantile(0.5 + level / 2))
        return self.theta - z * self.se, self.theta + z * self.se

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "q": float(self.q),
            "theta": [float(v) for v in self.theta],
            "se": [float(v) for v in self.se],
            "cov": [[float(v) for v in row] for row in self.cov],
            "bandwidth": None if self.bandwidth is None else float(self.bandwidth),
            "iterations": int(self.report.iterations),
            "converged": bool(self.report.converged),
            "rho": self.rho,
        }


def bandwidth(residuals, n=None) -> float:
    """tau_n = sd(residuals) * n^-0.26 (sd with divisor n - 1)."""
    r = np.asarray(residuals, dtype=float)
    n = r.size if n is None else n
    sd = float(np.std(r, ddof=1)) if r.size > 1 else 1.0
    if not sd > 0:
        raise DegenerateResiduals("residual standard deviation is zero")
    return sd * float(n) ** -0.26


# ---------------------------------------------------------------------------
# shared context


def regimen_index(T) -> np.ndarray:
    """Lexicographic index of each row of a 0/1 treatment matrix."""
    T = np.asarray(T)
    K = T.shape[1]
    w = 2 ** np.arange(K - 1, -1, -1)
    return (T.astype(np.int64) * w).sum(axis=1)


class EquationContext:
    """Everything the theta equations need, with nuisance parameters as inputs."""

    def __init__(self, data: LongitudinalDataset, structural: StructuralModelSpec, q: float,
                 prop: PropensityFit | None = None, outfit: OutcomeFitSequence | None = None,
                 correction=None, tau: float | None = None, weights: WeightFunction | None = None):
        if not 0 < q < 1:
            raise ConfigError(f"q must lie in (0, 1), got {q}")
        self.data, self.structural, self.q = data, structural, float(q)
        self.prop, self.outfit, self.correction, self.tau = prop, outfit, correction, tau
        self.n, self.K = data.n, data.K
        self.regs = enumerate_regimens(self.K)
        self.X = structural.features(data, self.regs)
        self.wf = weights if weights is not None else weight_function(data, structural)
        self.d = self.wf.rho_regimens[:, :, None] * self.X
        self.Y = data.outcome
        A = data.treatments
        self.obs = regimen_index(A)
        self.match = [np.ones((self.n, len(self.regs)), bool)]
        for k in range(1, self.K + 1):
            self.match.append(np.all(self.regs[None, :, :k] == A[:, None, :k], axis=2))

    # nuisance-dependent pieces -------------------------------------------
    def masks(self, alpha=None):
        cum = self.prop.cumulative(alpha)
        return [self.match[k] / cum[:, [k]] for k in range(self.K + 1)]

    def psi_moments(self, beta=None):
        return [self.outfit.regimen_moments(k, beta) for k in range(1, self.K + 1)]

    def cstar(self, k, h, alpha=None):
        """c*_k and its h-derivative at every regimen, or (0, 0)."""
        if self.correction is None or not self.correction.active(k):
            return None
        a = self.prop.flat if alpha is None else alpha
        return self.correction.regimen_cstar(k, h, a, self)

    # brackets --------------------------------------------------------------
    def bracket(self, method, theta, alpha=None, beta=None, deriv=False):
        h = self.X @ theta
        q, K = self.q, self.K
        B = np.zeros_like(h)
        dB = np.zeros_like(h) if deriv else None
        if method in ("IPW", "DR"):
            M = self.masks(alpha)
            z = (h - self.Y[:, None]) / self.tau
            B += M[K] * logistic_kernel(z)
            if deriv:
                dB += M[K] * logistic_kernel_deriv(z) / self.tau
        if method == "IPW":
            B -= M[K] * q
            if self.correction is not None:
                for k in range(1, K + 1):
                    c = self.cstar(k, h, alpha)
                    if c is not None:
                        B -= M[K] * c[0]
                        if deriv:
                            dB -= M[K] * c[1]
            return B, dB
        mom = self.psi_moments(beta)
        psi = [None] + [gaussian_cdf(h, mu, s2) for mu, s2 in mom]
        phi = [None] + [gaussian_pdf(h, mu, s2) for mu, s2 in mom] if deriv else None
        if method == "ICR":
            B += psi[1] - q
            if deriv:
                dB += phi[1]
            c = self.cstar(1, h, alpha)
            if c is not None:
                B -= c[0]
                if deriv:
                    dB -= c[1]
            return B, dB
        if method == "DR":
            B -= M[K] * psi[K]
            if deriv:
                dB -= M[K] * phi[K]
            for k in range(1, K):
                B += M[k] * (psi[k + 1] - psi[k])
                if deriv:
                    dB += M[k] * (phi[k + 1] - phi[k])
            B += psi[1] - q
            if deriv:
                dB += phi[1]
            for k in range(0, K):
                c = self.cstar(k + 1, h, alpha)
                if c is not None:
                    B -= M[k] * c[0]
                    if deriv:
                        dB -= M[k] * c[1]
            return B, dB
        raise ConfigError(f"unknown method {method!r}")

    def per_subject(self, method, theta, alpha=None, beta=None):
        B, _ = self.bracket(method, theta, alpha, beta)
        return np.einsum("irp,ir->ip", self.d, B)

    def mean(self, method, theta, alpha=None, beta=None):
        return self.per_subject(method, theta, alpha, beta).mean(axis=0)

    def jacobian(self, method, theta, alpha=None, beta=None):
        _, dB = self.bracket(method, theta, alpha, beta, deriv=True)
        return np.einsum("irp,irq,ir->pq", self.d, self.X, dB) / self.n

    def nuisance_jacobians(self, method, theta, want_alpha, want_beta):
        """Analytic d mean(U) / d(alpha, beta) for the uncorrected equations.

        With M_k = match_k / pibar_k, d M_k / d alpha_j = -M_k (A_j - p_j) X_j
        for j <= k, and Psi_k enters B with coefficient M_{k-1} - M_k (DR) or
        1 at k = 1 (ICR).
        """
        h = self.X @ theta
        K, n = self.K, self.n
        Ja = Jb = None
        M = self.masks() if method in ("IPW", "DR") else None
        mom = self.psi_moments() if method in ("ICR", "DR") else None
        if want_alpha:
            G = [None] * (K + 1)
            kern = logistic_kernel((h - self.Y[:, None]) / self.tau) if method != "ICR" else None
            if method == "IPW":
                G[K] = kern - self.q
            elif method == "DR":
                psi = [None] + [gaussian_cdf(h, mu, s2) for mu, s2 in mom]
                G[K] = kern - psi[K]
                for k in range(1, K):
                    G[k] = psi[k + 1] - psi[k]
            p = self.prop.prob_treated()
            A = self.prop.treatments
            blocks = []
            W = np.zeros_like(h)
            suffix = [None] * (K + 1)
            for k in range(K, 0, -1):
                if G[k] is not None:
                    W = W + M[k] * G[k]
                suffix[k] = W
            for j in range(1, K + 1):
                Xj = self.prop.designs[j - 1] * (A[:, j - 1] - p[:, j - 1])[:, None]
                blocks.append(-np.einsum("irp,ir,iq->pq", self.d, suffix[j], Xj) / n)
            Ja = np.hstack(blocks)
        if want_beta:
            of = self.outfit
            blocks = []
            for k in range(1, K + 1):
                mu, s2 = mom[k - 1]
                pdf = gaussian_pdf(h, mu, s2)
                if method == "ICR":
                    coef = np.ones_like(h) if k == 1 else np.zeros_like(h)
                else:
                    coef = (1.0 if k == 1 else M[k - 1]) - M[k]
                w = -coef * pdf
                des = of.designs
                _, eta = of.blocks()[k - 1]
                dS = variance_grad(des.S_reg[k], eta, des.specs[k - 1].var_link)
                jd = np.einsum("irp,ir,irq->pq", self.d, w, des.G_reg[k]) / n
                je = np.einsum("irp,ir,irq->pq", self.d, w * (h - mu) / (2.0 * s2), dS) / n
                blocks.extend([jd, je])
            Jb = np.hstack(blocks)
        return Ja, Jb

    def observed_h(self, theta):
        return self.X[np.arange(self.n), self.obs] @ theta


def _solve(ctx, method, x0, config):
    F = lambda th: ctx.mean(method, th)
    J = lambda th: ctx.jacobian(method, th)
    return solve_root(F, x0, config or RootSolveConfig(), analytic_J=J)


def _default_start(data, structural, q):
    p = len(structural.h_terms)
    x0 = np.zeros(p)
    x0[0] = np.quantile(data.outcome, q)
    return x0


def _icr_start(ctx):
    """Least-squares fit of the per-regimen q-quantiles of the Psi_1 mixture."""
    mu, s2 = ctx.outfit.regimen_moments(1)
    sd = np.sqrt(s2)
    targets = np.empty(mu.shape[1])
    for r in range(mu.shape[1]):
        m, s = mu[:, r], sd[:, r]
        f = lambda y: float(np.mean(gaussian_cdf(y, m, s * s))) - ctx.q
        targets[r] = brentq(f, np.min(m - 40 * s), np.max(m + 40 * s), xtol=1e-10)
    w = np.sqrt(np.abs(ctx.wf.rho_regimens)).reshape(-1)
    X = ctx.X.reshape(-1, ctx.X.shape[-1])
    y = np.broadcast_to(targets, mu.shape).reshape(-1)
    return np.linalg.lstsq(X * w[:, None], y * w, rcond=None)[0]


def stacked_covariance(ctx: EquationContext, method, theta, use_alpha, use_beta):
    """Theta block of the stacked sandwich J^{-1} B J^{-T} / n."""
    n = ctx.n
    pieces, sizes = [], []
    alpha = ctx.prop.flat if use_alpha else None
    beta = ctx.outfit.beta_flat if use_beta else None
    da = alpha.size if use_alpha else 0
    db = beta.size if use_beta else 0
    p = theta.size
    P = da + db + p
    J = np.zeros((P, P))
    U = np.zeros((n, P))
    if use_alpha:
        U[:, :da] = ctx.prop.scores(alpha)
        J[:da, :da] = ctx.prop.information(alpha)
    if use_beta:
        of = ctx.outfit
        U[:, da:da + db] = of.beta_scores(beta, alpha if use_alpha else of.alpha_flat)
        J[da:da + db, da:da + db] = of.beta_jacobian()
        if use_alpha and of.correction is not None:
            J[da:da + db, :da] = numeric_jacobian(
                lambda a: of.beta_scores(beta, a).mean(axis=0), alpha)
    U[:, da + db:] = ctx.per_subject(method, theta)
    J[da + db:, da + db:] = ctx.jacobian(method, theta)
    if ctx.correction is None:
        Ja, Jb = ctx.nuisance_jacobians(method, theta, use_alpha, use_beta)
        if use_alpha:
            J[da + db:, :da] = Ja
        if use_beta:
            J[da + db:, da:da + db] = Jb
    else:
        if use_alpha:
            J[da + db:, :da] = numeric_jacobian(lambda a: ctx.mean(method, theta, alpha=a), alpha)
        if use_beta:
            J[da + db:, da:da + db] = numeric_jacobian(
                lambda b: ctx.mean(method, theta, beta=b), beta)
    try:
        IF = np.linalg.solve(J, U.T)[da + db:]
    except np.linalg.LinAlgError:
        raise SingularInformation("stacked information matrix is singular") from None
    cov = IF @ IF.T / n ** 2
    return symmetrize_psd(cov)


def _warn_weights(ctx):
    w = ctx.wf.numerator / ctx.prop.cumulative()[:, -1]
    if w.max() > 0.05 * w.sum():
        warnings.warn(f"largest weight is {w.max() / w.sum():.1%} of the total", ExtremeWeights)


def _fit(ctx, method, label, x0, config, use_alpha, use_beta, variance=True):
    theta, rep = _solve(ctx, method, x0, config)
    cov = (stacked_covariance(ctx, method, theta, use_alpha, use_beta) if variance
           else np.full((theta.size, theta.size), np.nan))
    refs = {}
    if use_alpha:
        refs["propensity"] = [str(s) for s in ctx.prop.specs]
    if use_beta:
        refs["outcome"] = [str(s.mean_terms) for s in ctx.outfit.specs]
    return QuantileFit(ctx.q, theta, cov, label, ctx.tau if method != "ICR" else None, rep,
                       refs, ctx.wf.kind)


# ---------------------------------------------------------------------------
# public estimators


def icr_theta_solve(fitseq: OutcomeFitSequence, q, structural, data, x0=None, config=None,
                    correction=None, prop=None, weights=None):
    """theta-hat^ICR and the solver report."""
    ctx = EquationContext(data, structural, q, prop=prop, outfit=fitseq,
                          correction=correction, weights=weights)
    if x0 is None:
        if correction is not None:
            x0, _ = icr_theta_solve(fitseq, q, structural, data, config=config, weights=weights)
        else:
            x0 = _icr_start(ctx)
    return _solve(ctx, "ICR", np.asarray(x0, float), config)


def icr_fit(data, q, structural, fitseq, x0=None, config=None, variance=True,
            correction=None, prop=None, weights=None) -> QuantileFit:
    ctx = EquationContext(data, structural, q, prop=prop, outfit=fitseq,
                          correction=correction, weights=weights)
    if x0 is None:
        if correction is not None:
            x0, _ = icr_theta_solve(fitseq, q, structural, data, config=config, weights=weights)
        else:
            x0 = _icr_start(ctx)
    x0 = np.asarray(x0, float)
    use_alpha = correction is not None
    label = "BC_ICR" if correction is not None else "ICR"
    return _fit(ctx, "ICR", label, x0, config, use_alpha, True, variance)


def icr_sandwich(fitseq, theta_hat, data, q, structural, correction=None, prop=None):
    ctx = EquationContext(data, structural, q, prop=prop, outfit=fitseq, correction=correction)
    return stacked_covariance(ctx, "ICR", np.asarray(theta_hat, float), correction is not None, True)


def _tau_and_start(data, structural, q, tau, x0):
    if x0 is None:
        x0 = _default_start(data, structural, q)
    x0 = np.asarray(x0, float)
    if tau is None:
        res = data.outcome - structural.observed_features(data) @ x0
        tau = bandwidth(res, data.n)
    return tau, x0


def ipw_smoothed_fit(data, q, structural, propensity_fit, tau=None, x0=None, config=None,
                     variance=True, correction=None, weights=None) -> QuantileFit:
    """Smoothed IPW estimator (BC-IPW when ``correction`` is given)."""
    tau, x0 = _tau_and_start(data, structural, q, tau, x0)
    ctx = EquationContext(data, structural, q, prop=propensity_fit, correction=correction,
                          tau=tau, weights=weights)
    _warn_weights(ctx)
    label = "BC_IPW" if correction is not None else "IPW"
    return _fit(ctx, "IPW", label, x0, config, True, False, variance)


def dr_smoothed_fit(data, q, structural, propensity_fit, outcome_fitseq, tau=None, x0=None,
                    config=None, variance=True, correction=None, weights=None) -> QuantileFit:
    """Smoothed doubly robust estimator (BC-DR when ``correction`` is given).

    Defaults: x0 = ICR estimate from ``outcome_fitseq``, tau from its residuals.
    """
    if x0 is None:
        x0, _ = icr_theta_solve(outcome_fitseq, q, structural, data, correction=correction,
                                prop=propensity_fit, weights=weights)
    tau, x0 = _tau_and_start(data, structural, q, tau, x0)
    ctx = EquationContext(data, structural, q, prop=propensity_fit, outfit=outcome_fitseq,
                          correction=correction, tau=tau, weights=weights)
    _warn_weights(ctx)
    label = "BC_DR" if correction is not None else "DR"
    return _fit(ctx, "DR", label, x0, config, True, True, variance)


def unadjusted_qr_fit(data, q, predictors, tau=None, x0=None, config=None, variance=True) -> QuantileFit:
    """Smoothed quantile regression of Y on observed predictors (unit weights)."""
    spec = as_spec(predictors)
    spec.validate(data, data.K)
    X = design_from_T(data, spec, data.treatment_matrix())
    Y = data.outcome
    n, p = X.shape
    if x0 is None:
        from .numerics import weighted_least_squares
        x0 = weighted_least_squares(X, Y)
        res = Y - X @ x0
        ic = [j for j, t in enumerate(spec.terms) if str(t) == "1"]
        if ic:
            x0[ic[0]] += np.quantile(res, q)
    x0 = np.asarray(x0, float)
    if tau is None:
        tau = bandwidth(Y - X @ x0, n)

    def per(th):
        return X * (logistic_kernel((X @ th - Y) / tau) - q)[:, None]

    F = lambda th: per(th).mean(axis=0)
    J = lambda th: (X * (logistic_kernel_deriv((X @ th - Y) / tau) / tau)[:, None]).T @ X / n
    theta, rep = solve_root(F, x0, config or RootSolveConfig(), analytic_J=J)
    if variance:
        Jt = J(theta)
        IF = np.linalg.solve(Jt, per(theta).T)
        cov = symmetrize_psd(IF @ IF.T / n ** 2)
    else:
        cov = np.full((p, p), np.nan)
    return QuantileFit(q, theta, cov, "UnadjustedQR", tau, rep, {"predictors": str(spec)}, "unit")


# ---------------------------------------------------------------------------
# literal influence-function components


def _prefix_tail_mats(data, j):
    """Treatment matrices with the observed prefix of length j and every tail."""
    K = data.K
    A = data.treatment_matrix()
    tails = enumerate_regimens(K - j) if j < K else np.zeros((1, 0), np.int8)
    mats = []
    for t in tails:
        T = A.copy()
        T[:, j:] = t
        mats.append(T)
    return mats


def _d_at(T, data, structural, wf, theta):
    X = design_from_T(data, structural.h_terms, T)
    rho = wf.rho_regimens[np.arange(data.n), regimen_index(T)]
    return rho[:, None] * X, X @ theta


def eif_components(theta, data, propensity_fit, outcome_fitseq, structural, q, tau=None,
                   weights=None):
    """Per-subject psi^(K), psi^(K-1), ..., psi^(0) as a (K+1, n, p) array.

    Index j of the result holds psi^(j).  With ``tau`` the indicator in
    psi^(K) is replaced by the logistic kernel.
    """
    theta = np.asarray(theta, float)
    K = data.K
    wf = weights if weights is not None else weight_function(data, structural)
    cum = propensity_fit.cumulative()
    Y = data.outcome
    out = np.zeros((K + 1, data.n, theta.size))
    (T,) = _prefix_tail_mats(data, K)
    d, h = _d_at(T, data, structural, wf, theta)
    ind = (Y <= h).astype(float) if tau is None else logistic_kernel((h - Y) / tau)
    out[K] = d / cum[:, [K]] * (ind - outcome_fitseq.psi(K, h, T))[:, None]
    for k in range(1, K):
        for T in _prefix_tail_mats(data, k):
            d, h = _d_at(T, data, structural, wf, theta)
            diff = outcome_fitseq.psi(k + 1, h, T) - outcome_fitseq.psi(k, h, T)
            out[k] += d / cum[:, [k]] * diff[:, None]
    for T in _prefix_tail_mats(data, 0):
        d, h = _d_at(T, data, structural, wf, theta)
        out[0] += d * (outcome_fitseq.psi(1, h, T) - q)[:, None]
    return out


def t_decomposition(theta, data, propensity_fit, outcome_fitseq, structural, q, weights=None):
    """Per-subject T^(0), ..., T^(K) as a (K+1, n, p) array (unsmoothed)."""
    theta = np.asarray(theta, float)
    K = data.K
    wf = weights if weights is not None else weight_function(data, structural)
    cum = propensity_fit.cumulative()
    Y = data.outcome
    out = np.zeros((K + 1, data.n, theta.size))
    (T,) = _prefix_tail_mats(data, K)
    d, h = _d_at(T, data, structural, wf, theta)
    out[0] = d / cum[:, [K]] * (Y <= h).astype(float)[:, None]
    for T in _prefix_tail_mats(data, 0):
        d, h = _d_at(T, data, structural, wf, theta)
        out[0] -= d * q
    for k in range(1, K + 1):
        for T in _prefix_tail_mats(data, k - 1):
            d, h = _d_at(T, data, structural, wf, theta)
            out[k] += d / cum[:, [k - 1]] * outcome_fitseq.psi(k, h, T)[:, None]
        for T in _prefix_tail_mats(data, k):
            d, h = _d_at(T, data, structural, wf, theta)
            out[k] -= d / cum[:, [k]] * outcome_fitseq.psi(k, h, T)[:, None]
    return out


# ---------------------------------------------------------------------------
# bootstrap


def _boot_one(args):
    fit_fn, data, seed, b = args
    rng = rng_stream(seed, b)
    idx = rng.integers(0, data.n, size=data.n)
    try:
        return np.asarray(fit_fn(data.take(idx)), float)
    except Exception:
        return None


def bootstrap_ci(fit_fn, data, B=200, seed=0, level=0.95, workers=1):
    """Percentile bootstrap intervals.

    ``fit_fn(dataset) -> theta``.  Replicate b resamples with stream
    (seed, b); percentiles use linear interpolation between order
    statistics (numpy's default ``"linear"`` method).  Returns
    ``(lower, upper, draws)``.
    """
    if B < 50:
        raise ConfigError("bootstrap needs B >= 50")
    jobs = [(fit_fn, data, seed, b) for b in range(B)]
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            res = list(ex.map(_boot_one, jobs))
    else:
        res = [_boot_one(j) for j in jobs]
    ok = [r for r in res if r is not None]
    if len(ok) < 0.9 * B:
        raise BootstrapFailed(f"{B - len(ok)} of {B} bootstrap replicates failed")
    draws = np.vstack(ok)
    a = (1 - level) / 2
    lo = np.percentile(draws, 100 * a, axis=0, method="linear")
    hi = np.percentile(draws, 100 * (1 - a), axis=0, method="linear")
    return lo, hi, draws
