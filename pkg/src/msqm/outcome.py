"""Heteroscedastic Gaussian iterative conditional regression (ICR).

For each period k the model is

    Y_{A_k, a_{k+1..K}} | A_k, L_k  ~  N(delta_k' g_k, sigma_k^2(s_k; eta_k)),

fitted backwards from k = K.  At k = K the response is the observed Y.  At
k < K every subject contributes one row per counterfactual tail
a_{k+1..K}; the response moments come from the period-(k+1) fit evaluated at
(A_1..A_k, a_{k+1}, ...), which makes both estimating-equation blocks
explicit (no numerical integration).

``beta`` vectors are always stacked in period order k = 1..K with each
block laid out as [delta_k, eta_k].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import (
    Intercept,
    LongitudinalDataset,
    TermSpec,
    as_spec,
    design_from_T,
    enumerate_regimens,
    regimen_treatments,
)
from .errors import ConfigError, NonPositiveVarianceFit, SolverFailed
from .numerics import (
    RootSolveConfig,
    gaussian_cdf,
    gaussian_pdf,
    solve_root,
    weighted_least_squares,
)


@dataclass(frozen=True)
class OutcomeModelSpec:
    mean_terms: TermSpec
    var_terms: TermSpec
    var_link: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "mean_terms", as_spec(self.mean_terms))
        object.__setattr__(self, "var_terms", as_spec(self.var_terms))
        if self.var_link not in ("linear", "log"):
            raise ConfigError(f"var_link must be 'linear' or 'log', got {self.var_link!r}")

    def without_covariate(self, name):
        return OutcomeModelSpec(self.mean_terms.without_covariate(name),
                                self.var_terms.without_covariate(name), self.var_link)


def variance(S, eta, link):
    lin = S @ eta
    return lin if link == "linear" else np.exp(lin)


def variance_grad(S, eta, link):
    """d sigma^2 / d eta, same shape as S."""
    if link == "linear":
        return S
    return S * np.exp(S @ eta)[..., None]


class ICRDesigns:
    """Design arrays for every period, evaluated once per dataset.

    ``G_obs[k]``/``S_obs[k]`` : (n, T_k, p) designs of model k at the observed
    prefix A_1..A_k and every tail a_{k+1..K} (T_k = 2^(K-k)).
    ``G_next[k]``/``S_next[k]`` : designs of model k+1 at (A_1..A_k, tail).
    ``G_reg[k]``/``S_reg[k]`` : (n, R, p) designs of model k with every
    treatment taken from regimen r (R = 2^K, lexicographic order).
    Indices are 1-based periods stored in dicts.
    """

    def __init__(self, data: LongitudinalDataset, specs):
        specs = tuple(specs)
        if len(specs) != data.K:
            raise ConfigError(f"need {data.K} outcome specs, got {len(specs)}")
        self.data = data
        self.specs = specs
        self.n, self.K = data.n, data.K
        K = self.K
        for k, s in enumerate(specs, start=1):
            s.mean_terms.validate(data, k)
            s.var_terms.validate(data, k)
        self.regimens = enumerate_regimens(K)
        self.tails = {k: enumerate_regimens(K - k) if k < K else np.zeros((1, 0), np.int8)
                      for k in range(1, K + 1)}
        A = data.treatment_matrix()
        self.T_tail = {}
        for k in range(1, K + 1):
            mats = []
            for t in self.tails[k]:
                T = A.copy()
                T[:, k:] = t
                mats.append(T)
            self.T_tail[k] = mats
        self.T_reg = [regimen_treatments(self.n, r) for r in self.regimens]
        self.G_obs, self.S_obs, self.G_next, self.S_next = {}, {}, {}, {}
        self.G_reg, self.S_reg = {}, {}
        for k in range(1, K + 1):
            s = specs[k - 1]
            self.G_obs[k] = self._stack(s.mean_terms, self.T_tail[k])
            self.S_obs[k] = self._stack(s.var_terms, self.T_tail[k])
            self.G_reg[k] = self._stack(s.mean_terms, self.T_reg)
            self.S_reg[k] = self._stack(s.var_terms, self.T_reg)
            if k < K:
                nxt = specs[k]
                self.G_next[k] = self._stack(nxt.mean_terms, self.T_tail[k])
                self.S_next[k] = self._stack(nxt.var_terms, self.T_tail[k])
        self.dims = tuple((specs[k].mean_terms.__len__(), len(specs[k].var_terms)) for k in range(K))

    def _stack(self, spec, mats):
        return np.stack([design_from_T(self.data, spec, T) for T in mats], axis=1)

    @property
    def beta_dim(self):
        return sum(a + b for a, b in self.dims)

    def split(self, beta_flat):
        """Flat beta -> list of (delta_k, eta_k) for k = 1..K."""
        out, i = [], 0
        for p, s in self.dims:
            out.append((np.asarray(beta_flat[i:i + p]), np.asarray(beta_flat[i + p:i + p + s])))
            i += p + s
        return out


def _step_scores(des: ICRDesigns, k, delta, eta, y1, y2):
    """Per-subject (delta, eta) estimating functions for period k.

    ``y1`` and ``y2`` are (n, T_k) arrays of E[y] and E[y^2] under the
    period-(k+1) distribution (or Y and Y^2 at k = K).
    """
    spec = des.specs[k - 1]
    G, S = des.G_obs[k], des.S_obs[k]
    mu = G @ delta
    s2 = variance(S, eta, spec.var_link)
    e2 = y2 - 2.0 * y1 * mu + mu * mu
    u_delta = np.einsum("itp,it->ip", G, y1 - mu)
    u_eta = np.einsum("its,it->is", variance_grad(S, eta, spec.var_link), s2 - e2)
    return u_delta, u_eta


def _response_moments(des: ICRDesigns, k, beta_next, moments=None):
    """E[y], E[y^2] for the stacked rows of step k from the period-(k+1) fit."""
    if k == des.K:
        y = des.data.outcome[:, None]
        return y, y * y
    d1, e1 = beta_next
    link = des.specs[k].var_link
    yhat = des.G_next[k] @ d1
    s2 = variance(des.S_next[k], e1, link)
    y1, y2 = yhat, yhat * yhat + s2
    if moments is not None:
        m1, m2 = moments
        y1 = y1 - m1
        y2 = y2 - m2
    return y1, y2


def _fit_eta(des, k, delta, y1, y2):
    spec = des.specs[k - 1]
    G, S = des.G_obs[k], des.S_obs[k]
    n, T, s = S.shape
    mu = G @ delta
    e2 = (y2 - 2.0 * y1 * mu + mu * mu).reshape(-1)
    Sf = S.reshape(n * T, s)
    if spec.var_link == "linear":
        eta = weighted_least_squares(Sf, e2)
        s2 = Sf @ eta
        if np.any(s2 <= 0):
            raise NonPositiveVarianceFit(
                f"period {k}: fitted variance {s2.min():.3g} <= 0 under the linear link")
        return eta
    # log link: Newton on sum_i dsigma^2/deta (sigma^2 - e2) = 0
    mean_e2 = float(np.mean(e2))
    if mean_e2 <= 0:
        raise NonPositiveVarianceFit(f"period {k}: nonpositive mean squared residual")
    try:
        x0 = weighted_least_squares(Sf, np.log(np.maximum(e2, 1e-8 * mean_e2)))
    except Exception:
        x0 = np.zeros(s)

    def F(eta):
        v = np.exp(Sf @ eta)
        return (Sf * v[:, None]).T @ (v - e2) / (n * mean_e2 ** 2)

    def J(eta):
        v = np.exp(Sf @ eta)
        w = v * (2 * v - e2)
        return (Sf * w[:, None]).T @ Sf / (n * mean_e2 ** 2)

    eta, _ = solve_root(F, x0, RootSolveConfig(tol_residual=1e-12), analytic_J=J)
    return eta


def _fit_step(des, k, beta_next, moments=None):
    y1, y2 = _response_moments(des, k, beta_next, moments)
    G = des.G_obs[k]
    n, T, p = G.shape
    delta = weighted_least_squares(G.reshape(n * T, p), y1.reshape(-1))
    eta = _fit_eta(des, k, delta, y1, y2)
    return delta, eta


@dataclass(frozen=True, eq=False)
class OutcomeFitSequence:
    """Fitted (delta_k, eta_k), k = 1..K, plus the designs used to fit them.

    ``correction`` (optional) supplies confounding-function moments for the
    bias-corrected backward steps; ``alpha_flat`` is the propensity
    coefficient vector the correction was evaluated at.
    """

    deltas: tuple
    etas: tuple
    designs: ICRDesigns
    correction: object = None
    alpha_flat: np.ndarray = None

    @property
    def specs(self):
        return self.designs.specs

    @property
    def K(self):
        return self.designs.K

    @property
    def beta_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([d, e]) for d, e in zip(self.deltas, self.etas)])

    def blocks(self, beta_flat=None):
        if beta_flat is None:
            return list(zip(self.deltas, self.etas))
        return self.designs.split(beta_flat)

    def regimen_moments(self, k, beta_flat=None):
        """(mu, sigma^2), each (n, R), of model k at every regimen."""
        delta, eta = self.blocks(beta_flat)[k - 1]
        des = self.designs
        return des.G_reg[k] @ delta, variance(des.S_reg[k], eta, des.specs[k - 1].var_link)

    def psi(self, k, y, T, beta_flat=None):
        """Psi_k(y; treatments T, history) for an (n, K) treatment matrix."""
        delta, eta = self.blocks(beta_flat)[k - 1]
        spec = self.specs[k - 1]
        data = self.designs.data
        mu = design_from_T(data, spec.mean_terms, T) @ delta
        s2 = variance(design_from_T(data, spec.var_terms, T), eta, spec.var_link)
        return gaussian_cdf(y, mu, s2)

    def beta_jacobian(self) -> np.ndarray:
        """Numeric d mean(beta scores) / d beta at the fit, computed once."""
        cache = self.__dict__.setdefault("_jac_cache", {})
        if "beta" not in cache:
            from .numerics import numeric_jacobian
            cache["beta"] = numeric_jacobian(
                lambda b: self.beta_scores(b, self.alpha_flat).mean(axis=0), self.beta_flat)
        return cache["beta"]

    def beta_scores(self, beta_flat=None, alpha_flat=None) -> np.ndarray:
        """(n, dim beta) per-subject stacked estimating functions."""
        des = self.designs
        blocks = self.blocks(beta_flat)
        a = self.alpha_flat if alpha_flat is None else alpha_flat
        cols = []
        for k in range(1, des.K + 1):
            mom = None
            if k < des.K and self.correction is not None:
                mom = self.correction.tail_moments(k, des, a)
            nxt = blocks[k] if k < des.K else None
            y1, y2 = _response_moments(des, k, nxt, mom)
            ud, ue = _step_scores(des, k, blocks[k - 1][0], blocks[k - 1][1], y1, y2)
            cols.extend([ud, ue])
        return np.column_stack(cols)


def fit_terminal(data: LongitudinalDataset, spec_K: OutcomeModelSpec, designs: ICRDesigns | None = None):
    """(delta_K, eta_K) from the observed outcome."""
    if designs is None:
        flat = OutcomeModelSpec(TermSpec((Intercept(),)), TermSpec((Intercept(),)))
        designs = ICRDesigns(data, [flat] * (data.K - 1) + [spec_K])
    return _fit_step(designs, data.K, None)


def backward_step(k, designs: ICRDesigns, beta_next, moments=None):
    """(delta_k, eta_k) given the period-(k+1) fit (delta, eta)."""
    if not 1 <= k < designs.K:
        raise ConfigError(f"backward step needs 1 <= k < K, got {k}")
    return _fit_step(designs, k, beta_next, moments)


def fit_icr(data: LongitudinalDataset, specs, correction=None, alpha_flat=None,
            designs: ICRDesigns | None = None) -> OutcomeFitSequence:
    """Run the terminal fit and all backward steps."""
    des = designs if designs is not None else ICRDesigns(data, specs)
    K = des.K
    deltas = [None] * K
    etas = [None] * K
    deltas[K - 1], etas[K - 1] = _fit_step(des, K, None)
    for k in range(K - 1, 0, -1):
        mom = correction.tail_moments(k, des, alpha_flat) if correction is not None else None
        deltas[k - 1], etas[k - 1] = _fit_step(des, k, (deltas[k], etas[k]), mom)
    return OutcomeFitSequence(tuple(deltas), tuple(etas), des, correction,
                              None if alpha_flat is None else np.asarray(alpha_flat))


def psi_cdf(fitseq: OutcomeFitSequence, k, y, regimen, beta_flat=None):
    """Psi_k(y, a, l_k) for every subject under a fixed regimen."""
    T = regimen_treatments(fitseq.designs.n, regimen)
    return fitseq.psi(k, y, T, beta_flat)


def psi_pdf(fitseq: OutcomeFitSequence, k, y, regimen, beta_flat=None):
    delta, eta = fitseq.blocks(beta_flat)[k - 1]
    spec = fitseq.specs[k - 1]
    data = fitseq.designs.data
    T = regimen_treatments(data.n, regimen)
    mu = design_from_T(data, spec.mean_terms, T) @ delta
    s2 = variance(design_from_T(data, spec.var_terms, T), eta, spec.var_link)
    return gaussian_pdf(y, mu, s2)
