"""Sequential logistic propensity models and inverse-probability weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import LongitudinalDataset, TermSpec, as_spec, build_design, enumerate_regimens
from .errors import EmptyStratum, SeparationDetected, SingularDesign

PROB_FLOOR = 1e-12
SEPARATION_BOUND = 50.0


def _logistic_mle(X, a, tol=1e-10, max_iter=100):
    """Newton-Raphson for the logistic log-likelihood with step halving."""
    n, p = X.shape
    beta = np.zeros(p)

    def loglik(b):
        eta = X @ b
        return float(np.sum(a * eta - np.logaddexp(0.0, eta)))

    ll = loglik(beta)
    for _ in range(max_iter):
        pr = expit(X @ beta)
        score = X.T @ (a - pr)
        if np.max(np.abs(score)) <= tol * n:
            return beta
        H = (X * (pr * (1 - pr))[:, None]).T @ X
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            raise SingularDesign("singular logistic information") from None
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            llc = loglik(cand)
            if llc >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, llc
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationDetected(
                f"coefficient norm {np.max(np.abs(beta)):.3g} exceeds {SEPARATION_BOUND}")
    pr = expit(X @ beta)
    if np.max(np.abs(X.T @ (a - pr))) <= 1e-8 * n:
        return beta
    raise SingularDesign("logistic fit did not converge")


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Fitted pi_k models, one logistic regression per period.

    ``designs[k]`` is the (n, p_k) design of period k+1 evaluated on the
    observed history; everything downstream can be recomputed for any
    flattened coefficient vector, which the sandwich variances rely on.
    """

    alpha: tuple
    specs: tuple
    designs: tuple
    treatments: np.ndarray

    @property
    def K(self):
        return len(self.alpha)

    @property
    def dims(self):
        return tuple(len(a) for a in self.alpha)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.alpha) if self.alpha else np.zeros(0)

    def split(self, flat=None):
        if flat is None:
            return self.alpha
        out, i = [], 0
        for d in self.dims:
            out.append(np.asarray(flat[i:i + d]))
            i += d
        return tuple(out)

    def prob_treated(self, flat=None) -> np.ndarray:
        """(n, K) matrix of P(A_k = 1 | observed history)."""
        cols = [expit(X @ a) for X, a in zip(self.designs, self.split(flat))]
        return np.clip(np.column_stack(cols), PROB_FLOOR, 1 - PROB_FLOOR)

    def pi_observed(self, flat=None) -> np.ndarray:
        """(n, K) fitted probability of the observed A_k."""
        p = self.prob_treated(flat)
        return np.where(self.treatments == 1, p, 1 - p)

    @property
    def per_subject_pk(self) -> np.ndarray:
        return self.pi_observed()

    def cumulative(self, flat=None) -> np.ndarray:
        """(n, K+1) matrix with column k = pi-bar_k (column 0 is 1)."""
        pi = self.pi_observed(flat)
        return np.column_stack([np.ones(pi.shape[0]), np.cumprod(pi, axis=1)])

    def scores(self, flat=None) -> np.ndarray:
        """(n, sum p_k) per-subject stacked logistic score."""
        p = self.prob_treated(flat)
        return np.column_stack([X * (self.treatments[:, k] - p[:, k])[:, None]
                                for k, X in enumerate(self.designs)])

    def information(self, flat=None) -> np.ndarray:
        """Block-diagonal mean derivative of the score (negative definite)."""
        p = self.prob_treated(flat)
        d = sum(self.dims)
        out = np.zeros((d, d))
        i = 0
        n = p.shape[0]
        for k, X in enumerate(self.designs):
            w = p[:, k] * (1 - p[:, k])
            blk = -(X * w[:, None]).T @ X / n
            j = i + X.shape[1]
            out[i:j, i:j] = blk
            i = j
        return out

    @property
    def score_at_fit(self) -> np.ndarray:
        return self.scores().sum(axis=0)

    @property
    def info_blocks(self) -> np.ndarray:
        return self.information()


def fit_propensity_sequence(data: LongitudinalDataset, specs) -> PropensityFit:
    """Fit logit P(A_k = 1 | A_1..A_{k-1}, L_1..L_k) for k = 1..K."""
    specs = tuple(as_spec(s) for s in specs)
    if len(specs) != data.K:
        raise ValueError(f"need {data.K} propensity specs, got {len(specs)}")
    designs, alphas = [], []
    for k, spec in enumerate(specs, start=1):
        spec.validate(data, k, max_treatment=k - 1, allow_future=False)
        X = build_design(data, spec, k)
        alphas.append(_logistic_mle(X, data.treatments[:, k - 1].astype(float)))
        designs.append(X)
    return PropensityFit(tuple(alphas), specs, tuple(designs), data.treatments.astype(np.int8))


def cumulative_weights(fit: PropensityFit) -> np.ndarray:
    """(n, K+1): pi-bar_0 = 1, pi-bar_k = prod_{j<=k} pi_j."""
    return fit.cumulative()


def propensity_score_blocks(fit: PropensityFit, data: LongitudinalDataset | None = None):
    """Per-subject stacked score U_alpha and mean information I_alpha."""
    return fit.scores(), fit.information()


# ---------------------------------------------------------------------------
# stabilized numerators


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """rho(a, Z) at every (subject, regimen) plus its value at the observed regimen."""

    rho_regimens: np.ndarray
    numerator: np.ndarray
    kind: str


def _z_matrix(data, Z):
    if not Z:
        return np.zeros((data.n, 0))
    cols = []
    for name in Z:
        k, _ = data.locate(name)
        if k != 1:
            raise ValueError(f"Z covariate {name} is not a period-1 covariate")
        cols.append(data.column(1, name))
    return np.column_stack(cols)


def _is_categorical(Zm, max_levels=10):
    return all(len(np.unique(c)) <= max_levels for c in Zm.T)


def stabilized_numerator(data: LongitudinalDataset, Z=(), mode: str = "auto") -> WeightFunction:
    """prod_k f(a_k | a_{k-1}, Z) estimated from the data.

    Cell frequencies over (treatment history, Z) strata are used when Z is
    empty or categorical (``mode="cells"``); otherwise (``mode="logistic"``)
    a logistic model in (A_1..A_{k-1}, Z) is fitted per period.
    """
    Zm = _z_matrix(data, tuple(Z))
    if mode == "auto":
        mode = "cells" if Zm.shape[1] == 0 or _is_categorical(Zm) else "logistic"
    n, K = data.n, data.K
    regs = enumerate_regimens(K)
    R = regs.shape[0]
    A = data.treatments.astype(np.int64)
    rho = np.ones((n, R))
    num = np.ones(n)
    if mode == "cells":
        if Zm.shape[1]:
            _, zid = np.unique(Zm, axis=0, return_inverse=True)
            zid = zid.reshape(-1)
        else:
            zid = np.zeros(n, dtype=np.int64)
        nz = int(zid.max()) + 1
        for k in range(K):
            w = 2 ** k
            hist = (A[:, :k] * (2 ** np.arange(k))[None, :]).sum(axis=1) if k else np.zeros(n, np.int64)
            key = zid * w + hist
            tot = np.bincount(key, minlength=nz * w).astype(float)
            ones = np.bincount(key, weights=A[:, k].astype(float), minlength=nz * w)
            rhist = (regs[:, :k].astype(np.int64) * (2 ** np.arange(k))[None, :]).sum(axis=1) if k else np.zeros(R, np.int64)
            rkey = zid[:, None] * w + rhist[None, :]
            t = tot[rkey]
            if np.any(t == 0):
                raise EmptyStratum(f"empty (treatment history, Z) stratum at period {k + 1}")
            p1 = ones[rkey] / t
            rho *= np.where(regs[None, :, k] == 1, p1, 1 - p1)
            p1obs = ones[key] / tot[key]
            num *= np.where(A[:, k] == 1, p1obs, 1 - p1obs)
    elif mode == "logistic":
        for k in range(K):
            X = np.column_stack([np.ones(n), A[:, :k], Zm])
            b = _logistic_mle(X, A[:, k].astype(float))
            pobs = expit(X @ b)
            num *= np.where(A[:, k] == 1, pobs, 1 - pobs)
            for r in range(R):
                Xr = np.column_stack([np.ones(n), np.broadcast_to(regs[r, :k], (n, k)), Zm])
                pr = expit(Xr @ b)
                rho[:, r] *= pr if regs[r, k] == 1 else 1 - pr
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return WeightFunction(rho, num, "stabilized")


def unit_weights(data: LongitudinalDataset) -> WeightFunction:
    R = 2 ** data.K
    return WeightFunction(np.ones((data.n, R)), np.ones(data.n), "unit")


def weight_function(data: LongitudinalDataset, structural) -> WeightFunction:
    if structural.rho == "unit":
        return unit_weights(data)
    return stabilized_numerator(data, structural.Z)
