"""Shared numerical kernels.

The normal CDF is ``scipy.special.ndtr`` (Cephes: erf/erfc rational
approximations, ~1e-16 relative accuracy), the normal quantile is
``scipy.special.ndtri`` and the logistic function is ``scipy.special.expit``,
which never overflows.  Linear solves go through LAPACK via numpy.  The
root finder, the numeric Jacobian and the stream construction are ours.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import (
    MaxIterExceeded,
    NonFiniteEvaluation,
    NonPositiveVariance,
    QuantileOutOfRange,
    SingularDesign,
    SingularJacobian,
)

EPS = np.finfo(float).eps
_STEP = EPS ** (1.0 / 3.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)


def _check_var(sigma2):
    s2 = np.asarray(sigma2, dtype=float)
    if np.any(~(s2 > 0)):
        raise NonPositiveVariance(f"variance must be positive (min {np.nanmin(s2)!r})")
    return s2


def gaussian_cdf(y, mu=0.0, sigma2=1.0):
    """P(N(mu, sigma2) <= y)."""
    s2 = _check_var(sigma2)
    return special.ndtr((np.asarray(y, dtype=float) - mu) / np.sqrt(s2))


def gaussian_pdf(y, mu=0.0, sigma2=1.0):
    s2 = _check_var(sigma2)
    z = (np.asarray(y, dtype=float) - mu)
    return np.exp(-0.5 * z * z / s2) / np.sqrt(2.0 * np.pi * s2)


def standard_normal_quantile(q):
    qa = np.asarray(q, dtype=float)
    if np.any(~((qa > 0) & (qa < 1))):
        raise QuantileOutOfRange(f"quantile level must lie in (0, 1), got {q!r}")
    return special.ndtri(qa)


def logistic_kernel(x):
    """K(x) = e^x / (1 + e^x)."""
    return special.expit(x)


def logistic_kernel_deriv(x):
    k = special.expit(x)
    return k * (1.0 - k)


# ---------------------------------------------------------------------------
# least squares


def weighted_least_squares(X, y, w=None, max_condition=1e12):
    """Solve min sum w_i (y_i - x_i'b)^2.

    Uses an SVD-based least-squares solve of sqrt(W) X b = sqrt(W) y, which
    satisfies the normal equations without forming X'WX.  The condition
    estimate reported is that of X'WX (squared singular-value ratio).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise SingularDesign("design and response shapes do not agree")
    if X.shape[1] == 0:
        return np.zeros(0)
    if w is None:
        Xw, yw = X, y
    else:
        w = np.asarray(w, dtype=float)
        if np.any(w < 0):
            raise SingularDesign("negative weights")
        r = np.sqrt(w)
        Xw, yw = X * r[:, None], y * r
    if not (np.all(np.isfinite(Xw)) and np.all(np.isfinite(yw))):
        raise SingularDesign("non-finite entries in design or response")
    beta, _, rank, sv = np.linalg.lstsq(Xw, yw, rcond=None)
    cond = np.inf if sv[-1] == 0 else (sv[0] / sv[-1]) ** 2
    if rank < X.shape[1] or cond > max_condition:
        raise SingularDesign(f"design is singular (condition estimate {cond:.3g})", cond)
    return beta


# ---------------------------------------------------------------------------
# root finding


@dataclass(frozen=True)
class RootSolveConfig:
    tol_residual: float = 1e-8
    tol_step: float = 1e-10
    max_iter: int = 100
    damping: str = "halving_line_search"
    jacobian: str = "analytic_if_available"

    def __post_init__(self):
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.damping not in ("none", "halving_line_search"):
            raise ValueError(f"unknown damping {self.damping!r}")
        if self.jacobian not in ("analytic_if_available", "central_difference"):
            raise ValueError(f"unknown jacobian mode {self.jacobian!r}")


@dataclass(frozen=True)
class SolveReport:
    converged: bool
    iterations: int
    final_residual_norm: float
    jacobian_condition_estimate: float


def numeric_jacobian(F, x, f0=None):
    """Central-difference Jacobian, step h_j = cbrt(eps) * max(1, |x_j|)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        h = _STEP * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(F(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(F(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"non-finite function value near coordinate {j}")
        cols.append((fp - fm) / (xp[j] - xm[j]))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def _norm(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


def solve_root(F, x0, config: RootSolveConfig | None = None, analytic_J=None):
    """Damped Newton iteration for F(x) = 0.

    Returns ``(x, report)``.  Raises ``SingularJacobian`` or
    ``MaxIterExceeded`` carrying the best iterate and its report.
    """
    cfg = config or RootSolveConfig()
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    f = np.atleast_1d(np.asarray(F(x), dtype=float))
    if not np.all(np.isfinite(f)):
        raise NonFiniteEvaluation("F is not finite at the starting point")
    fn = _norm(f)
    best = (x.copy(), fn)
    cond = float("nan")
    use_analytic = analytic_J is not None and cfg.jacobian == "analytic_if_available"
    for it in range(1, cfg.max_iter + 1):
        if fn <= cfg.tol_residual:
            return x, SolveReport(True, it - 1, fn, cond)
        J = np.atleast_2d(analytic_J(x)) if use_analytic else numeric_jacobian(F, x, f)
        try:
            cond = float(np.linalg.cond(J))
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            cond = float("inf")
            step = None
        if step is None or not np.all(np.isfinite(step)) or cond > 1e15:
            rep = SolveReport(False, it, best[1], cond)
            raise SingularJacobian("Jacobian is singular", best[0], rep)
        t = 1.0
        halvings = 30 if cfg.damping == "halving_line_search" else 0
        for _ in range(halvings + 1):
            xn = x + t * step
            fnew = np.atleast_1d(np.asarray(F(xn), dtype=float))
            fnn = _norm(fnew) if np.all(np.isfinite(fnew)) else np.inf
            if fnn < fn or halvings == 0:
                break
            t *= 0.5
        if not np.isfinite(fnn):
            break
        small_step = _norm(t * step) <= cfg.tol_step * max(1.0, _norm(x))
        x, f, fn = xn, fnew, fnn
        if fn < best[1]:
            best = (x.copy(), fn)
        if fn <= cfg.tol_residual:
            return x, SolveReport(True, it, fn, cond)
        if small_step:
            break
    rep = SolveReport(False, cfg.max_iter, best[1], cond)
    raise MaxIterExceeded(f"no convergence (residual {best[1]:.3g})", best[0], rep)


def bisect(f, lo, hi, tol=1e-13, max_iter=200):
    """Bisection for a scalar sign change on [lo, hi]."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise ValueError("no sign change on bracket")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0 or hi - lo < tol:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# random streams


def rng_stream(master_seed: int, stream_id: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, stream_id)``.

    The pair is hashed by ``numpy.random.SeedSequence`` into a 128-bit key
    for the counter-based Philox4x64-10 bit generator, so a stream depends
    only on its two integers and never on how many other streams were drawn
    before it.
    """
    ss = np.random.SeedSequence([int(master_seed) & (2 ** 64 - 1), int(stream_id) & (2 ** 64 - 1)])
    return np.random.Generator(np.random.Philox(ss))


def symmetrize_psd(S):
    """Symmetrize and floor negative eigenvalues at zero."""
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    w, V = np.linalg.eigh(S)
    if np.all(w >= 0):
        return S
    w = np.clip(w, 0.0, None)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)
