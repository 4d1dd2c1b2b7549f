"""Two-parameter wind-speed distributions: MLE fitting and goodness of fit.

Weibull(k, lam), Gamma(alpha, beta) with ``beta`` a rate, and LogNormal(mu,
sigma) on the log scale. Fitting runs a damped Newton iteration on the
log-likelihood in log-parameter space (``mu`` stays unconstrained) from
method-of-moments starting values.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import special, stats

from .core import ValidationError, WeibullParams

MIN_SAMPLE = 10
GRAD_TOL = 1e-8


class FitError(ValueError):
    pass


class DistFamily(str, enum.Enum):
    # declaration order is the tie-break order for log-likelihood tallies
    WEIBULL = "weibull"
    GAMMA = "gamma"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class DistFit:
    family: DistFamily
    params: tuple[float, float]
    loglik: float
    ks_stat: float
    p95_abs_diff: float
    n: int

    def cdf(self, x):
        return family_cdf(self.family, self.params, x)

    def ppf(self, q):
        return family_ppf(self.family, self.params, q)

    def weibull(self) -> WeibullParams:
        if self.family is not DistFamily.WEIBULL:
            raise TypeError(f"{self.family.value} fit has no Weibull parameters")
        return WeibullParams(*self.params)


def weibull_cdf(w, par: WeibullParams):
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("wind speed must be >= 0")
    return -np.expm1(-((w / par.scale) ** par.shape))


def weibull_quantile(prob, par: WeibullParams):
    """Inverse CDF ``lam * (-log(1 - p)) ** (1/k)`` for ``p`` in ``[0, 1)``."""
    p = np.asarray(prob, dtype=float)
    if np.any(p >= 1):
        raise ValueError("percentile at upper bound (p must be < 1)")
    if np.any(p < 0) or np.any(~np.isfinite(p)):
        raise ValueError("percentile must lie in [0, 1)")
    return par.scale * (-np.log1p(-p)) ** (1.0 / par.shape)


def weibull_mean(par: WeibullParams) -> float:
    return par.scale * math.gamma(1.0 + 1.0 / par.shape)


def weibull_variance(par: WeibullParams) -> float:
    g1 = math.gamma(1.0 + 1.0 / par.shape)
    g2 = math.gamma(1.0 + 2.0 / par.shape)
    return par.scale ** 2 * (g2 - g1 ** 2)


def sqrt_weibull_params(par: WeibullParams) -> WeibullParams:
    """If ``W ~ Weibull(k, lam)`` then ``sqrt(W) ~ Weibull(2k, sqrt(lam))``."""
    return WeibullParams(2.0 * par.shape, math.sqrt(par.scale))


def sqrt_weibull_mean(par: WeibullParams) -> float:
    """``E[sqrt(W)] = sqrt(lam) * Gamma(1 + 1/(2k))``."""
    return math.sqrt(par.scale) * math.gamma(1.0 + 1.0 / (2.0 * par.shape))


def family_cdf(family: DistFamily, params, x):
    a, b = params
    x = np.asarray(x, dtype=float)
    if family is DistFamily.WEIBULL:
        return -np.expm1(-((np.maximum(x, 0.0) / b) ** a))
    if family is DistFamily.GAMMA:
        return special.gammainc(a, b * np.maximum(x, 0.0))
    if family is DistFamily.LOGNORMAL:
        with np.errstate(divide="ignore"):
            return special.ndtr((np.log(np.maximum(x, 0.0)) - a) / b)
    raise ValueError(family)


def family_ppf(family: DistFamily, params, q):
    a, b = params
    q = np.asarray(q, dtype=float)
    if family is DistFamily.WEIBULL:
        return b * (-np.log1p(-q)) ** (1.0 / a)
    if family is DistFamily.GAMMA:
        return stats.gamma.ppf(q, a, scale=1.0 / b)
    if family is DistFamily.LOGNORMAL:
        return np.exp(a + b * special.ndtri(q))
    raise ValueError(family)


def loglik(family: DistFamily, params, x) -> float:
    a, b = params
    x = np.asarray(x, dtype=float)
    if family is DistFamily.WEIBULL:
        return float(np.sum(stats.weibull_min.logpdf(x, a, scale=b)))
    if family is DistFamily.GAMMA:
        return float(np.sum(stats.gamma.logpdf(x, a, scale=1.0 / b)))
    if family is DistFamily.LOGNORMAL:
        return float(np.sum(stats.lognorm.logpdf(x, b, scale=math.exp(a))))
    raise ValueError(family)


def prepare_sample(sample) -> np.ndarray:
    """Validate a sample and replace exact zeros by half the smallest positive value."""
    x = np.asarray(sample, dtype=float).ravel()
    if x.size < MIN_SAMPLE:
        raise FitError(f"too few observations ({x.size} < {MIN_SAMPLE})")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise FitError("sample must be finite and non-negative")
    if np.all(x == x[0]):
        raise FitError("degenerate sample")
    zero = x == 0
    if zero.any():
        x = x.copy()
        x[zero] = 0.5 * x[~zero].min()
    return x


# ---- Newton iteration on log-parameters -------------------------------------

def _weibull_derivs(theta, x, logx):
    k, lam = math.exp(theta[0]), math.exp(theta[1])
    n = x.size
    v = k * (logx - theta[1])
    u = np.exp(v)
    su, suv = u.sum(), (u * v).sum()
    ll = n * math.log(k) - n * math.log(lam) + (k - 1) * (logx - theta[1]).sum() - su
    g = np.array([n + (v * (1 - u)).sum(), k * (su - n)])
    h_aa = (v * (1 - u)).sum() - (u * v * v).sum()
    h_ab = -k * (n - su) + k * suv
    h_bb = -k * k * su
    return ll, g, np.array([[h_aa, h_ab], [h_ab, h_bb]])


def _gamma_derivs(theta, x, logx):
    a, b = math.exp(theta[0]), math.exp(theta[1])
    n = x.size
    sx, slx = x.sum(), logx.sum()
    ll = n * a * theta[1] - n * special.gammaln(a) + (a - 1) * slx - b * sx
    ga = a * (n * theta[1] - n * special.digamma(a) + slx)
    gb = n * a - b * sx
    h_aa = ga - a * a * n * special.polygamma(1, a)
    h_ab = a * n
    h_bb = -b * sx
    return ll, np.array([ga, gb]), np.array([[h_aa, h_ab], [h_ab, h_bb]])


def _lognormal_derivs(theta, x, logx):
    mu, s = theta[0], math.exp(theta[1])
    n = x.size
    r = logx - mu
    s1, s2 = r.sum(), (r * r).sum()
    ll = -logx.sum() - n * theta[1] - 0.5 * n * math.log(2 * math.pi) - s2 / (2 * s * s)
    g = np.array([s1 / s ** 2, -n + s2 / s ** 2])
    h = np.array([[-n / s ** 2, -2 * s1 / s ** 2], [-2 * s1 / s ** 2, -2 * s2 / s ** 2]])
    return ll, g, h


_DERIVS = {
    DistFamily.WEIBULL: _weibull_derivs,
    DistFamily.GAMMA: _gamma_derivs,
    DistFamily.LOGNORMAL: _lognormal_derivs,
}


def moment_start(family: DistFamily, x: np.ndarray) -> np.ndarray:
    """Method-of-moments estimate in the optimiser's coordinates."""
    m, v = x.mean(), x.var()
    if family is DistFamily.WEIBULL:
        k = (math.sqrt(v) / m) ** -1.086
        lam = m / math.gamma(1 + 1 / k)
        return np.log([k, lam])
    if family is DistFamily.GAMMA:
        return np.log([m * m / v, m / v])
    s2 = math.log1p(v / (m * m))
    return np.array([math.log(m) - s2 / 2, 0.5 * math.log(s2)])


def _newton(family, x, theta0, max_iter=200):
    derivs = _DERIVS[family]
    logx = np.log(x)
    theta = np.asarray(theta0, dtype=float)
    ll, g, h = derivs(theta, x, logx)
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= GRAD_TOL:
            break
        try:
            step = -np.linalg.solve(h, g)
            if step @ g <= 0:  # not an ascent direction
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = g / max(1.0, np.abs(g).max())
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            ll_c, g_c, h_c = derivs(cand, x, logx)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        theta, ll, g, h = cand, ll_c, g_c, h_c
    return theta, ll, g


def _to_params(family, theta):
    if family is DistFamily.LOGNORMAL:
        return (float(theta[0]), float(math.exp(theta[1])))
    return (float(math.exp(theta[0])), float(math.exp(theta[1])))


def empirical_quantile(x, q: float) -> float:
    """Linear interpolation between order statistics (type 7)."""
    return float(np.quantile(np.asarray(x, dtype=float), q, method="linear"))


def ks_statistic(sample, fitted) -> float:
    """Two-sided Kolmogorov-Smirnov distance ``max(D+, D-)``.

    ``fitted`` is a :class:`DistFit` or any callable CDF.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("empty sample")
    cdf = fitted.cdf if isinstance(fitted, DistFit) else fitted
    f = np.asarray(cdf(x), dtype=float)
    n = x.size
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - f)
    d_minus = np.max(f - (i - 1) / n)
    return float(max(d_plus, d_minus))


def fit_mle(family: DistFamily | str, sample) -> DistFit:
    family = DistFamily(family)
    raw = np.asarray(sample, dtype=float).ravel()
    x = prepare_sample(raw)
    theta0 = moment_start(family, x)
    theta, ll, g = _newton(family, x, theta0)
    if np.max(np.abs(g)) > GRAD_TOL:
        # fp cancellation on very large samples can stall the last digit
        if np.max(np.abs(g)) > GRAD_TOL * x.size:
            raise FitError(f"{family.value} MLE did not converge (|grad| = {np.max(np.abs(g)):.2e})")
        warnings.warn(
            f"{family.value} MLE stopped at |grad| = {np.max(np.abs(g)):.2e}", RuntimeWarning, stacklevel=2
        )
    params = _to_params(family, theta)
    fit = DistFit(family, params, float(ll), 0.0, 0.0, int(x.size))
    ks = ks_statistic(x, fit)
    p95 = abs(empirical_quantile(raw, 0.95) - float(family_ppf(family, params, 0.95)))
    return DistFit(family, params, float(ll), ks, p95, int(x.size))


def fit_weibull(sample) -> WeibullParams:
    return fit_mle(DistFamily.WEIBULL, sample).weibull()


@dataclass(frozen=True)
class FamilySummary:
    family: DistFamily
    wins: int
    mean_ks: float
    mean_p95_abs_diff: float


@dataclass(frozen=True)
class SelectionResult:
    summary: dict[DistFamily, FamilySummary]
    fits: dict[str, dict[DistFamily, DistFit]]
    failed: dict[str, str]

    def best_by_ks(self) -> DistFamily:
        return min(self.summary.values(), key=lambda s: s.mean_ks).family


def select_distribution(samples_by_station: Mapping[str, Sequence[float]]) -> SelectionResult:
    """Fit every family at every station and tabulate the comparison.

    Log-likelihood ties go to the earlier family in ``DistFamily`` order.
    Stations whose fit fails are skipped and reported in ``failed``.
    """
    fits: dict[str, dict[DistFamily, DistFit]] = {}
    failed: dict[str, str] = {}
    for sid in sorted(samples_by_station):
        try:
            fits[sid] = {fam: fit_mle(fam, samples_by_station[sid]) for fam in DistFamily}
        except FitError as exc:
            failed[sid] = str(exc)
    wins = {fam: 0 for fam in DistFamily}
    for per in fits.values():
        best = max(DistFamily, key=lambda f: (per[f].loglik, -list(DistFamily).index(f)))
        wins[best] += 1
    summary = {}
    for fam in DistFamily:
        ks = [per[fam].ks_stat for per in fits.values()]
        p95 = [per[fam].p95_abs_diff for per in fits.values()]
        summary[fam] = FamilySummary(
            fam, wins[fam], float(np.mean(ks)) if ks else math.nan, float(np.mean(p95)) if p95 else math.nan
        )
    return SelectionResult(summary, fits, failed)


__all__ = [
    "DistFamily", "DistFit", "FitError", "FamilySummary", "SelectionResult",
    "empirical_quantile", "family_cdf", "family_ppf", "fit_mle", "fit_weibull", "ks_statistic",
    "loglik", "moment_start", "select_distribution", "sqrt_weibull_mean", "sqrt_weibull_params",
    "weibull_cdf", "weibull_mean", "weibull_quantile", "weibull_variance",
]
