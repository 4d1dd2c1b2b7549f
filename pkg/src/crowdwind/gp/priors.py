"""Penalised-complexity priors, each calibrated by a single tail probability.

All log-densities are returned on the internal optimisation coordinate
(``log`` for ranges and sds, ``atanh`` for the AR(1) correlation) and include
the Jacobian of that change of variables.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

from scipy import optimize


@dataclass(frozen=True)
class RangePrior:
    """``P(phi < r0) = alpha`` with ``1/phi ~ Exp(rate)`` (Matérn range, 2-D)."""

    r0: float = 200.0
    alpha: float = 0.3

    @property
    def rate(self) -> float:
        return -self.r0 * math.log(self.alpha)

    def cdf(self, phi: float) -> float:
        return math.exp(-self.rate / phi)

    def pdf(self, phi: float) -> float:
        return self.rate / phi ** 2 * math.exp(-self.rate / phi)

    def median(self) -> float:
        return self.rate / math.log(2.0)

    def logpdf_internal(self, theta: float) -> tuple[float, float]:
        """Log-density of ``log(phi)`` and its derivative."""
        e = self.rate * math.exp(-theta)
        return math.log(self.rate) - theta - e, -1.0 + e


@dataclass(frozen=True)
class SdPrior:
    """``P(sigma > u) = alpha`` with ``sigma ~ Exp(rate)``."""

    u: float
    alpha: float

    @property
    def rate(self) -> float:
        return -math.log(self.alpha) / self.u

    def sf(self, s: float) -> float:
        return math.exp(-self.rate * s)

    def pdf(self, s: float) -> float:
        return self.rate * math.exp(-self.rate * s)

    def median(self) -> float:
        return math.log(2.0) / self.rate

    def logpdf_internal(self, theta: float) -> tuple[float, float]:
        s = math.exp(theta)
        return math.log(self.rate) - self.rate * s + theta, 1.0 - self.rate * s


@dataclass(frozen=True)
class CorrelationPrior:
    """PC prior for an AR(1) correlation with base model ``rho = 1``.

    Density ``theta exp(-theta sqrt(1-rho)) / (2 sqrt(1-rho) (1 - exp(-sqrt(2) theta)))``
    on ``(-1, 1)``, with ``theta`` solved from ``P(rho > u) = alpha``.
    """

    u: float = 0.8
    alpha: float = 0.7

    @functools.cached_property
    def theta(self) -> float:
        target = self.alpha
        r = math.sqrt(1.0 - self.u)

        def f(th):
            return (1.0 - math.exp(-th * r)) / (1.0 - math.exp(-math.sqrt(2.0) * th)) - target

        lo, hi = 1e-8, 1e3
        if f(lo) * f(hi) > 0:
            raise ValueError("correlation prior tail probability not attainable")
        return optimize.brentq(f, lo, hi, xtol=1e-14, rtol=1e-14)

    def sf(self, rho: float) -> float:
        th = self.theta
        return (1.0 - math.exp(-th * math.sqrt(1.0 - rho))) / (1.0 - math.exp(-math.sqrt(2.0) * th))

    def pdf(self, rho: float) -> float:
        th = self.theta
        r = math.sqrt(1.0 - rho)
        return th * math.exp(-th * r) / (2.0 * r * (1.0 - math.exp(-math.sqrt(2.0) * th)))

    def median(self) -> float:
        return optimize.brentq(lambda r: self.sf(r) - 0.5, -1 + 1e-12, 1 - 1e-12)

    def logpdf_internal(self, theta: float) -> tuple[float, float]:
        rho = math.tanh(theta)
        th = self.theta
        one_m = 1.0 - rho
        r = math.sqrt(one_m)
        jac = 1.0 - rho * rho
        val = (math.log(th) - th * r - math.log(2.0) - 0.5 * math.log(one_m)
               - math.log(1.0 - math.exp(-math.sqrt(2.0) * th)) + math.log(jac))
        dval_drho = th / (2.0 * r) + 0.5 / one_m
        return val, jac * dval_drho - 2.0 * rho


@dataclass(frozen=True)
class PriorSet:
    range: RangePrior = RangePrior()
    sigma_z: SdPrior = SdPrior(0.75, 0.5)
    sigma_eps: SdPrior = SdPrior(0.75, 0.1)
    rho: CorrelationPrior = CorrelationPrior()
    sigma_d: SdPrior = SdPrior(1.0, 0.01)


DEFAULT_PRIORS = PriorSet()

__all__ = ["CorrelationPrior", "DEFAULT_PRIORS", "PriorSet", "RangePrior", "SdPrior"]
