"""Latent Gaussian model for hourly wind on the square-root scale.

    y[s, t] = beta0 + beta1 * x1[s] + d[hour(t)] + z[s, t] + eps[s, t]

``z`` is a Matérn(nu=1) field, independent over hours (``igp``) or AR(1) in
time (``ar1``); ``eps`` has a standard deviation shared by a nugget group of
station classes; ``d`` is a sum-to-zero cyclic random walk over the 24 hours.

Hyperparameters are found by MAP under PC priors. The fixed effects are
profiled by generalised least squares and the diurnal levels are integrated
out, so the objective is a closed-form function of the hyperparameters alone.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, optimize

from ..core import StationClass, ValidationError, distance_matrix, haversine_km
from .covariance import (
    JITTER,
    CovarianceError,
    SliceCovariance,
    ar1_correlation_drho,
    build_covariance,
    matern_nu1,
    matern_nu1_dlogphi,
    sym_eigh,
)
from .priors import DEFAULT_PRIORS, PriorSet

VARIANTS = ("igp", "ar1")
TRANSFORMS = ("sqrt", "identity")
LOG_2PI = math.log(2.0 * math.pi)

SIGMA_BOUNDS = (1e-4, 1e2)
RANGE_BOUNDS = (1e-1, 1e5)
RHO_BOUND = 6.0  # atanh scale, |rho| < 0.999988
SIGMA_D_BOUNDS = (1e-6, 1e2)


class FitError(RuntimeError):
    pass


class ConvergenceError(FitError):
    """Optimiser stopped above the gradient tolerance; carries the best point."""

    def __init__(self, message, theta=None, log_posterior=None, grad_norm=None):
        super().__init__(message)
        self.theta = theta
        self.log_posterior = log_posterior
        self.grad_norm = grad_norm


# --------------------------------------------------------------------------- specs and data

@dataclass(frozen=True)
class ModelSpec:
    """What to fit.

    ``nugget`` is ``"grouped"`` (one sd per group; by default one group per
    class, ``groups`` overrides) or ``"pooled"`` (one sd for every station).
    ``classes`` restricts the stations used for fitting (``None`` = all).
    """

    variant: str = "igp"
    nugget: str = "grouped"
    groups: Mapping[StationClass, str] | None = None
    classes: frozenset | None = None
    covariate: bool = True
    diurnal: bool = True
    transform: str = "sqrt"
    name: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.nugget not in ("grouped", "pooled"):
            raise ValidationError(f"unknown nugget option {self.nugget!r}")
        if self.transform not in TRANSFORMS:
            raise ValidationError(f"unknown transform {self.transform!r}")

    def group_of(self, cls: StationClass) -> str:
        if self.nugget == "pooled":
            return "all"
        if self.groups is not None and cls in self.groups:
            return self.groups[cls]
        return cls.value

    def uses(self, cls: StationClass) -> bool:
        return self.classes is None or cls in self.classes

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "nugget": self.nugget,
            "groups": None if self.groups is None else {c.value: g for c, g in self.groups.items()},
            "classes": None if self.classes is None else sorted(c.value for c in self.classes),
            "covariate": self.covariate,
            "diurnal": self.diurnal,
            "transform": self.transform,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        groups = d.get("groups")
        classes = d.get("classes")
        return cls(
            variant=d.get("variant", "igp"),
            nugget=d.get("nugget", "grouped"),
            groups=None if groups is None else {StationClass.parse(k): v for k, v in groups.items()},
            classes=None if classes is None else frozenset(StationClass.parse(c) for c in classes),
            covariate=bool(d.get("covariate", True)),
            diurnal=bool(d.get("diurnal", True)),
            transform=d.get("transform", "sqrt"),
            name=d.get("name", ""),
        )


@dataclass
class GpData:
    """Sites and a ``(T, n)`` array of model-scale values with a presence mask."""

    ids: list[str]
    lat: np.ndarray
    lon: np.ndarray
    classes: list[StationClass]
    y: np.ndarray
    mask: np.ndarray
    hours: np.ndarray
    x1: np.ndarray | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        self.lat = np.asarray(self.lat, float)
        self.lon = np.asarray(self.lon, float)
        self.y = np.asarray(self.y, float)
        self.mask = np.asarray(self.mask, bool)
        self.hours = np.asarray(self.hours, int)
        n = len(self.ids)
        if self.y.shape != self.mask.shape or self.y.ndim != 2 or self.y.shape[1] != n:
            raise ValidationError("values and mask must be (T, n_sites)")
        if self.hours.shape != (self.y.shape[0],) or np.any((self.hours < 1) | (self.hours > 24)):
            raise ValidationError("hours must be a length-T vector in 1..24")
        if self.x1 is not None:
            self.x1 = np.asarray(self.x1, float)
            if self.x1.shape != (n,):
                raise ValidationError("covariate must have one value per site")
        if not np.all(np.isfinite(self.y[self.mask])):
            raise ValidationError("present values must be finite")

    @property
    def n_sites(self) -> int:
        return len(self.ids)

    @property
    def n_times(self) -> int:
        return self.y.shape[0]

    @classmethod
    def from_dataset(cls, dataset, x1=None, transform: str = "sqrt") -> "GpData":
        from ..core import hours_of_day

        vals = np.where(dataset.present, dataset.values, 0.0)
        if transform == "sqrt":
            if np.any(vals < 0):
                raise ValidationError("negative wind speed")
            vals = np.sqrt(vals)
        elif transform != "identity":
            raise ValidationError(f"unknown transform {transform!r}")
        y = np.where(dataset.present, vals, np.nan)
        return cls(
            ids=list(dataset.ids),
            lat=[s.lat for s in dataset.stations],
            lon=[s.lon for s in dataset.stations],
            classes=[s.station_class for s in dataset.stations],
            y=y,
            mask=dataset.present.copy(),
            hours=hours_of_day(dataset.times),
            x1=None if x1 is None else np.asarray(x1, float),
            times=np.asarray(dataset.times),
        )

    def select_sites(self, idx) -> "GpData":
        idx = np.asarray(idx, int)
        return GpData(
            ids=[self.ids[i] for i in idx],
            lat=self.lat[idx],
            lon=self.lon[idx],
            classes=[self.classes[i] for i in idx],
            y=self.y[:, idx],
            mask=self.mask[:, idx],
            hours=self.hours,
            x1=None if self.x1 is None else self.x1[idx],
            times=self.times,
        )

    def drop_site(self, site_id: str) -> "GpData":
        return self.select_sites([i for i, s in enumerate(self.ids) if s != site_id])


# --------------------------------------------------------------------------- results

@dataclass(frozen=True)
class GpHyperParams:
    phi: float
    sigma_z: float
    group_sd: Mapping[str, float]
    class_group: Mapping[StationClass, str]
    rho: float | None = None
    sigma_d: float | None = None

    @property
    def kappa(self) -> float:
        return math.sqrt(8.0) / self.phi

    @property
    def sigma_eps(self) -> dict[StationClass, float]:
        return {c: self.group_sd[g] for c, g in self.class_group.items() if g in self.group_sd}

    def noise_sd(self, cls: StationClass) -> float:
        try:
            return self.group_sd[self.class_group[cls]]
        except KeyError:
            raise KeyError(f"no nugget estimate for class {cls.value}") from None

    def to_dict(self) -> dict:
        return {
            "phi": self.phi,
            "sigma_z": self.sigma_z,
            "group_sd": dict(self.group_sd),
            "class_group": {c.value: g for c, g in self.class_group.items()},
            "rho": self.rho,
            "sigma_d": self.sigma_d,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GpHyperParams":
        return cls(
            phi=float(d["phi"]),
            sigma_z=float(d["sigma_z"]),
            group_sd={k: float(v) for k, v in d["group_sd"].items()},
            class_group={StationClass.parse(k): v for k, v in d["class_group"].items()},
            rho=None if d.get("rho") is None else float(d["rho"]),
            sigma_d=None if d.get("sigma_d") is None else float(d["sigma_d"]),
        )


@dataclass(frozen=True)
class FixedEffects:
    beta0: float
    beta1: float
    d: np.ndarray  # 24 diurnal levels, hour 1..24

    def mean(self, x1, hours) -> np.ndarray:
        """Mean surface ``(len(hours), len(x1))``."""
        x1 = np.asarray(x1, float)
        hours = np.asarray(hours, int)
        return self.beta0 + self.beta1 * x1[None, :] + self.d[hours - 1][:, None]

    def to_dict(self) -> dict:
        return {"beta0": self.beta0, "beta1": self.beta1, "d": [float(v) for v in self.d]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FixedEffects":
        return cls(float(d["beta0"]), float(d["beta1"]), np.asarray(d["d"], float))


@dataclass(frozen=True)
class ModelFit:
    hyper: GpHyperParams
    fixed: FixedEffects
    log_posterior: float
    laplace_cov: np.ndarray | None
    variant: str
    spec: ModelSpec
    theta: np.ndarray
    param_names: tuple[str, ...]
    grad_norm: float = 0.0
    n_evals: int = 0
    covariate_used: bool = True
    hessian: np.ndarray | None = None

    def laplace_interval(self, level: float = 0.95) -> dict[str, tuple[float, float]]:
        """Approximate intervals on the natural scale of each hyperparameter."""
        from scipy import stats

        if self.laplace_cov is None:
            raise FitError("no Laplace covariance was computed")
        zq = stats.norm.ppf(0.5 + level / 2)
        sd = np.sqrt(np.maximum(np.diag(self.laplace_cov), 0.0))
        out = {}
        for name, th, s in zip(self.param_names, self.theta, sd):
            f = np.tanh if name.startswith("atanh") else np.exp
            out[name.split("_", 1)[1]] = (float(f(th - zq * s)), float(f(th + zq * s)))
        return out

    def to_dict(self) -> dict:
        return {
            "hyper": self.hyper.to_dict(),
            "fixed": self.fixed.to_dict(),
            "log_posterior": self.log_posterior,
            "laplace_cov": None if self.laplace_cov is None else self.laplace_cov.tolist(),
            "variant": self.variant,
            "spec": self.spec.to_dict(),
            "theta": [float(v) for v in self.theta],
            "param_names": list(self.param_names),
            "grad_norm": self.grad_norm,
            "n_evals": self.n_evals,
            "covariate_used": self.covariate_used,
            "hessian": None if self.hessian is None else self.hessian.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelFit":
        cov = d.get("laplace_cov")
        return cls(
            hyper=GpHyperParams.from_dict(d["hyper"]),
            fixed=FixedEffects.from_dict(d["fixed"]),
            log_posterior=float(d["log_posterior"]),
            laplace_cov=None if cov is None else np.asarray(cov, float),
            variant=d["variant"],
            spec=ModelSpec.from_dict(d["spec"]),
            theta=np.asarray(d["theta"], float),
            param_names=tuple(d["param_names"]),
            grad_norm=float(d.get("grad_norm", 0.0)),
            n_evals=int(d.get("n_evals", 0)),
            covariate_used=bool(d.get("covariate_used", True)),
            hessian=None if d.get("hessian") is None else np.asarray(d["hessian"], float),
        )


@dataclass(frozen=True)
class Target:
    id: str
    lat: float
    lon: float
    x1: float | None = None
    station_class: StationClass | None = None


@dataclass(frozen=True)
class PredictionResult:
    """Posterior of the latent mean at ``targets`` x ``time_index`` on the model scale."""

    targets: tuple[Target, ...]
    time_index: np.ndarray
    hours: np.ndarray
    mean: np.ndarray  # (T, m); NaN where the target could not be predicted
    sd: np.ndarray
    noise_sd: np.ndarray  # (m,), NaN where the class has no nugget estimate
    transform: str = "sqrt"
    times: np.ndarray | None = None

    @property
    def post_mean_sqrt(self) -> np.ndarray:
        return self.mean

    @property
    def post_sd_sqrt(self) -> np.ndarray:
        return self.sd

    @property
    def mean_ms(self) -> np.ndarray:
        """Back-transformed mean ``E[W] = E[sqrt W]^2 + Var[sqrt W]``."""
        if self.transform == "sqrt":
            return self.mean ** 2 + self.sd ** 2
        return self.mean

    def predictive_sd(self) -> np.ndarray:
        """Latent sd combined with the target's nugget (where known)."""
        nug = np.where(np.isfinite(self.noise_sd), self.noise_sd, 0.0)
        return np.sqrt(self.sd ** 2 + nug[None, :] ** 2)

    def rows(self):
        """Long-format rows ``(target, time_index, time, mean, sd, mean_ms)``."""
        mm = self.mean_ms
        for a, t in enumerate(self.time_index):
            when = None if self.times is None else self.times[a]
            for j, tg in enumerate(self.targets):
                yield tg, int(t), when, float(self.mean[a, j]), float(self.sd[a, j]), float(mm[a, j])


# --------------------------------------------------------------------------- diurnal basis

def cyclic_rw1_structure(n: int = 24) -> np.ndarray:
    D = np.eye(n) - np.roll(np.eye(n), -1, axis=1)
    return D.T @ D


def diurnal_basis(n: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal sum-to-zero basis ``B`` (n x n-1) with ``B' Q B`` diagonal.

    Returns ``(B, eig)`` where ``eig`` are the non-zero eigenvalues of the
    cyclic RW1 structure matrix ``Q``.
    """
    w, V = linalg.eigh(cyclic_rw1_structure(n))
    keep = w > 1e-9
    return V[:, keep], w[keep]


_DIURNAL_B, _DIURNAL_EIG = diurnal_basis()


# --------------------------------------------------------------------------- the objective

def gaussian_loglik(op, resid: np.ndarray) -> float:
    """``log N(resid; 0, S)`` for a covariance operator ``S``."""
    r = np.asarray(resid, float)
    return -0.5 * (r.size * LOG_2PI + op.logdet() + float(op.inner(r, r)))


class _Problem:
    """Observation vector, designs and parameter layout for one data set and spec."""

    def __init__(self, data: GpData, spec: ModelSpec, priors: PriorSet = DEFAULT_PRIORS):
        use = [i for i, c in enumerate(data.classes) if spec.uses(c) and data.mask[:, i].any()]
        if len(use) < 1:
            raise FitError("no stations with observations")
        self.data = data.select_sites(use)
        self.spec, self.priors = spec, priors
        d = self.data
        self.mask = d.mask
        self.T, self.n = d.mask.shape
        self.dist = distance_matrix(d.lat, d.lon)
        labels = [spec.group_of(c) for c in d.classes]
        first = {}
        for c, lab in zip(d.classes, labels):
            first[lab] = min(first.get(lab, 99), _CLASS_ORDER[c])
        self.group_names = tuple(sorted(first, key=first.get))
        self.gidx = np.array([self.group_names.index(g) for g in labels])
        self.class_group = {c: spec.group_of(c) for c in StationClass}
        self.t_idx, self.s_idx = np.nonzero(d.mask)
        self.y = d.y[d.mask]
        self.N = self.y.size

        cols = [np.ones(self.N)]
        self.covariate_used = False
        if spec.covariate:
            if d.x1 is None or not np.all(np.isfinite(d.x1)):
                raise FitError("covariate requested but missing at some stations")
            if np.ptp(d.x1) > 1e-12 * max(1.0, abs(d.x1).max()):
                cols.append(d.x1[self.s_idx])
                self.covariate_used = True
            else:
                warnings.warn("covariate is constant across stations; its coefficient is fixed at 0", stacklevel=3)
        self.F = np.column_stack(cols)
        self.p = self.F.shape[1]
        if spec.diurnal:
            self.Hb = _DIURNAL_B[d.hours[self.t_idx] - 1]
            self.eig = _DIURNAL_EIG
        else:
            self.Hb = np.zeros((self.N, 0))
            self.eig = np.zeros(0)
        self.q = self.Hb.shape[1]
        self.W = np.column_stack([self.y, self.F, self.Hb])

        names = ["log_phi", "log_sigma_z"] + [f"log_sigma_eps[{g}]" for g in self.group_names]
        bounds = [tuple(map(math.log, RANGE_BOUNDS)), tuple(map(math.log, SIGMA_BOUNDS))]
        bounds += [tuple(map(math.log, SIGMA_BOUNDS))] * len(self.group_names)
        if spec.variant == "ar1":
            names.append("atanh_rho")
            bounds.append((-RHO_BOUND, RHO_BOUND))
        if spec.diurnal:
            names.append("log_sigma_d")
            bounds.append(tuple(map(math.log, SIGMA_D_BOUNDS)))
        self.names = tuple(names)
        self.bounds = bounds
        self.n_evals = 0

    # -- parameter packing

    def unpack(self, theta):
        theta = np.asarray(theta, float)
        G = len(self.group_names)
        phi, sz = math.exp(theta[0]), math.exp(theta[1])
        sg = np.exp(theta[2:2 + G])
        k = 2 + G
        rho = sd = None
        if self.spec.variant == "ar1":
            rho = math.tanh(theta[k])
            k += 1
        if self.spec.diurnal:
            sd = math.exp(theta[k])
        return phi, sz, sg, rho, sd

    def pack(self, phi, sz, sg, rho=None, sd=None) -> np.ndarray:
        th = [math.log(phi), math.log(sz)] + [math.log(s) for s in sg]
        if self.spec.variant == "ar1":
            th.append(math.atanh(rho))
        if self.spec.diurnal:
            th.append(math.log(sd))
        return np.array(th)

    def hyper(self, theta) -> GpHyperParams:
        phi, sz, sg, rho, sd = self.unpack(theta)
        return GpHyperParams(phi, sz, dict(zip(self.group_names, map(float, sg))), self.class_group, rho, sd)

    def theta_of(self, hyper: GpHyperParams) -> np.ndarray:
        try:
            sg = [hyper.group_sd[g] for g in self.group_names]
        except KeyError as exc:
            raise ValidationError(f"no nugget sd for group {exc.args[0]}") from None
        if self.spec.variant == "ar1" and hyper.rho is None:
            raise ValidationError("AR(1) variant needs rho")
        sd = hyper.sigma_d if hyper.sigma_d is not None else self.priors.sigma_d.median()
        return self.pack(hyper.phi, hyper.sigma_z, sg, hyper.rho, sd)

    def start(self, mult: float = 1.0) -> np.ndarray:
        pr = self.priors
        G = len(self.group_names)
        return self.pack(
            pr.range.median() * mult,
            pr.sigma_z.median() * mult,
            [pr.sigma_eps.median() * mult] * G,
            pr.rho.median(),
            pr.sigma_d.median() * mult,
        )

    def clip(self, theta) -> np.ndarray:
        lo, hi = np.array(self.bounds).T
        return np.clip(theta, lo, hi)

    # -- covariance

    def spatial(self, phi, sz):
        C = matern_nu1(self.dist, phi, sz)
        C[np.diag_indices_from(C)] += JITTER * sz * sz
        return C

    def operator(self, theta, with_derivs: bool = True, prefer_kronecker: bool = True):
        phi, sz, sg, rho, _ = self.unpack(theta)
        C = self.spatial(phi, sz)
        d = sg[self.gidx] ** 2
        sp, tp = [], []
        if with_derivs:
            sp.append((matern_nu1_dlogphi(self.dist, phi, sz), None))
            sp.append((2.0 * C, None))
            for g in range(len(self.group_names)):
                sp.append((None, 2.0 * d * (self.gidx == g)))
            if rho is not None:
                tp.append((1.0 - rho * rho) * ar1_correlation_drho(self.T, rho))
        return build_covariance(C, d, self.mask, self.spec.variant, rho, sp, tp, prefer_kronecker)

    # -- objective

    def log_prior(self, theta) -> tuple[float, np.ndarray]:
        pr = self.priors
        val, grad = 0.0, np.zeros(len(theta))
        terms = [pr.range, pr.sigma_z] + [pr.sigma_eps] * len(self.group_names)
        if self.spec.variant == "ar1":
            terms.append(pr.rho)
        if self.spec.diurnal:
            terms.append(pr.sigma_d)
        for k, (prior, th) in enumerate(zip(terms, theta)):
            v, g = prior.logpdf_internal(float(th))
            val += v
            grad[k] = g
        return val, grad

    def evaluate(self, theta, gradient: bool = True, prefer_kronecker: bool = True):
        """``(log_lik, grad_or_None, gamma)``; ``gamma`` stacks beta then diurnal coefficients."""
        self.n_evals += 1
        theta = np.asarray(theta, float)
        op = self.operator(theta, with_derivs=gradient, prefer_kronecker=prefer_kronecker)
        analytic = gradient and op.has_gradient
        if analytic:
            Z = op.solve(self.W)
            inner = self.W.T @ Z
        else:
            inner = op.inner(self.W, self.W)
        inner = 0.5 * (inner + inner.T)
        p, q = self.p, self.q
        _, _, _, _, sd = self.unpack(theta)
        Mmat = inner[1:, 1:].copy()
        if q:
            Pd = self.eig / sd ** 2
            Mmat[p:, p:] += np.diag(Pd)
        try:
            cf = linalg.cho_factor(Mmat, lower=True)
        except linalg.LinAlgError:
            raise FitError("fixed-effect design is singular") from None
        b = inner[1:, 0]
        gamma = linalg.cho_solve(cf, b)
        quad = inner[0, 0] - b @ gamma
        ll = -0.5 * (self.N * LOG_2PI + op.logdet() + quad)
        if q:
            Kf = linalg.cho_factor(Mmat[p:, p:], lower=True)
            logdetK = 2.0 * np.sum(np.log(np.diag(Kf[0])))
            logdetP = float(np.sum(np.log(Pd)))
            ll -= 0.5 * (logdetK - logdetP)
        if not gradient:
            return ll, None, gamma
        if not analytic:
            return ll, self._fd_gradient(theta, prefer_kronecker), gamma

        alpha = Z[:, 0] - Z[:, 1:] @ gamma
        Zh = Z[:, 1 + p:]
        nd = len(op.derivs)
        grad = np.zeros(len(theta))
        Kinv = linalg.cho_solve(Kf, np.eye(q)) if q else None
        for j in range(nd):
            g = -0.5 * op.dtrace(j) + 0.5 * float(op.dquad(j, alpha, alpha)[0, 0])
            if q:
                g += 0.5 * float(np.sum(Kinv * op.dquad(j, Zh, Zh)))
            grad[j] = g
        if q:
            ga = gamma[p:]
            grad[-1] = float(ga @ (Pd * ga)) + float(np.sum(np.diag(Kinv) * Pd)) - q
        return ll, grad, gamma

    def _fd_gradient(self, theta, prefer_kronecker, h: float = 1e-5):
        g = np.zeros(len(theta))
        for k in range(len(theta)):
            e = np.zeros(len(theta))
            e[k] = h
            fp = self.evaluate(theta + e, False, prefer_kronecker)[0]
            fm = self.evaluate(theta - e, False, prefer_kronecker)[0]
            g[k] = (fp - fm) / (2 * h)
        return g

    def log_posterior(self, theta, gradient: bool = True):
        ll, g, gamma = self.evaluate(theta, gradient)
        lp, gp = self.log_prior(theta)
        return ll + lp, (None if g is None else g + gp), gamma

    def fixed_effects(self, gamma) -> FixedEffects:
        beta0 = float(gamma[0])
        beta1 = float(gamma[1]) if self.covariate_used else 0.0
        if self.q:
            d = _DIURNAL_B @ gamma[self.p:]
            d = d - d.mean()
        else:
            d = np.zeros(24)
        return FixedEffects(beta0, beta1, d)


_CLASS_ORDER = {c: k for k, c in enumerate(StationClass)}


# --------------------------------------------------------------------------- public objective

def log_posterior(hyper: GpHyperParams, data: GpData, spec: ModelSpec, priors: PriorSet = DEFAULT_PRIORS) -> float:
    """Log posterior density of ``hyper`` (internal coordinates), fixed effects profiled."""
    _check_hyper(hyper, spec)
    prob = _Problem(data, spec, priors)
    return float(prob.log_posterior(prob.theta_of(hyper), gradient=False)[0])


def log_posterior_and_gradient(theta, data: GpData, spec: ModelSpec, priors: PriorSet = DEFAULT_PRIORS):
    prob = _Problem(data, spec, priors)
    val, grad, _ = prob.log_posterior(theta)
    return float(val), grad


def _check_hyper(hyper: GpHyperParams, spec: ModelSpec) -> None:
    bad = [hyper.phi, hyper.sigma_z, *hyper.group_sd.values()]
    if any(not (np.isfinite(v) and v > 0) for v in bad):
        raise ValidationError("hyperparameters out of domain: ranges and sds must be positive")
    if spec.variant == "ar1" and (hyper.rho is None or not -1 < hyper.rho < 1):
        raise ValidationError("hyperparameters out of domain: rho must lie in (-1, 1)")
    if spec.diurnal and hyper.sigma_d is not None and hyper.sigma_d <= 0:
        raise ValidationError("hyperparameters out of domain: sigma_d must be positive")


# --------------------------------------------------------------------------- fitting

def _projected_gradient(theta, grad, bounds) -> np.ndarray:
    """Gradient of the objective being minimised, zeroed where a bound is active."""
    lo, hi = np.array(bounds).T
    pg = grad.copy()
    pg[(theta <= lo + 1e-10) & (grad > 0)] = 0.0
    pg[(theta >= hi - 1e-10) & (grad < 0)] = 0.0
    return pg


def _fd_hessian(fun_grad, theta, h: float = 1e-4) -> np.ndarray:
    k = len(theta)
    H = np.zeros((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (fun_grad(theta + e) - fun_grad(theta - e)) / (2 * h)
    return 0.5 * (H + H.T)


def _newton(fg, prob: _Problem, x, H, gtol: float, max_steps: int, refresh: bool):
    """Projected Newton steps with a fixed curvature matrix ``H``.

    Near the mode ``f`` is flat to rounding, so a step is kept when it lowers
    ``f`` or, at equal ``f``, shrinks the projected gradient. With ``refresh``
    the curvature is recomputed once by finite differences when a step fails.
    """
    f, g = fg(x)
    pg = _projected_gradient(x, g, prob.bounds)
    for _ in range(max_steps):
        gnorm = float(np.max(np.abs(pg)))
        if gnorm <= gtol:
            break
        if H is None:
            H = _fd_hessian(lambda z: fg(z)[1], x)
        free = pg != 0
        w, V = sym_eigh(H[np.ix_(free, free)])
        step = np.zeros_like(x)
        step[free] = -V @ ((V.T @ g[free]) / np.maximum(np.abs(w), 1e-8))
        slack = 1e-12 * max(1.0, abs(f))
        t, accepted = 1.0, False
        for _ in range(12):
            xn = prob.clip(x + t * step)
            fn, gn = fg(xn)
            pgn = _projected_gradient(xn, gn, prob.bounds)
            if fn < f - slack or (fn <= f + slack and np.max(np.abs(pgn)) < gnorm):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if refresh:
                H, refresh = None, False
                continue
            break
        x, f, g, pg = xn, fn, gn, pgn
    return x, f, g, float(np.max(np.abs(pg)))


def _minimise(prob: _Problem, x0, maxiter: int, gtol: float, hessian=None):
    best = {"f": np.inf, "x": None}

    def fg(x):
        try:
            val, grad, _ = prob.log_posterior(x)
        except (np.linalg.LinAlgError, FitError):
            return 1e300, np.zeros_like(x)
        f, g = -val, -grad
        if f < best["f"]:
            best.update(f=f, x=x.copy())
        return f, g

    x0 = prob.clip(np.asarray(x0, float))
    if hessian is not None:
        out = _newton(fg, prob, x0, np.asarray(hessian, float), gtol, 15, refresh=False)
        if out[3] <= gtol:
            return out
    res = optimize.minimize(fg, best["x"] if best["x"] is not None else x0, jac=True, method="L-BFGS-B",
                            bounds=prob.bounds,
                            options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-15, "maxcor": 20})
    x = best["x"] if best["x"] is not None else res.x
    return _newton(fg, prob, x, None, gtol, 20, refresh=True)


def fit(
    data: GpData,
    spec: ModelSpec = ModelSpec(),
    priors: PriorSet = DEFAULT_PRIORS,
    init: np.ndarray | GpHyperParams | None = None,
    laplace: bool = True,
    maxiter: int = 500,
    gtol: float = 1e-5,
    multipliers: Sequence[float] = (0.5, 1.0, 2.0),
    init_hessian: np.ndarray | None = None,
) -> ModelFit:
    """MAP hyperparameters with profiled fixed effects and a Laplace covariance.

    Starts from the prior medians scaled by each of ``multipliers`` (or from
    ``init`` alone when given) and keeps the best optimum. ``init_hessian``
    (curvature of the negative log posterior near ``init``, e.g. from a fit
    to similar data) lets a warm start begin with Newton steps. Raises
    :class:`ConvergenceError` if the projected gradient stays above ``gtol``.
    """
    if data.n_sites < 2 or data.n_times < 2:
        raise FitError("need at least 2 sites and 2 times")
    prob = _Problem(data, spec, priors)
    if prob.n < 2:
        raise FitError("need at least 2 stations with observations")
    if init is not None:
        starts = [prob.theta_of(init) if isinstance(init, GpHyperParams) else np.asarray(init, float)]
    else:
        starts = [prob.start(m) for m in multipliers]
    best = None
    for x0 in starts:
        x, f, g, gn = _minimise(prob, x0, maxiter, gtol, init_hessian if init is not None else None)
        if best is None or f < best[1] - 1e-9 or (abs(f - best[1]) <= 1e-9 and gn < best[3]):
            best = (x, f, g, gn)
    x, f, g, gn = best
    if not np.isfinite(f) or f >= 1e299:
        raise ConvergenceError("no feasible starting point", x, None, gn)
    if gn > gtol:
        raise ConvergenceError(
            f"optimiser did not reach gradient tolerance {gtol:g} (best {gn:.3g})", x, -f, gn)
    _, _, gamma = prob.log_posterior(x, gradient=False)
    cov = H = None
    if laplace:
        H = _fd_hessian(lambda z: -prob.log_posterior(z)[1], x)
        cov = _psd_inverse(H)
    return ModelFit(
        hyper=prob.hyper(x),
        fixed=prob.fixed_effects(gamma),
        log_posterior=-f,
        laplace_cov=cov,
        variant=spec.variant,
        spec=spec,
        theta=x,
        hessian=H,
        param_names=prob.names,
        grad_norm=gn,
        n_evals=prob.n_evals,
        covariate_used=prob.covariate_used,
    )


def _psd_inverse(H: np.ndarray) -> np.ndarray:
    w, V = sym_eigh(0.5 * (H + H.T))
    if np.any(w <= 0):
        warnings.warn("Hessian is not positive definite at the mode; clipping eigenvalues", stacklevel=3)
    w = np.maximum(np.abs(w), 1e-10)
    cov = (V / w) @ V.T
    return 0.5 * (cov + cov.T)


# --------------------------------------------------------------------------- prediction

def _targets_from_sites(data: GpData) -> list[Target]:
    return [Target(i, la, lo, None if data.x1 is None else float(data.x1[k]), c)
            for k, (i, la, lo, c) in enumerate(zip(data.ids, data.lat, data.lon, data.classes))]


def predict(fit: ModelFit, data: GpData, targets: Sequence[Target] | None = None, times=None,
            priors: PriorSet = DEFAULT_PRIORS, allow_missing_covariate: bool = False) -> PredictionResult:
    """Conditional latent mean and sd at ``targets`` for the time indices ``times``.

    ``data`` must be the data the model was fitted on (or a subset for
    cross-validation). Targets need ``x1`` when the model uses the covariate;
    with ``allow_missing_covariate`` such targets come back as NaN instead.
    """
    prob = _Problem(data, fit.spec, priors)
    targets = list(_targets_from_sites(data) if targets is None else targets)
    times = np.arange(data.n_times) if times is None else np.asarray(times, int)
    if times.size and (times.min() < 0 or times.max() >= data.n_times):
        raise ValidationError("time index outside the observed axis")
    x1 = np.array([np.nan if t.x1 is None else t.x1 for t in targets], float)
    ok = np.ones(len(targets), bool)
    if fit.covariate_used:
        ok = np.isfinite(x1)
        if not ok.all() and not allow_missing_covariate:
            raise ValidationError("target covariate missing")
    x1 = np.where(ok & np.isfinite(x1), x1, 0.0)
    h = fit.hyper
    tlat = np.array([t.lat for t in targets], float)
    tlon = np.array([t.lon for t in targets], float)
    Cso = matern_nu1(haversine_km(tlat[:, None], tlon[:, None], prob.data.lat[None, :], prob.data.lon[None, :]),
                     h.phi, h.sigma_z)
    Css = matern_nu1(distance_matrix(tlat, tlon), h.phi, h.sigma_z)
    op = prob.operator(prob.theta_of(fit.hyper), with_derivs=False)
    mu_obs = fit.fixed.mean(prob.data.x1 if fit.covariate_used else np.zeros(prob.n), prob.data.hours)
    resid = prob.y - mu_obs[prob.mask]
    mean, var = op.condition(resid, Cso, Css, times)
    mean = mean + fit.fixed.mean(x1, data.hours[times])
    sd = np.sqrt(var)
    mean[:, ~ok] = np.nan
    sd[:, ~ok] = np.nan
    noise = np.array([_noise_or_nan(h, t.station_class) for t in targets])
    return PredictionResult(
        targets=tuple(targets),
        time_index=times,
        hours=data.hours[times],
        mean=mean,
        sd=sd,
        noise_sd=noise,
        transform=fit.spec.transform,
        times=None if data.times is None else np.asarray(data.times)[times],
    )


def _noise_or_nan(h: GpHyperParams, cls) -> float:
    if cls is None:
        return float("nan")
    try:
        return h.noise_sd(cls)
    except KeyError:
        return float("nan")


def predict_grid(fit: ModelFit, data: GpData, lat, lon, x1=None, times=None,
                 priors: PriorSet = DEFAULT_PRIORS) -> PredictionResult:
    """Predict at grid nodes; nodes with a missing covariate are returned as NaN."""
    lat = np.asarray(lat, float).ravel()
    lon = np.asarray(lon, float).ravel()
    if x1 is None:
        x1 = np.full(lat.size, np.nan)
    x1 = np.asarray(x1, float).ravel()
    targets = [Target(f"node{k}", la, lo, None if not np.isfinite(v) else float(v))
               for k, (la, lo, v) in enumerate(zip(lat, lon, x1))]
    return predict(fit, data, targets, times, priors, allow_missing_covariate=True)


def kriging_weights(target_lat, target_lon, site_lat, site_lon, phi: float, sigma_z: float, nugget_sd) -> np.ndarray:
    """Weights ``w`` with posterior mean ``mu + w (y - mu)`` for one time slice."""
    site_lat = np.asarray(site_lat, float)
    site_lon = np.asarray(site_lon, float)
    C = matern_nu1(distance_matrix(site_lat, site_lon), phi, sigma_z)
    C[np.diag_indices_from(C)] += JITTER * sigma_z ** 2 + np.asarray(nugget_sd, float) ** 2
    cross = matern_nu1(haversine_km(np.atleast_1d(target_lat)[:, None], np.atleast_1d(target_lon)[:, None],
                                    site_lat[None, :], site_lon[None, :]), phi, sigma_z)
    return linalg.solve(C, cross.T, assume_a="pos").T


__all__ = [
    "ConvergenceError", "FitError", "FixedEffects", "GpData", "GpHyperParams", "ModelFit", "ModelSpec",
    "PredictionResult", "SliceCovariance", "Target", "cyclic_rw1_structure", "diurnal_basis", "fit",
    "gaussian_loglik", "kriging_weights", "log_posterior", "log_posterior_and_gradient", "predict",
    "predict_grid",
]
