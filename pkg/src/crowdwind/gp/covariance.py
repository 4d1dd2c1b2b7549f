"""Matérn(nu=1) space x AR(1) time covariance with a per-site nugget.

Observations are addressed in time-major order: the vector of present values
of a ``(T, n)`` array with a boolean mask, i.e. ``Y[mask]``. Three operator
classes expose the same interface over that ordering:

``SliceCovariance``      independent time slices (IGP); any missingness.
``KroneckerCovariance``  AR(1) x Matérn with complete data, via the joint
                         eigenbasis of the two factors.
``KalmanCovariance``     AR(1) x Matérn with gaps, via a Kalman filter over
                         time with the spatial field as state.

Every operator provides ``logdet``, ``inner(M1, M2) = M1' S^-1 M2`` and
``condition`` (kriging of latent values at new sites). The first two also
provide ``solve``, ``dquad`` and ``dtrace`` for analytic gradients.
"""
from __future__ import annotations

import functools
import math

import numpy as np
from scipy import linalg, special

SQRT8 = math.sqrt(8.0)
JITTER = 1e-10


class CovarianceError(np.linalg.LinAlgError):
    pass


def _bessel_terms(h, phi, order):
    x = SQRT8 / phi * np.asarray(h, dtype=float)
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    if order == 1:
        return np.where(pos, xs * special.k1(xs), 1.0)
    return np.where(pos, xs * xs * special.k0(xs), 0.0)


def matern_nu1(h, phi: float, sigma_z: float):
    """``sigma_z^2 * (kappa h) K_1(kappa h)`` with ``kappa = sqrt(8) / phi``."""
    return sigma_z ** 2 * _bessel_terms(h, phi, 1)


def matern_nu1_dlogphi(h, phi: float, sigma_z: float):
    """Derivative of :func:`matern_nu1` with respect to ``log(phi)``.

    With ``x = kappa h``, ``d[x K_1(x)]/dx = -x K_0(x)`` and ``dx/dlog(phi) = -x``.
    """
    return sigma_z ** 2 * _bessel_terms(h, phi, 0)


@functools.lru_cache(maxsize=16)
def _lags(n_times: int) -> np.ndarray:
    lag = np.abs(np.subtract.outer(np.arange(n_times), np.arange(n_times)))
    lag.setflags(write=False)
    return lag


def ar1_correlation(n_times: int, rho: float) -> np.ndarray:
    return rho ** _lags(n_times)


def ar1_correlation_drho(n_times: int, rho: float) -> np.ndarray:
    lag = _lags(n_times)
    return np.where(lag > 0, lag * rho ** np.maximum(lag - 1, 0), 0.0)


def sym_eigh(M) -> tuple[np.ndarray, np.ndarray]:
    """``scipy.linalg.eigh`` with a divide-and-conquer retry.

    The default MRRR driver occasionally reports an internal error on nearly
    scalar matrices (tightly clustered spectra).
    """
    try:
        return linalg.eigh(M, check_finite=False)
    except linalg.LinAlgError:
        return linalg.eigh(M, check_finite=False, driver="evd")


def ar1_eigh(n_times: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of the AR(1) correlation matrix via its tridiagonal inverse."""
    if n_times == 1:
        return np.ones(1), np.ones((1, 1))
    diag = np.full(n_times, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    w, V = linalg.eigh_tridiagonal(diag, np.full(n_times - 1, -rho))
    return (1.0 - rho * rho) / w, V


def observation_index(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(t_idx, s_idx, pos)`` where ``pos[t, s]`` is the obs position or -1."""
    t_idx, s_idx = np.nonzero(mask)
    pos = np.full(mask.shape, -1, dtype=int)
    pos[t_idx, s_idx] = np.arange(t_idx.size)
    return t_idx, s_idx, pos


def dense_covariance(C: np.ndarray, d: np.ndarray, A: np.ndarray | None, mask: np.ndarray) -> np.ndarray:
    """Brute-force joint covariance of the present observations.

    ``A`` is the temporal correlation (``None`` means independent slices).
    """
    t_idx, s_idx, _ = observation_index(mask)
    At = np.eye(mask.shape[0]) if A is None else A
    S = At[np.ix_(t_idx, t_idx)] * C[np.ix_(s_idx, s_idx)]
    S[np.diag_indices_from(S)] += d[s_idx]
    return S


def dense_condition(C, d, A, mask, resid, Cso, Css, times):
    """Brute-force latent conditioning used as a test oracle.

    Returns ``(mean, var)`` of shape ``(len(times), m)``.
    """
    t_idx, s_idx, _ = observation_index(mask)
    At = np.eye(mask.shape[0]) if A is None else A
    S = dense_covariance(C, d, A, mask)
    L = linalg.cho_factor(S, lower=True)
    m = Cso.shape[0]
    mean = np.empty((len(times), m))
    var = np.empty((len(times), m))
    for a, t in enumerate(times):
        cross = At[t, t_idx][None, :] * Cso[:, s_idx]
        w = linalg.cho_solve(L, cross.T)
        mean[a] = cross @ linalg.cho_solve(L, resid)
        var[a] = np.diag(Css) - np.einsum("ij,ji->i", cross, w)
    return mean, var


def _chol(S: np.ndarray):
    try:
        return linalg.cho_factor(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise CovarianceError("covariance not positive definite") from None


class SliceCovariance:
    """Block-diagonal covariance over time slices; one factorisation per missingness pattern."""

    has_gradient = True

    def __init__(self, C: np.ndarray, d: np.ndarray, mask: np.ndarray, derivs=()):
        self.C, self.d, self.mask = C, np.asarray(d, float), mask
        self.derivs = list(derivs)
        self.n_obs = int(mask.sum())
        _, _, self.pos = observation_index(mask)
        if mask.all():
            patterns, inverse = np.ones((1, mask.shape[1]), bool), np.zeros(mask.shape[0], int)
        else:
            patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
        self.blocks = []
        self._logdet = 0.0
        for p, pattern in enumerate(patterns):
            sites = np.flatnonzero(pattern)
            times = np.flatnonzero(inverse.ravel() == p)
            if sites.size == 0:
                continue
            S = C[np.ix_(sites, sites)].copy()
            S[np.diag_indices_from(S)] += self.d[sites]
            fac = _chol(S)
            rows = self.pos[np.ix_(times, sites)]
            self.blocks.append((sites, times, rows, fac))
            self._logdet += times.size * 2.0 * np.sum(np.log(np.diag(fac[0])))
        self._sinv = {}

    def logdet(self) -> float:
        return self._logdet

    def solve(self, M: np.ndarray) -> np.ndarray:
        M = np.asarray(M, float)
        vec = M.ndim == 1
        M2 = M[:, None] if vec else M
        out = np.empty_like(M2)
        k = M2.shape[1]
        for sites, times, rows, fac in self.blocks:
            blk = M2[rows]  # (nt, ns, k)
            rhs = blk.transpose(1, 0, 2).reshape(sites.size, -1)
            sol = linalg.cho_solve(fac, rhs, check_finite=False)
            out[rows] = sol.reshape(sites.size, times.size, k).transpose(1, 0, 2)
        return out[:, 0] if vec else out

    def inner(self, M1: np.ndarray, M2: np.ndarray) -> np.ndarray:
        return np.asarray(M1).T @ self.solve(M2)

    def _dsigma(self, j, sites):
        dC, dd = self.derivs[j]
        D = np.zeros((sites.size, sites.size)) if dC is None else dC[np.ix_(sites, sites)].copy()
        if dd is not None:
            D[np.diag_indices_from(D)] += dd[sites]
        return D

    def dquad(self, j: int, M1: np.ndarray, M2: np.ndarray) -> np.ndarray:
        """``M1' dS_j M2`` for the j-th registered derivative."""
        M1 = np.asarray(M1, float).reshape(self.n_obs, -1)
        M2 = np.asarray(M2, float).reshape(self.n_obs, -1)
        out = np.zeros((M1.shape[1], M2.shape[1]))
        for sites, times, rows, fac in self.blocks:
            D = self._dsigma(j, sites)
            A1 = M1[rows].transpose(2, 0, 1)  # (k1, nt, ns)
            B2 = (M2[rows].transpose(2, 0, 1) @ D).reshape(M2.shape[1], -1)
            out += A1.reshape(M1.shape[1], -1) @ B2.T
        return out

    def dtrace(self, j: int) -> float:
        """``tr(S^-1 dS_j)``."""
        total = 0.0
        for b, (sites, times, rows, fac) in enumerate(self.blocks):
            if b not in self._sinv:
                self._sinv[b] = linalg.cho_solve(fac, np.eye(sites.size), check_finite=False)
            total += times.size * float(np.sum(self._sinv[b] * self._dsigma(j, sites)))
        return total

    def condition(self, resid, Cso, Css, times):
        """Latent mean and variance at new sites given same-time observations."""
        times = np.asarray(times, int)
        m = Cso.shape[0]
        prior = np.diag(Css).copy()
        mean = np.zeros((times.size, m))
        var = np.tile(prior, (times.size, 1))
        where = {t: a for a, t in enumerate(times)}
        for sites, btimes, rows, fac in self.blocks:
            sel = [(where[t], k) for k, t in enumerate(btimes) if t in where]
            if not sel:
                continue
            out_rows, blk_rows = map(np.asarray, zip(*sel))
            cross = Cso[:, sites]  # (m, ns)
            W = linalg.cho_solve(fac, cross.T, check_finite=False)  # (ns, m)
            r = resid[rows[blk_rows]]  # (nsel, ns)
            mean[out_rows] = r @ W
            var[out_rows] = prior - np.einsum("ij,ji->i", cross, W)
        return mean, np.maximum(var, 0.0)


class KroneckerCovariance:
    """``S = A (x) C + I (x) diag(d)`` for complete data, in time-major order.

    With ``P = diag(d)^-1/2 U`` where ``U L U'`` diagonalises
    ``diag(d)^-1/2 C diag(d)^-1/2`` and ``A = V G V'``,
    ``S^-1 = (V (x) P) diag(1 / (g_k l_i + 1)) (V (x) P)'``.
    """

    has_gradient = True

    def __init__(self, C, d, A, spatial_derivs=(), temporal_derivs=(), temporal_eig=None):
        self.C, self.d, self.A = C, np.asarray(d, float), A
        self.T, self.n = A.shape[0], C.shape[0]
        self.n_obs = self.T * self.n
        if np.any(self.d <= 0):
            raise CovarianceError("covariance not positive definite")
        dm = 1.0 / np.sqrt(self.d)
        lam, U = sym_eigh(dm[:, None] * C * dm[None, :])
        gam, V = sym_eigh(A) if temporal_eig is None else temporal_eig
        if lam.min() < -1e-8 * max(lam.max(), 1.0) or gam.min() < -1e-8 * max(gam.max(), 1.0):
            raise CovarianceError("covariance not positive definite")
        self.lam, self.gam = np.maximum(lam, 0.0), np.maximum(gam, 0.0)
        self.P = dm[:, None] * U
        self.V = V
        self.Minv = 1.0 / (self.gam[:, None] * self.lam[None, :] + 1.0)  # (T, n)
        self.derivs = [("s", dC, dd) for dC, dd in spatial_derivs] + [("t", dA, None) for dA in temporal_derivs]

    def logdet(self) -> float:
        return float(self.T * np.sum(np.log(self.d)) - np.sum(np.log(self.Minv)))

    def _as_cube(self, M):
        M = np.asarray(M, float).reshape(self.T, self.n, -1)
        return M.transpose(2, 0, 1)  # (k, T, n)

    def solve(self, M: np.ndarray) -> np.ndarray:
        M = np.asarray(M, float)
        vec = M.ndim == 1
        k = 1 if vec else M.shape[1]
        X = (self.V.T @ M.reshape(self.T, -1)).reshape(self.T, self.n, k)
        X = np.matmul(self.P.T[None], X)
        X *= self.Minv[:, :, None]
        X = np.matmul(self.P[None], X)
        out = (self.V @ X.reshape(self.T, -1)).reshape(self.n_obs, k)
        return out[:, 0] if vec else out

    def inner(self, M1, M2):
        return np.asarray(M1).T @ self.solve(M2)

    def dquad(self, j, M1, M2):
        kind, dX, dd = self.derivs[j]
        A1, B = self._as_cube(M1), self._as_cube(M2)
        k1, k2 = A1.shape[0], B.shape[0]
        flat = A1.reshape(k1, -1)
        if kind == "s":
            out = np.zeros((k1, k2))
            if dX is not None:
                out += flat @ (self.A @ B @ dX).reshape(k2, -1).T
            if dd is not None:
                out += flat @ (B * dd).reshape(k2, -1).T
            return out
        return flat @ (dX @ B @ self.C).reshape(k2, -1).T

    def dtrace(self, j):
        kind, dX, dd = self.derivs[j]
        if kind == "s":
            diag_c = np.zeros(self.n) if dX is None else np.sum(self.P * (dX @ self.P), axis=0)
            diag_d = np.zeros(self.n) if dd is None else (dd @ self.P ** 2)
            return float(np.sum(self.Minv * (self.gam[:, None] * diag_c[None, :] + diag_d[None, :])))
        diag_a = np.sum(self.V * (dX @ self.V), axis=0)
        return float(diag_a @ self.Minv @ self.lam)

    def condition(self, resid, Cso, Css, times):
        times = np.asarray(times, int)
        alpha = self.solve(resid).reshape(self.T, self.n)
        mean = (self.A @ alpha @ Cso.T)[times]
        B = Cso @ self.P  # (m, n)
        VG = (self.V * self.gam[None, :])[times]  # (nt, T)
        reduction = (VG ** 2) @ self.Minv @ (B ** 2).T  # (nt, m)
        var = np.diag(Css)[None, :] - reduction
        return mean, np.maximum(var, 0.0)


class KalmanCovariance:
    """AR(1) x Matérn with arbitrary missingness via a Kalman filter.

    The state is the latent field at the ``n`` sites with stationary start
    ``N(0, C)`` and transition ``z_t = rho z_{t-1} + sqrt(1 - rho^2) eta_t``.
    Filter gains do not depend on the data, so they are computed once and
    reused to whiten any number of data columns.
    """

    has_gradient = False

    def __init__(self, C, d, rho: float, mask):
        self.C, self.d, self.rho, self.mask = C, np.asarray(d, float), float(rho), mask
        self.T, self.n = mask.shape
        self.n_obs = int(mask.sum())
        _, _, self.pos = observation_index(mask)
        self.steps = []
        self._logdet = 0.0
        q = (1.0 - self.rho ** 2) * C
        P = C.copy()
        for t in range(self.T):
            o = np.flatnonzero(mask[t])
            if o.size:
                F = P[np.ix_(o, o)].copy()
                F[np.diag_indices_from(F)] += self.d[o]
                fac = _chol(F)
                K = linalg.cho_solve(fac, P[o, :], check_finite=False).T  # (n, no)
                P_f = P - K @ P[o, :]
                self._logdet += 2.0 * np.sum(np.log(np.diag(fac[0])))
            else:
                fac, K, P_f = None, None, P
            self.steps.append((o, fac, K))
            P = self.rho ** 2 * P_f + q

    def logdet(self) -> float:
        return self._logdet

    def whiten(self, M: np.ndarray) -> np.ndarray:
        M = np.asarray(M, float).reshape(self.n_obs, -1)
        k = M.shape[1]
        out = np.empty_like(M)
        m = np.zeros((self.n, k))
        for t, (o, fac, K) in enumerate(self.steps):
            if o.size:
                rows = self.pos[t, o]
                e = M[rows] - m[o]
                out[rows] = linalg.solve_triangular(fac[0], e, lower=True, check_finite=False)
                m = m + K @ e
            m = self.rho * m
        return out

    def inner(self, M1, M2):
        M1 = np.asarray(M1, float)
        M2 = np.asarray(M2, float)
        k1 = 1 if M1.ndim == 1 else M1.shape[1]
        W = self.whiten(np.column_stack([M1.reshape(self.n_obs, -1), M2.reshape(self.n_obs, -1)]))
        res = W[:, :k1].T @ W[:, k1:]
        if M1.ndim == 1 and M2.ndim == 1:
            return float(res[0, 0])
        if M1.ndim == 1:
            return res[0]
        if M2.ndim == 1:
            return res[:, 0]
        return res

    def condition(self, resid, Cso, Css, times):
        """RTS smoother with the target sites appended to the state."""
        m = Cso.shape[0]
        n = self.n
        Caug = np.block([[self.C, Cso.T], [Cso, Css]])
        N = n + m
        q = (1.0 - self.rho ** 2) * Caug
        means_f, covs_f, means_p, covs_p = [], [], [], []
        x = np.zeros(N)
        P = Caug.copy()
        for t in range(self.T):
            means_p.append(x)
            covs_p.append(P)
            o = np.flatnonzero(self.mask[t])
            if o.size:
                F = P[np.ix_(o, o)].copy()
                F[np.diag_indices_from(F)] += self.d[o]
                fac = _chol(F)
                K = linalg.cho_solve(fac, P[o, :], check_finite=False).T
                x = x + K @ (resid[self.pos[t, o]] - x[o])
                P = P - K @ P[o, :]
            means_f.append(x)
            covs_f.append(P)
            x = self.rho * x
            P = self.rho ** 2 * P + q
        xs, Ps = means_f[-1], covs_f[-1]
        sm_mean = [None] * self.T
        sm_var = [None] * self.T
        sm_mean[-1], sm_var[-1] = xs, np.diag(Ps)
        for t in range(self.T - 2, -1, -1):
            Pp = covs_p[t + 1]
            # Pp is (nearly) singular when a target sits on a station. The gain
            # only needs Pp on its range; directions at jitter level are dropped
            # rather than amplified.
            G = self.rho * (linalg.pinvh(Pp, rtol=1e-9, check_finite=False) @ covs_f[t]).T
            xs = means_f[t] + G @ (xs - means_p[t + 1])
            Ps = covs_f[t] + G @ (Ps - Pp) @ G.T
            sm_mean[t], sm_var[t] = xs, np.diag(Ps)
        times = np.asarray(times, int)
        mean = np.array([sm_mean[t][n:] for t in times])
        var = np.array([sm_var[t][n:] for t in times])
        return mean, np.maximum(var, 0.0)


def build_covariance(C, d, mask, variant: str, rho: float | None = None, spatial_derivs=(), temporal_derivs=(),
                     prefer_kronecker: bool = True):
    """Pick the operator for ``variant`` (``"igp"`` or ``"ar1"``) and missingness."""
    if variant == "igp":
        return SliceCovariance(C, d, mask, spatial_derivs)
    if variant != "ar1":
        raise ValueError(f"unknown variant {variant!r}")
    if rho is None:
        raise ValueError("AR(1) variant needs rho")
    if prefer_kronecker and mask.all():
        T = mask.shape[0]
        return KroneckerCovariance(C, d, ar1_correlation(T, rho), spatial_derivs, temporal_derivs,
                                   temporal_eig=ar1_eigh(T, rho))
    return KalmanCovariance(C, d, rho, mask)
