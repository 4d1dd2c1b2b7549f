import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from crowdwind.gp.covariance import (
    CovarianceError,
    KalmanCovariance,
    KroneckerCovariance,
    SliceCovariance,
    ar1_correlation,
    ar1_correlation_drho,
    ar1_eigh,
    build_covariance,
    dense_covariance,
    matern_nu1,
    matern_nu1_dlogphi,
)

from . import oracles


# -- Matérn

def test_matern_at_zero_and_range():
    assert matern_nu1(0.0, 200.0, 0.7) == pytest.approx(0.49, rel=1e-15)
    x = math.sqrt(8)
    ref = x * oracles.bessel_k1(x)
    assert matern_nu1(200.0, 200.0, 1.0) == pytest.approx(ref, rel=1e-12)
    # two independent routes to K_1 agree; the correlation at h = phi is about 0.14
    assert ref == pytest.approx(x * special.k1(x), rel=1e-12)
    assert ref == pytest.approx(0.1396675, abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 2000), st.floats(5, 1000), st.floats(0.05, 3))
def test_matern_matches_integral_representation(h, phi, s):
    assert matern_nu1(h, phi, s) == pytest.approx(oracles.matern1(h, phi, s), rel=1e-10)


def test_matern_monotone():
    h = np.linspace(1e-6, 5 * 200, 100)
    assert np.all(np.diff(matern_nu1(h, 200.0, 0.7)) < 0)


def test_matern_dlogphi_by_differences():
    h = np.array([0.0, 1.0, 50.0, 300.0, 900.0])
    eps = 1e-6
    fd = (matern_nu1(h, 200 * math.exp(eps), 0.8) - matern_nu1(h, 200 * math.exp(-eps), 0.8)) / (2 * eps)
    np.testing.assert_allclose(matern_nu1_dlogphi(h, 200.0, 0.8), fd, rtol=1e-7, atol=1e-12)


# -- AR(1)

@pytest.mark.parametrize("rho", [-0.6, 0.0, 0.3, 0.95])
def test_ar1_eigenpairs(rho):
    w, V = ar1_eigh(7, rho)
    np.testing.assert_allclose((V * w) @ V.T, oracles.ar1_matrix(7, rho), atol=1e-12)
    np.testing.assert_allclose(ar1_correlation(7, rho), oracles.ar1_matrix(7, rho), atol=0)


def test_ar1_drho_by_differences():
    eps = 1e-7
    fd = (ar1_correlation(6, 0.4 + eps) - ar1_correlation(6, 0.4 - eps)) / (2 * eps)
    np.testing.assert_allclose(ar1_correlation_drho(6, 0.4), fd, atol=1e-7)


# -- joint covariance

def _sites(n, seed=0):
    rng = np.random.default_rng(seed)
    lat = 52 + rng.random(n)
    lon = -8 + rng.random(n)
    return lat, lon


def test_one_site_one_time():
    C = np.array([[0.49]])
    S = dense_covariance(C, np.array([0.04]), None, np.ones((1, 1), bool))
    assert S[0, 0] == pytest.approx(0.49 + 0.04)


def test_duplicate_sites_rank_one_block():
    C = matern_nu1(np.zeros((2, 2)), 100.0, 0.7)
    assert np.linalg.matrix_rank(C) == 1
    S = dense_covariance(C, np.array([0.04, 0.09]), None, np.ones((1, 2), bool))
    np.testing.assert_allclose(S, [[0.53, 0.49], [0.49, 0.58]], atol=1e-15)
    op = SliceCovariance(C, np.array([0.04, 0.09]), np.ones((1, 2), bool))
    assert op.logdet() == pytest.approx(np.linalg.slogdet(S)[1], rel=1e-12)


def test_three_by_four_kronecker_entrywise():
    lat, lon = _sites(3)
    D = oracles.dist_matrix(lat, lon, lat, lon)
    C = oracles.matern1_matrix(D, 150.0, 0.7)
    d = np.array([0.04, 0.25, 0.49])
    ref = oracles.joint_covariance(C, d, 4, 0.8)
    S = dense_covariance(matern_nu1(D, 150.0, 0.7), d, ar1_correlation(4, 0.8), np.ones((4, 3), bool))
    np.testing.assert_allclose(S, ref, atol=1e-12, rtol=0)


def test_non_pd_rejected():
    C = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(CovarianceError, match="not positive definite"):
        SliceCovariance(C, np.array([1e-6, 1e-6]), np.ones((2, 2), bool))
    with pytest.raises(CovarianceError, match="not positive definite"):
        KroneckerCovariance(C, np.array([1e-6, 1e-6]), np.eye(2))


# -- operators against dense oracles

@st.composite
def _problems(draw):
    n = draw(st.integers(1, 5))
    T = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 10 ** 6))
    variant = draw(st.sampled_from(["igp", "ar1"]))
    full = draw(st.booleans())
    rng = np.random.default_rng(seed)
    lat, lon = _sites(n, seed)
    phi, sz, rho = rng.uniform(30, 400), rng.uniform(0.3, 1.2), rng.uniform(-0.8, 0.95)
    d = rng.uniform(0.01, 0.5, n)
    mask = np.ones((T, n), bool) if full else rng.random((T, n)) < 0.7
    if not mask.any():
        mask[0, 0] = True
    return lat, lon, phi, sz, rho, d, mask, variant, rng


@settings(max_examples=60, deadline=None)
@given(_problems())
def test_operator_matches_dense_oracle(prob):
    lat, lon, phi, sz, rho, d, mask, variant, rng = prob
    T, n = mask.shape
    D = oracles.dist_matrix(lat, lon, lat, lon)
    C = oracles.matern1_matrix(D, phi, sz)
    S_full = oracles.joint_covariance(C, d, T, rho if variant == "ar1" else None)
    keep = mask.ravel()  # time-major order
    S = S_full[np.ix_(keep, keep)]
    resid = rng.normal(size=keep.sum())
    op = build_covariance(matern_nu1(D, phi, sz), d, mask, variant, rho if variant == "ar1" else None)
    assert op.logdet() == pytest.approx(np.linalg.slogdet(S)[1], rel=1e-9, abs=1e-9)
    M = rng.normal(size=(keep.sum(), 2))
    np.testing.assert_allclose(op.inner(M, resid[:, None]), M.T @ np.linalg.solve(S, resid[:, None]),
                               rtol=1e-8, atol=1e-9)
    # two targets, one of them on top of an observed site
    tlat, tlon = np.r_[lat[0], 52.3], np.r_[lon[0], -7.6]
    Cso = oracles.matern1_matrix(oracles.dist_matrix(tlat, tlon, lat, lon), phi, sz)
    Css = oracles.matern1_matrix(oracles.dist_matrix(tlat, tlon, tlat, tlon), phi, sz)
    A = oracles.ar1_matrix(T, rho) if variant == "ar1" else np.eye(T)
    times = np.arange(T)
    mean, var = op.condition(resid, Cso, Css, times)
    for a, t in enumerate(times):
        cross = np.kron(A[t][None, :], Cso)[:, keep]
        m_ref, v_ref = oracles.condition(S, cross, Css, resid)
        np.testing.assert_allclose(mean[a], m_ref, atol=1e-8)
        np.testing.assert_allclose(var[a], v_ref, atol=1e-8)
        assert np.all(var[a] <= np.diag(Css) + 1e-12)


def test_kalman_and_kronecker_agree_on_complete_data():
    lat, lon = _sites(5, 3)
    D = oracles.dist_matrix(lat, lon, lat, lon)
    C = matern_nu1(D, 180.0, 0.7)
    d = np.full(5, 0.09)
    mask = np.ones((6, 5), bool)
    kron = build_covariance(C, d, mask, "ar1", 0.7)
    kal = build_covariance(C, d, mask, "ar1", 0.7, prefer_kronecker=False)
    assert isinstance(kron, KroneckerCovariance) and isinstance(kal, KalmanCovariance)
    r = np.random.default_rng(0).normal(size=30)
    assert kron.logdet() == pytest.approx(kal.logdet(), rel=1e-12)
    assert kron.inner(r[:, None], r[:, None])[0, 0] == pytest.approx(kal.inner(r[:, None], r[:, None])[0, 0],
                                                                     rel=1e-10)


@pytest.mark.parametrize("kind", ["slice", "kron"])
def test_derivative_terms_by_differences(kind):
    lat, lon = _sites(4, 5)
    D = oracles.dist_matrix(lat, lon, lat, lon)
    T = 3
    mask = np.ones((T, 4), bool)
    if kind == "slice":
        mask[1, 2] = False
    d = np.array([0.04, 0.09, 0.16, 0.25])
    rng = np.random.default_rng(1)
    r = rng.normal(size=mask.sum())

    def make(logphi, rho, derivs=True):
        C = matern_nu1(D, math.exp(logphi), 0.7)
        sp = [(matern_nu1_dlogphi(D, math.exp(logphi), 0.7), None)] if derivs else []
        if kind == "slice":
            return SliceCovariance(C, d, mask, sp)
        tp = [ar1_correlation_drho(T, rho)] if derivs else []
        return KroneckerCovariance(C, d, ar1_correlation(T, rho), sp, tp)

    op = make(math.log(150), 0.6)
    eps = 1e-6

    def q(o):
        return o.inner(r[:, None], r[:, None])[0, 0]

    fd_logdet = (make(math.log(150) + eps, 0.6, False).logdet() - make(math.log(150) - eps, 0.6, False).logdet()) / (2 * eps)
    assert op.dtrace(0) == pytest.approx(fd_logdet, rel=1e-6)
    a = op.solve(r[:, None])
    fd_quad = (q(make(math.log(150) + eps, 0.6, False)) - q(make(math.log(150) - eps, 0.6, False))) / (2 * eps)
    assert -op.dquad(0, a, a)[0, 0] == pytest.approx(fd_quad, rel=1e-6)
    if kind == "kron":
        fd = (make(math.log(150), 0.6 + eps, False).logdet() - make(math.log(150), 0.6 - eps, False).logdet()) / (2 * eps)
        assert op.dtrace(1) == pytest.approx(fd, rel=1e-6)
