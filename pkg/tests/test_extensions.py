import numpy as np
import pytest

from mirmodel.estimate import fit_qmle, info_I, info_J
from mirmodel.extensions import (
    RankDeficientError,
    collinear_columns,
    extended_information,
    extended_loglik,
    fit_covariates,
    fit_endogenous,
    fit_individual_effects,
    fit_interactions,
    fit_time_effects,
    orthonormal_complement,
    transform_time_effects,
)
from mirmodel.model import ConcentratedObjective, MirData, Theta
from mirmodel.simlab import SimConfig, gen_covariates, gen_effects, gen_setting2

from .conftest import make_data


@pytest.mark.parametrize("n", [2, 3, 7, 20])
def test_orthonormal_complement_identities(n):
    F = orthonormal_complement(n)
    assert F.shape == (n, n - 1)
    np.testing.assert_allclose(F.T @ F, np.eye(n - 1), atol=1e-10)
    np.testing.assert_allclose(F @ F.T, np.eye(n) - np.ones((n, n)) / n, atol=1e-10)
    np.testing.assert_allclose(F.T @ np.ones(n), 0.0, atol=1e-10)


def test_transformed_delta_inverse_identity():
    data = make_data(n=9, T=3, d=2, seed=5)
    lam = np.array([0.3, 0.25])
    _, Ws, _, F = transform_time_effects(data)
    for t in range(data.T):
        D = np.eye(9) - np.einsum("k,kij->ij", lam, data.W()[:, t])
        Ds = np.eye(8) - np.einsum("k,kij->ij", lam, Ws[:, t])
        np.testing.assert_allclose(np.linalg.inv(Ds), F.T @ np.linalg.inv(D) @ F, atol=1e-10)


def test_plain_information_reduces_to_basic_model():
    data = make_data(n=10, T=4, d=2, seed=3)
    lam, s2, mu4 = np.array([0.2, 0.1]), 1.3, 4.2
    obj = ConcentratedObjective(data.Y, data.weights)
    I, J = extended_information(obj, lam, s2, np.zeros(0), np.zeros((4, 10)), 0.7, mu4)
    np.testing.assert_allclose(I, info_I(data, Theta(lam, s2)), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(J, info_J(data, Theta(lam, s2), mu4), rtol=1e-10, atol=1e-14)


def covariate_case(seed=0, n=30, T=20):
    cfg = SimConfig(n=n, T=T, d=2, setting="covariates", p=2, base_seed=seed, replications=1)
    return gen_covariates(cfg, 0)


def test_covariates_profiling_identities():
    data, X = covariate_case()
    fit = fit_covariates(data, X)
    assert fit.converged
    beta = fit.extra["beta"]
    R = data.Y - np.einsum("k,kti->ti", fit.lam, np.einsum("ktij,tj->kti", data.W(), data.Y))
    ols = np.linalg.lstsq(X.reshape(-1, 2), R.ravel(), rcond=None)[0]
    np.testing.assert_allclose(beta, ols, rtol=1e-10)
    obj = ConcentratedObjective(data.Y, data.weights, X=X)
    assert extended_loglik(obj, fit.lam, fit.sigma2, beta) == pytest.approx(fit.loglik, rel=1e-10)
    assert np.all(np.abs(beta - 1.0) < 4 * fit.std_errors[3:])
    assert fit.param_names[-2:] == ("beta_1", "beta_2")


def test_irrelevant_covariates_do_not_lower_likelihood():
    data = make_data(n=20, T=10, d=2, seed=2)
    X = np.random.default_rng(1).standard_normal((10, 20, 2))
    assert fit_covariates(data, X).loglik >= fit_qmle(data).loglik - 1e-8


def test_rank_deficient_covariates_raise():
    data = make_data(n=10, T=4, d=1)
    x = np.random.default_rng(0).standard_normal((4, 10, 1))
    with pytest.raises(RankDeficientError):
        fit_covariates(data, np.concatenate([x, 2 * x], axis=2))


def test_interactions_drop_constant_lag():
    data = make_data(n=15, T=6, d=2, seed=4)
    X = np.ones((6, 15, 1))
    fit = fit_interactions(data, X)
    # W_k 1 = 1 duplicates the intercept
    assert len(fit.extra["dropped"]) == 2
    with pytest.raises(RankDeficientError):
        fit_interactions(data, X, drop_collinear=False)


def test_collinear_columns_detects_duplicates():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 5, 2))
    assert collinear_columns(np.concatenate([a, a[:, :, :1]], axis=2)) in ([0], [2])
    assert collinear_columns(a) == []


def test_individual_effects_recovery():
    cfg = SimConfig(n=20, T=40, d=2, setting="fixed_effects", base_seed=3, replications=1)
    data, omega, _ = gen_effects(cfg, 0)
    fit = fit_individual_effects(data)
    assert fit.converged
    assert np.all(np.abs(fit.lam - 0.2) < 4 * fit.std_errors[:2])
    assert np.mean(np.abs(fit.extra["omega"] - omega)) < 0.3
    assert fit.extra["sigma2_ba"] == pytest.approx(fit.sigma2 * 40 / 39)


def test_time_effects_invariant_to_period_shifts():
    data = make_data(n=15, T=8, d=2, seed=6)
    g = np.random.default_rng(2).standard_normal(8)
    shifted = MirData(data.Y + g[:, None], data.weights)
    a = fit_time_effects(data)
    b = fit_time_effects(shifted)
    np.testing.assert_allclose(a.params, b.params, rtol=1e-8, atol=1e-10)


def test_endogenous_recovers_variance_decomposition():
    cfg = SimConfig(n=30, T=20, d=2, setting="endogenous", base_seed=1, replications=1)
    data, panel = gen_setting2(cfg, 0)
    fit = fit_endogenous(data, panel)
    ex = fit.extra
    Z = np.transpose(panel.values, (1, 2, 0))
    np.testing.assert_allclose(ex["Sigma_z"], np.einsum("tip,tiq->pq", Z, Z) / data.nT)
    assert ex["sigma2"] == pytest.approx(ex["sigma2_z"] + ex["delta"] @ ex["Sigma_z"] @ ex["delta"])
    # population values for rho = 0.5, d = 2: delta = 0.5 / 1.5 each, sigma^2 = 1
    np.testing.assert_allclose(ex["delta"], 1 / 3, atol=0.1)
    assert ex["sigma2"] == pytest.approx(1.0, abs=0.15)
    # array input in either layout gives the same fit
    same = fit_endogenous(data, panel.values)
    np.testing.assert_allclose(same.params, fit.params)
