import math

import numpy as np
import pytest

from mirmodel.estimate import fit_qmle
from mirmodel.gof import (
    GofResult,
    TestPreconditionError,
    influence_test,
    p_value,
    sigma_ql_terms,
    test_statistic as gof_statistic,
    v_matrix,
)
from mirmodel.model import ConcentratedObjective, Theta, delta

from .conftest import make_data


def sigma_t(data, theta, t):
    fac = delta(data, theta.lam, t)
    Dinv = np.linalg.inv(fac.matrix)
    return theta.sigma2 * Dinv @ Dinv.T


def test_rank_one_trace_identity_matches_dense():
    data = make_data(n=9, T=4, d=2, seed=2)
    fit = fit_qmle(data)
    total = 0.0
    for t in range(data.T):
        y = data.Y[t][:, None]
        M = y @ y.T @ np.linalg.inv(sigma_t(data, fit.theta_hat, t)) - np.eye(data.n)
        total += np.trace(M @ M)
    assert gof_statistic(data, fit) == pytest.approx(total / data.nT, rel=1e-8)


def test_centred_statistic_is_u_statistic():
    data = make_data(n=12, T=6, d=2, seed=8)
    fit = fit_qmle(data)
    obj = ConcentratedObjective(data.Y, data.weights)
    e = obj.delta_y(fit.lam) / math.sqrt(fit.sigma2)
    u = e ** 2 - 1
    off = (u.sum(axis=1) ** 2 - (u ** 2).sum(axis=1)).sum() / data.nT
    res = influence_test(data, fit)
    assert res.t_ql - res.mu_hat == pytest.approx(off, abs=1e-10)


def test_exact_variance_value():
    data = make_data(n=10, T=5, d=1, seed=1)
    fit = fit_qmle(data)
    terms = sigma_ql_terms(data, fit)
    assert terms == {"u_stat": pytest.approx(2 * (fit.mu4_hat - 1) ** 2 * 9 / 50)}
    lemma = sigma_ql_terms(data, fit, "lemma")
    assert set(lemma) == {"term1", "term2", "term3"}
    assert lemma["term1"] == pytest.approx((4 * fit.mu4_hat - 4) * 10 / 5)


def test_v_matrix_matches_finite_difference():
    data = make_data(n=6, T=3, d=2, seed=4)
    theta = Theta([0.2, 0.1], 1.4)
    h = 1e-6
    for k in range(3):
        x = theta.as_vector()
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        dS = (np.linalg.inv(sigma_t(data, Theta(xp[:2], xp[2]), 1))
              - np.linalg.inv(sigma_t(data, Theta(xm[:2], xm[2]), 1))) / (2 * h)
        Dinv = np.linalg.inv(delta(data, theta.lam, 1).matrix)
        np.testing.assert_allclose(v_matrix(data, theta, 1, k), Dinv.T @ dS @ Dinv, atol=1e-6)


def test_short_panel_raises():
    data = make_data(n=8, T=2, d=1)
    fit = fit_qmle(data)
    with pytest.raises(TestPreconditionError):
        influence_test(data, fit)


def test_p_value_and_result_fields():
    assert p_value(0.0) == pytest.approx(1.0)
    assert p_value(1.959963984540054) == pytest.approx(0.05, rel=1e-10)
    data = make_data(n=20, T=20, d=2, seed=3)
    fit = fit_qmle(data)
    res = influence_test(data, fit, alpha=0.1)
    assert isinstance(res, GofResult)
    assert res.alpha == 0.1 and res.reject == (res.p_value < 0.1)
    assert res.mu_hat == pytest.approx(data.n + fit.mu4_hat - 2)
    assert not res.regime_warning
    assert "lemma_term1" in res.terms
    assert '"alpha": 0.1' in res.to_json()
    with pytest.raises(ValueError):
        influence_test(data, fit, alpha=1.5)


def test_regime_warning():
    data = make_data(n=30, T=5, d=1, seed=3)
    res = influence_test(data, fit_qmle(data))
    assert res.regime_warning


def test_null_calibration_small_study():
    zs = []
    for seed in range(60):
        data = make_data(n=20, T=20, d=1, seed=seed)
        zs.append(influence_test(data, fit_qmle(data)).z)
    zs = np.array(zs)
    assert abs(zs.mean()) < 0.5 and 0.6 < zs.std() < 1.4
