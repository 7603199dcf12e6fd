import json

import numpy as np
import pytest

from mirmodel.estimate import (
    FitOptions,
    estimate_B,
    fit_qmle,
    info_I,
    info_J,
    mu4_hat,
    sandwich,
)
from mirmodel.model import MirData, Theta, score
from mirmodel.simlab import draw_errors

from .conftest import make_data


def simulate_Y(weights, lam, rng, dist="normal"):
    D = np.eye(weights.n)[None] - np.einsum("k,ktij->tij", lam, weights.dense())
    eps = draw_errors(rng, dist, (weights.T, weights.n))
    return np.linalg.solve(D, eps[:, :, None])[:, :, 0]


def numerical_hessian(data, theta, h=1e-5):
    x0 = theta.as_vector()
    m = x0.size
    H = np.empty((m, m))
    for j in range(m):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        H[:, j] = (score(data, Theta(xp[:-1], xp[-1])) - score(data, Theta(xm[:-1], xm[-1]))) / (2 * h)
    return 0.5 * (H + H.T)


def test_information_matches_simulated_hessian():
    base = make_data(n=15, T=8, d=2, lam=(0.2, 0.2), seed=3)
    lam = np.array([0.2, 0.2])
    theta = Theta(lam, 1.0)
    rng = np.random.default_rng(7)
    reps = 200
    H = np.zeros((3, 3))
    for _ in range(reps):
        data = MirData(simulate_Y(base.weights, lam, rng), base.weights)
        H += numerical_hessian(data, theta)
    H /= reps * base.nT
    I = info_I(base, theta)
    assert np.max(np.abs(-H - I)) <= 2e-2


@pytest.mark.parametrize("dist", ["normal", "mixture", "std_exponential"])
def test_score_covariance_matches_J(dist):
    base = make_data(n=8, T=3, d=2, lam=(0.2, 0.3), seed=11)
    lam = np.array([0.2, 0.3])
    theta = Theta(lam, 1.0)
    rng = np.random.default_rng(5)
    reps = 4000
    S = np.array([score(MirData(simulate_Y(base.weights, lam, rng, dist), base.weights), theta)
                  for _ in range(reps)])
    emp = np.cov(S.T) / base.nT
    mu4 = {"normal": 3.0, "mixture": 3 * (0.1 * 25 + 0.9 * 25 / 81), "std_exponential": 9.0}[dist]
    J = info_J(base, theta, mu4)
    # Monte Carlo error is a few percent of the diagonal scale
    scale = np.sqrt(np.outer(np.diag(J), np.diag(J)))
    assert np.max(np.abs(emp - J) / scale) < 0.15


def test_J_equals_I_for_normal_errors_on_lambda_block():
    data = make_data(n=10, T=3, d=2)
    theta = Theta([0.1, 0.2], 1.3)
    I = info_I(data, theta)
    J = info_J(data, theta, 3.0)
    np.testing.assert_allclose(J, I, rtol=1e-12)


def test_sandwich_reduces_to_inverse_information():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    np.testing.assert_allclose(sandwich(A, A, 50), np.linalg.inv(A) / 50, rtol=1e-12)
    np.testing.assert_allclose(sandwich(A, 3 * A, 50, "information"), np.linalg.inv(A) / 50)


def test_mu4_hat_and_validation():
    r = np.random.default_rng(0).standard_normal(200_000)
    assert mu4_hat(r, 1.0) == pytest.approx(3.0, rel=0.03)
    with pytest.raises(ValueError):
        info_J(make_data(n=5, T=2, d=1), Theta([0.1], 1.0), 0.5)


def test_fit_recovers_parameters():
    data = make_data(n=40, T=30, d=2, lam=(0.3, 0.2), seed=21, density=0.15)
    fit = fit_qmle(data)
    assert fit.converged
    assert np.all(np.abs(fit.lam - [0.3, 0.2]) < 4 * fit.std_errors[:2])
    assert abs(fit.sigma2 - 1.0) < 4 * fit.std_errors[2]
    assert fit.score_norm_at_opt <= 1e-6 * data.nT
    g = score(data, fit.theta_hat)
    assert np.max(np.abs(g)) <= 1e-3


def test_fit_information_vs_sandwich_options():
    data = make_data(n=20, T=10, d=2, seed=4)
    a = fit_qmle(data, FitOptions(se="information"))
    b = fit_qmle(data)
    np.testing.assert_allclose(a.params, b.params)
    np.testing.assert_allclose(a.cov_sandwich, np.linalg.inv(a.I_hat) / data.nT, rtol=1e-10)


def test_invertible_mode_reaches_far_side():
    lam = (0.2,) * 6
    data = make_data(n=30, T=20, d=6, lam=lam, seed=2, density=5 / 30)
    fit = fit_qmle(data, FitOptions(feasibility="invertible"))
    assert fit.converged
    assert fit.lam.sum() > 1.0
    assert np.max(np.abs(fit.lam - 0.2)) < 0.15
    ball = fit_qmle(data)
    assert np.abs(ball.lam).sum() <= 1.0
    assert fit.loglik > ball.loglik


def test_json_round_trip_reproduces_B(tmp_path):
    data = make_data(n=10, T=4, d=2, seed=9)
    fit = fit_qmle(data)
    payload = json.loads(fit.to_json())
    assert payload["param_names"] == ["lambda_1", "lambda_2", "sigma2"]
    lam = np.array(payload["lambda"])
    for t in range(data.T):
        np.testing.assert_array_equal(estimate_B(data.weights, lam, t), estimate_B(data.weights, fit.lam, t))
    assert len(payload["p_values"]) == 3


def test_lambda_zero_data():
    rng = np.random.default_rng(0)
    base = make_data(n=20, T=10, d=1)
    data = MirData(rng.standard_normal((10, 20)), base.weights)
    fit = fit_qmle(data)
    assert abs(fit.lam[0]) < 4 * fit.std_errors[0]
