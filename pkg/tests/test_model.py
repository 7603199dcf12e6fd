import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirmodel.model import (
    ConcentratedObjective,
    MirData,
    SingularDeltaError,
    Theta,
    concentrated_loglik,
    delta,
    full_loglik,
    project_l1_ball,
    project_to_lambda_space,
    score,
    sigma2_profile,
    spectral_feasible,
    weighted_trace,
)
from mirmodel.weights import WeightSet

from .conftest import make_data


def fd_score(data, theta, rel=1e-6):
    x0 = theta.as_vector()
    g = np.empty_like(x0)
    for j in range(x0.size):
        h = rel * max(1.0, abs(x0[j]))
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        fp = full_loglik(data, Theta(xp[:-1], xp[-1]))
        fm = full_loglik(data, Theta(xm[:-1], xm[-1]))
        g[j] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("instance", range(20))
def test_score_matches_finite_differences(instance):
    rng = np.random.default_rng(100 + instance)
    d = int(rng.integers(1, 4))
    data = make_data(n=int(rng.integers(6, 15)), T=int(rng.integers(2, 6)), d=d, seed=instance)
    lam = rng.uniform(-0.8, 0.8, d) / d
    theta = Theta(lam, float(rng.uniform(0.5, 2.0)))
    g = score(data, theta)
    g_fd = fd_score(data, theta)
    assert np.linalg.norm(g - g_fd) <= 1e-5 * np.linalg.norm(g_fd)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(0.2, 0.9))
def test_concentrated_equals_full_at_profiled_sigma(seed, scale):
    data = make_data(n=10, T=4, d=2, seed=seed)
    lam = np.array([0.5, -0.3]) * scale
    s2 = sigma2_profile(data, lam)
    lc = concentrated_loglik(data, lam)
    lf = full_loglik(data, Theta(lam, s2))
    assert abs(lc - lf) <= 1e-9 * max(1.0, abs(lf))


def test_sigma_score_vanishes_at_profile():
    data = make_data(n=10, T=3, d=2)
    lam = np.array([0.1, 0.2])
    g = score(data, Theta(lam, sigma2_profile(data, lam)))
    assert abs(g[-1]) < 1e-9 * data.nT


def test_concentrated_gradient_matches_full_score():
    data = make_data(n=12, T=3, d=2)
    lam = np.array([0.2, 0.1])
    obj = ConcentratedObjective(data.Y, data.weights)
    _, grad, _ = obj.value_grad(lam)
    g = score(data, Theta(lam, sigma2_profile(data, lam)))
    np.testing.assert_allclose(grad, g[:-1], rtol=1e-10)


def test_loglik_at_zero_is_gaussian_iid():
    data = make_data(n=8, T=3, d=1)
    s2 = 1.7
    ref = -0.5 * data.nT * math.log(2 * math.pi * s2) - np.sum(data.Y ** 2) / (2 * s2)
    assert full_loglik(data, Theta([0.0], s2)) == pytest.approx(ref, rel=1e-13)


def test_scale_and_permutation_invariance():
    data = make_data(n=10, T=3, d=2)
    lam = np.array([0.3, 0.2])
    base = concentrated_loglik(data, lam)
    c = 3.0
    # scaling Y by c shifts the concentrated likelihood by -N log c
    assert concentrated_loglik(data.scaled(c), lam) == pytest.approx(base - data.nT * math.log(c), rel=1e-12)
    perm = np.random.default_rng(0).permutation(data.n)
    assert concentrated_loglik(data.permuted(perm), lam) == pytest.approx(base, rel=1e-12)


def test_weighted_trace_oracle():
    data = make_data(n=7, T=2, d=2)
    lam = np.array([0.25, -0.1])
    tr = weighted_trace(data, lam)
    W = data.W()
    ref = [sum(np.trace(W[k, t] @ np.linalg.inv(np.eye(7) - np.einsum("k,kij->ij", lam, W[:, t])))
               for t in range(2)) for k in range(2)]
    np.testing.assert_allclose(tr, ref, rtol=1e-12)


def test_delta_factor_solves():
    data = make_data(n=6, T=2, d=2)
    fac = delta(data, [0.3, 0.3], 1)
    v = np.arange(6.0)
    np.testing.assert_allclose(fac.matrix @ fac.solve(v), v, atol=1e-12)
    np.testing.assert_allclose(fac.matrix.T @ fac.solve(v, trans=True), v, atol=1e-12)
    assert fac.sign * math.exp(fac.logdet) == pytest.approx(np.linalg.det(fac.matrix), rel=1e-12)


def test_singular_delta_raises():
    data = make_data(n=6, T=2, d=1)
    with pytest.raises(SingularDeltaError):
        delta(data, [1.0], 0)  # row-stochastic W: I - W is singular
    with pytest.raises(SingularDeltaError):
        concentrated_loglik(data, [1.0])


def test_mirdata_mismatch_names_dimensions():
    W = make_data(n=5, T=3, d=1).weights
    with pytest.raises(ValueError, match=r"T=2, n=5.*T=3, n=5"):
        MirData(np.zeros((2, 5)), W)


def kkt_projection(v, r):
    """Brute force over supports: x_S = sign(v_S)(|v_S| - tau)."""
    if np.abs(v).sum() <= r:
        return v.copy()
    best, best_dist = None, np.inf
    d = v.size
    for m in range(1, d + 1):
        for S in itertools.combinations(range(d), m):
            S = list(S)
            a = np.abs(v[S])
            tau = (a.sum() - r) / m
            if tau < 0 or np.any(a - tau < 0):
                continue
            x = np.zeros(d)
            x[S] = np.sign(v[S]) * (a - tau)
            dist = np.sum((x - v) ** 2)
            if dist < best_dist:
                best, best_dist = x, dist
    return best


@settings(max_examples=100, deadline=None)
@given(v=st.lists(st.floats(-3, 3), min_size=1, max_size=4), r=st.floats(0.05, 2.0))
def test_l1_projection_matches_kkt_brute_force(v, r):
    v = np.array(v)
    x = project_l1_ball(v, r)
    ref = kkt_projection(v, r)
    assert np.abs(x).sum() <= r + 1e-12
    np.testing.assert_allclose(x, ref, atol=1e-10)


def test_projection_idempotent_and_margin():
    lam = np.array([0.9, -0.5])
    p = project_to_lambda_space(lam, 1e-3)
    assert np.abs(p).sum() == pytest.approx(1 - 1e-3)
    np.testing.assert_allclose(project_to_lambda_space(p, 1e-3), p, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        project_to_lambda_space(lam, 1.0)


def test_spectral_feasible():
    W = make_data(n=6, T=2, d=2).weights
    assert spectral_feasible(W, [0.4, 0.5])
    assert not spectral_feasible(W, [0.6, 0.5])


def test_hutchinson_traces_within_sampling_error():
    from mirmodel.model import HUTCHINSON_PROBES

    data = make_data(n=40, T=2, d=2)
    lam = np.array([0.2, 0.2])
    exact = ConcentratedObjective(data.Y, data.weights).traces(lam)[0]
    approx = ConcentratedObjective(data.Y, data.weights, hutchinson_min_n=10).traces(lam)[0]
    W = data.W()
    for k in range(2):
        for t in range(2):
            A = W[k, t] @ np.linalg.inv(np.eye(40) - np.einsum("k,kij->ij", lam, W[:, t]))
            S = 0.5 * (A + A.T)
            # Rademacher-probe variance: 2 (||S||_F^2 - sum_i S_ii^2) / probes
            sd = math.sqrt(2.0 * (np.sum(S * S) - np.sum(np.diag(S) ** 2)) / HUTCHINSON_PROBES)
            assert abs(approx[k, t] - exact[k, t]) <= 5.0 * sd


def test_theta_validation():
    with pytest.raises(ValueError):
        Theta([0.1], 0.0)
    th = Theta([0.2, 0.3], 1.0)
    assert th.in_lambda_space() and th.d == 2
