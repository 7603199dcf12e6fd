import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirmodel import kernels


def brute_triple_sum(F, h):
    T = F.shape[0]
    total = 0.0
    for t1, t2, t3 in itertools.permutations(range(T), 3):
        total += h[t2] @ F[t1] @ h[t3]
    return total


def _inputs(seed, n=7, T=4, d=3):
    rng = np.random.default_rng(seed)
    W = rng.random((d, T, n, n))
    for k in range(d):
        for t in range(T):
            np.fill_diagonal(W[k, t], 0.0)
    W /= W.sum(axis=3, keepdims=True)
    lam = rng.uniform(-0.3, 0.3, d)
    D = np.eye(n)[None] - np.einsum("k,ktij->tij", lam, W)
    Dinv = np.linalg.inv(D)
    Y = rng.standard_normal((T, n))
    G = np.matmul(W, Dinv[None])
    F = rng.standard_normal((T, d + 1, d + 1))
    h = rng.standard_normal((T, d + 1))
    return {
        "similarity": (rng.standard_normal(n), 0.8),
        "assemble_delta": (lam, W),
        "weighted_traces": (W, Dinv),
        "apply_weights": (W, Y),
        "sym_trace_pairs": (G,),
        "residual_quadratic": (D, Y, 0.7),
        "triple_sum": (F, h),
    }


@pytest.mark.parametrize("name", kernels.KERNELS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backend_parity(name, seed):
    args = _inputs(seed)[name]
    a = kernels.get_kernel(name, "numba")(*args)
    b = kernels.get_kernel(name, "numpy")(*args)
    for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(3, 8), m=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_triple_sum_matches_brute_force(T, m, seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((T, m, m))
    h = rng.standard_normal((T, m))
    ref = brute_triple_sum(F, h)
    for backend in ("numba", "numpy"):
        got = kernels.get_kernel("triple_sum", backend)(F, h)
        assert abs(got - ref) <= 1e-8 * max(1.0, abs(ref))


def test_similarity_oracle():
    z = np.array([0.0, 0.3, 2.0])
    S = kernels.similarity(z, 1.0)
    expected = np.array([
        [0.0, np.exp(-0.09), 0.0],
        [np.exp(-0.09), 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ])
    np.testing.assert_allclose(S, expected, rtol=1e-15)


def test_sym_trace_pairs_oracle(rng):
    G = rng.standard_normal((2, 3, 4, 4))
    uu, dd = kernels.sym_trace_pairs(G)
    for t in range(3):
        for k in range(2):
            for l in range(2):
                Uk = 0.5 * (G[k, t] + G[k, t].T)
                Ul = 0.5 * (G[l, t] + G[l, t].T)
                assert uu[t, k, l] == pytest.approx(np.trace(Uk @ Ul), rel=1e-12)
                assert dd[t, k, l] == pytest.approx(np.diag(G[k, t]) @ np.diag(G[l, t]), rel=1e-12)


def test_lu_inverse_logdet_matches_numpy(rng):
    D = np.eye(6)[None] + 0.3 * rng.standard_normal((4, 6, 6))
    inv, sign, logdet = kernels.lu_inverse_logdet(D)
    ref_sign, ref_logdet = np.linalg.slogdet(D)
    np.testing.assert_allclose(inv, np.linalg.inv(D), atol=1e-10)
    np.testing.assert_array_equal(sign, ref_sign)
    np.testing.assert_allclose(logdet, ref_logdet, rtol=1e-12)


def test_singular_factor_reports_period():
    D = np.stack([np.eye(3), np.zeros((3, 3)), np.eye(3)])
    with pytest.raises(kernels.SingularFactorError) as exc:
        kernels.lu_inverse_logdet(D)
    assert exc.value.t == 1
    sign, logdet = kernels.lu_logdet(D)
    assert sign[1] == 0 and logdet[1] == -np.inf
    assert logdet[0] == 0.0


def test_backend_env_validation(monkeypatch):
    monkeypatch.setenv("MIRMODEL_BACKEND", "fortran")
    with pytest.raises(ValueError):
        kernels._requested_backend()
    monkeypatch.setenv("MIRMODEL_BACKEND", "numpy")
    assert kernels._requested_backend() == "numpy"


_FIT_SCRIPT = """
import json
from mirmodel import kernels
from mirmodel.simlab import SimConfig, gen_setting1
from mirmodel.estimate import fit_qmle
data = gen_setting1(SimConfig(n=20, T=10, d=2, replications=1, base_seed=3), 0)
fit = fit_qmle(data)
print(json.dumps({"backend": kernels.BACKEND, "lam": list(map(float, fit.theta_hat.lam)),
                  "se": list(map(float, fit.std_errors))}))
"""


def test_fit_identical_across_backends():
    import json
    import os
    import subprocess
    import sys

    out = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, MIRMODEL_BACKEND=backend)
        proc = subprocess.run([sys.executable, "-c", _FIT_SCRIPT], env=env,
                              capture_output=True, text=True, check=True)
        out[backend] = json.loads(proc.stdout.strip().splitlines()[-1])
    assert out["numba"]["backend"] == "numba" and out["numpy"]["backend"] == "numpy"
    np.testing.assert_allclose(out["numba"]["lam"], out["numpy"]["lam"], rtol=0, atol=1e-10)
    np.testing.assert_allclose(out["numba"]["se"], out["numpy"]["se"], rtol=1e-8)
