"""Extensions of the MIR model: covariates, interactions, fixed effects, endogeneity.

Every extension is the concentrated likelihood of a model
``Delta_t(lam) Y_t = X_t beta + omega + eps_t`` with some subset of the
nuisances present, possibly after an orthogonal transform.  The nuisances are
profiled in closed form by :class:`~mirmodel.model.ConcentratedObjective`, so
only ``lam`` is searched numerically.
"""

import logging
import math

import numpy as np
from scipy.linalg import helmert, qr

from .estimate import FitOptions, FitResult, _jsonable, optimize_lambda
from .model import LOG2PI, ConcentratedObjective, MirData, Theta
from .weights import AttributePanel, WeightSet

log = logging.getLogger(__name__)

#: Pooled-Gram condition-number budget for interaction columns.
COLLINEARITY_COND = 1e10


class RankDeficientError(np.linalg.LinAlgError):
    """A pooled design matrix does not have full column rank."""


def _as_covariates(X, T, n):
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3 or X.shape[:2] != (T, n):
        raise ValueError(f"covariates must have shape (T, n, p) = ({T}, {n}, p), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariates contain non-finite values")
    return X


def _check_rank(X, within=False, what="X"):
    Xs = X - X.mean(axis=0, keepdims=True) if within else X
    flat = Xs.reshape(-1, Xs.shape[2])
    if flat.shape[1] == 0:
        return
    s = np.linalg.svd(flat, compute_uv=False)
    if s[-1] <= s[0] * math.sqrt(1.0 / 1e12) or s[-1] == 0:
        raise RankDeficientError(f"pooled {what}'X is singular or ill-conditioned (cond={(s[0] / max(s[-1], 1e-300)) ** 2:.3g})")


# ---------------------------------------------------------------------------
# generic inference for the profiled models
# ---------------------------------------------------------------------------

def _moments(r, sigma2):
    s = math.sqrt(sigma2)
    return float(np.mean(r ** 3) / s ** 3), float(np.mean(r ** 4) / sigma2 ** 2)


def extended_information(obj, lam, sigma2, beta, mu, mu3, mu4):
    """Expected information and score covariance per observation.

    Parameters are ordered ``(lam_1..lam_d, sigma2, beta_1..beta_p)``.
    ``mu`` is the fitted mean ``X beta (+ omega)`` with shape ``(T, n)``.
    ``obj.within`` selects the time-demeaning projector ``P``.
    """
    d, p, T, n, N = obj.d, obj.p, obj.T, obj.n, obj.N
    w = 1.0 / T if obj.within else 0.0
    D = obj.delta_stack(lam)
    Dinv = np.linalg.inv(D)
    W = obj.W if obj.W is not None else np.stack([obj.W_dense_k(k) for k in range(d)])
    G = np.matmul(W, Dinv[None])
    gg = np.einsum("ktij,ltji->kl", G, G)
    ggt = np.einsum("ktij,ltij->kl", G, G)
    S = G.sum(axis=1)
    trSS = np.einsum("kij,lji->kl", S, S)
    trG = np.einsum("ktii->k", G)
    diagG = np.einsum("ktii->kti", G)
    a = np.einsum("ktij,tj->kti", G, mu)
    Pa = a - a.mean(axis=1, keepdims=True) if obj.within else a
    PX = obj.Xd if p else np.zeros((T, n, 0))
    s2 = sigma2
    m = d + 1 + p

    # b vectors and diagonals of the quadratic parts, flattened over (t, i)
    b = np.zeros((m, T * n))
    diag = np.zeros((m, T * n))
    b[:d] = Pa.reshape(d, -1) / s2
    diag[:d] = (1.0 - w) * diagG.reshape(d, -1) / s2
    diag[d] = (1.0 - w) / (2.0 * s2 * s2)
    if p:
        b[d + 1:] = PX.reshape(-1, p).T / s2
    trAA = np.zeros((m, m))
    trAA[:d, :d] = 0.5 * ((1.0 - 2.0 * w) * gg + w * w * trSS + (1.0 - w) * ggt) / s2 ** 2
    trAA[:d, d] = trAA[d, :d] = (1.0 - w) * trG / (2.0 * s2 ** 3)
    trAA[d, d] = N * (1.0 - w) / (4.0 * s2 ** 4)

    s4 = s2 * s2
    s3 = s2 ** 1.5
    J = 2.0 * s4 * trAA + (mu4 - 3.0) * s4 * (diag @ diag.T) + s2 * (b @ b.T)
    cross = b @ diag.T
    J += mu3 * s3 * (cross + cross.T)
    J /= N

    I = np.zeros((m, m))
    I[:d, :d] = (np.einsum("kti,lti->kl", Pa, Pa) / s2 + (1.0 - w) * ggt + gg) / N
    I[:d, d] = I[d, :d] = (1.0 - w) * trG / (s2 * N)
    I[d, d] = (-0.5 + (1.0 - w)) / s4
    if p:
        XtX = np.einsum("tip,tiq->pq", PX, PX)
        I[d + 1:, d + 1:] = XtX / (s2 * N)
        lb = np.einsum("kti,tip->kp", Pa, PX) / (s2 * N)
        I[:d, d + 1:] = lb
        I[d + 1:, :d] = lb.T
    return 0.5 * (I + I.T), 0.5 * (J + J.T)


def _fit_profiled(obj, options, names_beta, se_sigma2=None):
    """Optimize ``lam``, recover nuisances and build the sandwich."""
    options = options or FitOptions()
    res = optimize_lambda(obj, options)
    lam = res.x
    r, beta = obj.residuals(lam)
    s2 = float(np.einsum("ti,ti->", r, r)) / obj.N
    s2_inf = s2 if se_sigma2 is None else se_sigma2(s2)
    mu = np.zeros((obj.T, obj.n))
    omega = None
    if obj.p:
        mu = mu + obj.X @ beta
    if obj.within:
        resid_raw = obj.delta_y(lam) - (obj.X @ beta if obj.p else 0.0)
        omega = resid_raw.mean(axis=0)
        mu = mu + omega[None, :]
    mu3, mu4 = _moments(r, s2)
    I, J = extended_information(obj, lam, s2_inf, beta, mu, mu3, mu4)
    Iinv = np.linalg.inv(I)
    if options.se == "information":
        cov = Iinv / obj.N
    else:
        cov = Iinv @ J @ Iinv / obj.N
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    d = obj.d
    names = tuple(f"lambda_{k + 1}" for k in range(d)) + ("sigma2",) + tuple(names_beta)
    params = np.concatenate([lam, [s2], beta])
    extra = {"beta": beta, "mu3_hat": mu3}
    if omega is not None:
        extra["omega"] = omega
    return FitResult(
        theta_hat=Theta(lam, s2),
        loglik=res.value,
        score_norm_at_opt=res.pg_norm,
        I_hat=I,
        J_hat=J,
        cov_sandwich=cov,
        std_errors=se,
        mu4_hat=mu4,
        residuals=r,
        converged=res.converged,
        iterations=res.iterations,
        params=params,
        param_names=names,
        message=res.message,
        feasibility=options.feasibility,
        se_kind=options.se,
        n=obj.n,
        T=obj.T,
        extra=extra,
    )


def extended_loglik(obj, lam, sigma2, beta=None, omega=None):
    """Full quasi-log-likelihood of the extended model at explicit nuisances."""
    lam = np.asarray(lam, dtype=float)
    sign, logdet = obj.logdets(lam)
    R = obj.delta_y(lam)
    if beta is not None and obj.p:
        R = R - obj.X @ beta
    if omega is not None:
        R = R - omega[None, :]
    ss = float(np.einsum("ti,ti->", R, R))
    return -0.5 * obj.N * (LOG2PI + math.log(sigma2)) + float(np.sum(logdet)) - ss / (2.0 * sigma2)


# ---------------------------------------------------------------------------
# public fits
# ---------------------------------------------------------------------------

def fit_covariates(data, X, options=None):
    """MIR with exogenous covariates: ``Delta_t Y_t = X_t beta + eps_t``."""
    X = _as_covariates(X, data.T, data.n)
    _check_rank(X)
    obj = ConcentratedObjective(data.Y, data.weights, X=X)
    return _fit_profiled(obj, options, [f"beta_{j + 1}" for j in range(X.shape[2])])


def build_interaction_design(weights, X, t):
    """``[X_t, W_1^(t) X_t, ..., W_d^(t) X_t]`` with shape ``(n, p (d + 1))``."""
    X = np.asarray(X, dtype=float)
    Xt = X[t] if X.ndim == 3 else X
    if Xt.ndim == 1:
        Xt = Xt[:, None]
    blocks = [Xt]
    for k in range(weights.d):
        blocks.append(weights.slice(k, t) @ Xt)
    return np.hstack(blocks)


def interaction_names(p, d):
    return [f"beta_{j + 1}_{k}" for k in range(d + 1) for j in range(p)]


def collinear_columns(Xt, cond=COLLINEARITY_COND):
    """Indices of pooled-design columns whose pivoted-QR contribution exceeds ``cond``."""
    flat = Xt.reshape(-1, Xt.shape[2])
    _, R, piv = qr(flat, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return list(range(flat.shape[1]))
    tol = diag[0] / math.sqrt(cond)
    return sorted(int(piv[i]) for i in range(diag.size) if diag[i] <= tol)


def fit_interactions(data, X, options=None, drop_collinear=True):
    """Covariates interacted with every weight matrix.

    Columns that make the pooled Gram matrix ill-conditioned are dropped and
    listed in ``extra["dropped"]``; with ``drop_collinear=False`` they raise
    :class:`RankDeficientError` instead.
    """
    X = _as_covariates(X, data.T, data.n)
    p = X.shape[2]
    Xt = np.stack([build_interaction_design(data.weights, X, t) for t in range(data.T)])
    names = interaction_names(p, data.d)
    bad = collinear_columns(Xt)
    if bad:
        if not drop_collinear:
            raise RankDeficientError(f"interaction design is rank deficient in columns {[names[j] for j in bad]}")
        log.warning("dropping collinear interaction columns %s", [names[j] for j in bad])
    keep = [j for j in range(Xt.shape[2]) if j not in bad]
    obj = ConcentratedObjective(data.Y, data.weights, X=Xt[:, :, keep])
    fit = _fit_profiled(obj, options, [names[j] for j in keep])
    fit.extra["dropped"] = [names[j] for j in bad]
    return fit


def fit_individual_effects(data, X=None, options=None):
    """Actor fixed effects profiled by the within transform.

    ``theta_hat`` holds the raw estimates; ``extra`` carries ``omega``,
    ``sigma2_ba = sigma2 T / (T - 1)`` and the bias-corrected parameter vector.
    """
    if data.T < 2:
        raise ValueError("individual effects are unidentified with T = 1")
    if X is not None:
        X = _as_covariates(X, data.T, data.n)
        _check_rank(X, within=True)
    obj = ConcentratedObjective(data.Y, data.weights, X=X, within=True)
    T = data.T
    p = 0 if X is None else X.shape[2]
    fit = _fit_profiled(obj, options, [f"beta_{j + 1}" for j in range(p)],
                        se_sigma2=lambda s2: s2 * T / (T - 1))
    _add_bias_corrected(fit, T)
    return fit


def _add_bias_corrected(fit, T):
    s2_ba = fit.sigma2 * T / (T - 1)
    params_ba = fit.params.copy()
    params_ba[fit.d] = s2_ba
    fit.extra["sigma2_ba"] = s2_ba
    fit.extra["params_ba"] = params_ba
    fit.extra["theta_ba"] = Theta(fit.lam, s2_ba)


def orthonormal_complement(n):
    """``F`` of shape ``(n, n - 1)`` with ``F^T F = I`` and ``F F^T = I - 11^T / n``."""
    if n < 2:
        raise ValueError("need n >= 2")
    return helmert(n, full=False).T


def _is_row_stochastic(weights, atol=1e-10):
    for k in range(weights.d):
        for t in range(weights.T):
            m = weights.slice(k, t)
            rows = np.asarray(m.sum(axis=1)).ravel()
            if np.max(np.abs(rows - 1.0)) > atol:
                return False
    return True


def transform_time_effects(data, X=None):
    """Project out the common period effect: ``Y* = F^T Y``, ``W* = F^T W F``, ``X* = F^T X``."""
    if not _is_row_stochastic(data.weights):
        raise ValueError("time effects need row-stochastic weights (W 1 = 1)")
    F = orthonormal_complement(data.n)
    W = data.weights.dense()
    Ws = np.einsum("ia,ktij,jb->ktab", F, W, F)
    Ys = data.Y @ F
    Xs = None if X is None else np.einsum("ia,tip->tap", F, X)
    return Ys, Ws, Xs, F


def fit_time_effects(data, X=None, options=None):
    """Actor and period fixed effects via the orthogonal transform plus within step."""
    if data.T < 2:
        raise ValueError("time effects need T >= 2")
    if X is not None:
        X = _as_covariates(X, data.T, data.n)
    Ys, Ws, Xs, _ = transform_time_effects(data, X)
    if Xs is not None:
        _check_rank(Xs, within=True)
    obj = ConcentratedObjective(Ys, WeightSet(Ws, check=False), X=Xs, within=True)
    T = data.T
    p = 0 if X is None else X.shape[2]
    fit = _fit_profiled(obj, options, [f"beta_{j + 1}" for j in range(p)],
                        se_sigma2=lambda s2: s2 * T / (T - 1))
    _add_bias_corrected(fit, T)
    return fit


def _attributes_as_regressors(Z, T, n):
    if isinstance(Z, AttributePanel):
        Z = np.transpose(Z.values.astype(float), (1, 2, 0))
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 3 and Z.shape[:2] != (T, n) and Z.shape[1:] == (T, n):
        Z = np.transpose(Z, (1, 2, 0))
    return _as_covariates(Z, T, n)


def fit_endogenous(data, Z, options=None):
    """Endogeneity-adjusted fit with the attributes as control regressors.

    ``Z`` is an :class:`AttributePanel` or an array of shape ``(T, n, d)``
    (or ``(d, T, n)``).  Recovered quantities in ``extra``: ``delta``,
    ``sigma2_z``, ``Sigma_z``, ``sigma_zeps`` and ``sigma2`` (error variance).
    """
    Zr = _attributes_as_regressors(Z, data.T, data.n)
    try:
        _check_rank(Zr, what="Z")
    except RankDeficientError as exc:
        raise RankDeficientError(f"attributes do not have full column rank: {exc}") from None
    obj = ConcentratedObjective(data.Y, data.weights, X=Zr)
    q = Zr.shape[2]
    fit = _fit_profiled(obj, options, [f"delta_{j + 1}" for j in range(q)])
    delta_hat = fit.extra["beta"]
    Sigma_z = np.einsum("tip,tiq->pq", Zr, Zr) / data.nT
    sigma_ze = Sigma_z @ delta_hat
    s2z = fit.sigma2
    fit.extra.update(
        delta=delta_hat,
        sigma2_z=s2z,
        Sigma_z=Sigma_z,
        sigma_zeps=sigma_ze,
        sigma2=s2z + float(delta_hat @ Sigma_z @ delta_hat),
    )
    return fit
