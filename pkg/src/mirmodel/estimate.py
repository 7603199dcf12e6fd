"""Quasi-maximum likelihood estimation and sandwich inference."""

import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .model import (
    VARSIGMA,
    ConcentratedObjective,
    MirData,
    SingularDeltaError,
    Theta,
    project_to_lambda_space,
)
from .optim import GTOL_PER_OBS, FTOL, MAX_ITER, maximize
from .weights import WeightSet

log = logging.getLogger(__name__)

FEASIBILITY_MODES = ("l1", "spectral", "invertible")
#: Bytes budget for a chunk of ``W_k Delta_t^{-1}`` products.
CHUNK_BYTES = 128 * 2**20


@dataclass(frozen=True)
class FitOptions:
    """Optimizer and inference settings.

    ``feasibility`` selects the parameter space: ``"l1"`` is the ball
    ``sum |lam_k| <= 1 - varsigma``; ``"spectral"`` requires the max row-sum
    norm of every ``B_t`` below 1; ``"invertible"`` only requires each
    ``Delta_t`` to stay nonsingular, and multi-starts on both sides of the
    hyperplane ``sum lam_k = 1`` where row-stochastic weights make ``Delta_t``
    singular.
    """

    feasibility: str = "l1"
    varsigma: float = VARSIGMA
    max_iter: int = MAX_ITER
    ftol: float = FTOL
    gtol_per_obs: float = GTOL_PER_OBS
    se: str = "sandwich"
    residual_form: str = "delta"
    start: tuple = None
    scan_max: float = 3.0
    scan_points: int = 40

    def __post_init__(self):
        if self.feasibility not in FEASIBILITY_MODES:
            raise ValueError(f"feasibility must be one of {FEASIBILITY_MODES}")
        if self.se not in ("sandwich", "information"):
            raise ValueError("se must be 'sandwich' or 'information'")
        if self.residual_form not in ("delta", "inverse"):
            raise ValueError("residual_form must be 'delta' or 'inverse'")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, Theta):
        return {"lambda": v.lam.tolist(), "sigma2": v.sigma2}
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass(frozen=True)
class FitResult:
    """Estimates, likelihood and inference for one fit.

    ``params`` stacks every estimated coefficient in the order of
    ``param_names``; ``theta_hat`` holds the ``(lambda, sigma^2)`` part.
    Extension models put their nuisance estimates in ``extra``.
    """

    theta_hat: Theta
    loglik: float
    score_norm_at_opt: float
    I_hat: np.ndarray
    J_hat: np.ndarray
    cov_sandwich: np.ndarray
    std_errors: np.ndarray
    mu4_hat: float
    residuals: np.ndarray
    converged: bool
    iterations: int
    params: np.ndarray = None
    param_names: tuple = ()
    message: str = ""
    feasibility: str = "l1"
    se_kind: str = "sandwich"
    n: int = 0
    T: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def lam(self):
        return self.theta_hat.lam

    @property
    def sigma2(self):
        return self.theta_hat.sigma2

    @property
    def d(self):
        return self.theta_hat.d

    def z_scores(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.std_errors

    def p_values(self):
        from scipy.special import ndtr

        return 2.0 * (1.0 - ndtr(np.abs(self.z_scores())))

    def to_dict(self, include_residuals=False):
        out = {
            "lambda": self.lam,
            "sigma2": self.sigma2,
            "params": self.params,
            "param_names": list(self.param_names),
            "std_errors": self.std_errors,
            "z": self.z_scores(),
            "p_values": self.p_values(),
            "loglik": self.loglik,
            "score_norm_at_opt": self.score_norm_at_opt,
            "mu4_hat": self.mu4_hat,
            "I_hat": self.I_hat,
            "J_hat": self.J_hat,
            "cov_sandwich": self.cov_sandwich,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
            "feasibility": self.feasibility,
            "se_kind": self.se_kind,
            "n": self.n,
            "T": self.T,
            "extra": self.extra,
        }
        if include_residuals:
            out["residuals"] = self.residuals
        return _jsonable(out)

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


# ---------------------------------------------------------------------------
# trace blocks shared by the information matrices and the adequacy test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeriodTraces:
    """Per-period traces of ``G_k = W_k Delta_t^{-1}`` and ``U_k = s(G_k)``.

    ``tru[t, k] = tr(U_tk)``; ``uu[t, k, l] = tr(U_tk U_tl)``;
    ``dd[t, k, l] = sum_i (U_tk)_ii (U_tl)_ii``.
    """

    tru: np.ndarray
    uu: np.ndarray
    dd: np.ndarray


def _dense_period(weights, t0, t1):
    if isinstance(weights, WeightSet):
        if weights.is_sparse:
            return np.stack([np.stack([weights.slice(k, t).toarray() for t in range(t0, t1)])
                             for k in range(weights.d)])
        return weights.dense()[:, t0:t1]
    return weights[:, t0:t1]


def period_traces(weights, lam):
    """Compute :class:`PeriodTraces` at ``lam``, chunked over periods."""
    lam = np.asarray(lam, dtype=float)
    if isinstance(weights, WeightSet):
        d, T, n = weights.d, weights.T, weights.n
    else:
        d, T, n = weights.shape[0], weights.shape[1], weights.shape[2]
    chunk = max(1, int(CHUNK_BYTES // (8 * (d + 2) * n * n)))
    tru = np.empty((T, d))
    uu = np.empty((T, d, d))
    dd = np.empty((T, d, d))
    for t0 in range(0, T, chunk):
        t1 = min(T, t0 + chunk)
        Wc = np.ascontiguousarray(_dense_period(weights, t0, t1))
        D = kernels.assemble_delta(lam, Wc)
        try:
            inv, _, _ = kernels.lu_inverse_logdet(D)
        except kernels.SingularFactorError as exc:
            raise SingularDeltaError(t0 + exc.t, lam) from None
        G = np.matmul(Wc, inv[None])
        uu[t0:t1], dd[t0:t1] = kernels.sym_trace_pairs(G)
        tru[t0:t1] = np.einsum("ktii->tk", G)
    return PeriodTraces(tru, uu, dd)


def _info_from_traces(pt, sigma2, N):
    d = pt.tru.shape[1]
    I = np.zeros((d + 1, d + 1))
    I[:d, :d] = 2.0 * pt.uu.sum(axis=0) / N
    I[:d, d] = I[d, :d] = pt.tru.sum(axis=0) / (N * sigma2)
    I[d, d] = 1.0 / (2.0 * sigma2 * sigma2)
    return I


def _J_from_traces(pt, sigma2, N, mu4):
    d = pt.tru.shape[1]
    J = np.zeros((d + 1, d + 1))
    J[:d, :d] = (2.0 * pt.uu.sum(axis=0) + (mu4 - 3.0) * pt.dd.sum(axis=0)) / N
    J[:d, d] = J[d, :d] = (mu4 - 1.0) * pt.tru.sum(axis=0) / (2.0 * N * sigma2)
    J[d, d] = (mu4 - 1.0) / (4.0 * sigma2 * sigma2)
    return J


def info_I(data, theta):
    """Plug-in information matrix of order ``d + 1``."""
    pt = period_traces(data.weights, theta.lam)
    return _info_from_traces(pt, theta.sigma2, data.nT)


def info_J(data, theta, mu4):
    """Plug-in score covariance of order ``d + 1`` for fourth moment ratio ``mu4``."""
    if mu4 < 1:
        raise ValueError(f"mu4 must be at least 1, got {mu4}")
    pt = period_traces(data.weights, theta.lam)
    return _J_from_traces(pt, theta.sigma2, data.nT, mu4)


def mu4_hat(residuals, sigma2):
    """Fourth-moment ratio ``mean(e^4) / sigma2^2``."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("residuals are empty")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    return float(np.mean(r ** 4) / (sigma2 * sigma2))


def sandwich(I, J, N, kind="sandwich"):
    """``N^{-1} I^{-1} J I^{-1}`` (or ``N^{-1} I^{-1}`` when ``kind='information'``)."""
    Iinv = np.linalg.inv(I)
    cov = Iinv / N if kind == "information" else Iinv @ J @ Iinv / N
    return 0.5 * (cov + cov.T)


def estimate_B(weights, lambda_hat, t):
    """``B_t = sum_k lambda_k W_k^(t)``."""
    lam = np.asarray(lambda_hat, dtype=float)
    if lam.shape != (weights.d,):
        raise ValueError(f"lambda must have length {weights.d}")
    if weights.is_sparse:
        return sum(lam[k] * weights.slice(k, t).toarray() for k in range(weights.d))
    return np.einsum("k,kij->ij", lam, weights.dense()[:, t])


# ---------------------------------------------------------------------------
# optimization over the feasible set
# ---------------------------------------------------------------------------

def _spectral_ok(obj, lam):
    if obj.sparse:
        return all(
            abs(sum(lam[k] * obj.weights.slice(k, t) for k in range(obj.d))).sum(axis=1).max() < 1.0
            for t in range(obj.T)
        )
    B = np.einsum("k,ktij->tij", lam, obj.W)
    return bool(np.all(np.abs(B).sum(axis=2).max(axis=1) < 1.0))


def _preconditioner(obj, lam):
    try:
        H = obj.concentrated_information(lam)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(H)) or np.any(np.linalg.eigvalsh(H) <= 0):
        return None
    return H


def _run(obj, x0, options, project, keep_sign, spectral):
    def value(lam, ref):
        if spectral and not _spectral_ok(obj, lam):
            return -np.inf
        try:
            return obj.value(lam, ref)
        except SingularDeltaError:
            return -np.inf

    gtol = options.gtol_per_obs * obj.N
    return maximize(obj.value_grad, value, x0, project=project, H0=_preconditioner(obj, x0),
                    keep_sign=keep_sign, max_iter=options.max_iter, ftol=options.ftol, gtol=gtol)


def _scan_far_side(obj, options):
    """Best point of ``lam = s * 1/d`` for ``s > 1`` (beyond the singular hyperplane)."""
    u = np.full(obj.d, 1.0 / obj.d)
    best, best_val = None, -np.inf
    for s in np.linspace(1.02, options.scan_max, options.scan_points):
        lam = s * u
        try:
            v = obj.value(lam)
        except SingularDeltaError:
            continue
        if v > best_val:
            best, best_val = lam, v
    return best, best_val


def optimize_lambda(obj, options=None):
    """Maximize the concentrated objective under ``options.feasibility``.

    Returns the :class:`~mirmodel.optim.OptimResult` of the best start.
    """
    options = options or FitOptions()
    x0 = np.zeros(obj.d) if options.start is None else np.asarray(options.start, dtype=float)
    mode = options.feasibility
    if mode == "l1":
        project = lambda v: project_to_lambda_space(v, options.varsigma)  # noqa: E731
        return _run(obj, project(x0), options, project, keep_sign=False, spectral=False)
    if mode == "spectral":
        if not _spectral_ok(obj, x0):
            x0 = np.zeros(obj.d)
        return _run(obj, x0, options, None, keep_sign=False, spectral=True)
    results = [_run(obj, x0, options, None, keep_sign=True, spectral=False)]
    far, far_val = _scan_far_side(obj, options)
    if far is not None and np.isfinite(far_val):
        try:
            results.append(_run(obj, far, options, None, keep_sign=True, spectral=False))
        except (FloatingPointError, SingularDeltaError) as exc:
            log.debug("far-side start failed: %s", exc)
    best = max(results, key=lambda r: r.value)
    best.message = f"{best.message} (best of {len(results)} starts)"
    return best


def fit_qmle(data, options=None):
    """Quasi-maximum likelihood fit of the MIR model.

    Parameters
    ----------
    data : MirData
    options : FitOptions, optional

    Returns
    -------
    FitResult
    """
    options = options or FitOptions()
    obj = ConcentratedObjective(data.Y, data.weights)
    res = optimize_lambda(obj, options)
    lam = res.x
    s2 = obj.sigma2(lam)
    theta = Theta(lam, s2)
    if options.residual_form == "delta":
        resid = obj.delta_y(lam)
    else:
        D = obj.delta_stack(lam)
        resid = np.linalg.solve(D, data.Y[:, :, None])[:, :, 0]
    m4 = mu4_hat(resid, s2)
    pt = period_traces(data.weights, lam)
    I = _info_from_traces(pt, s2, data.nT)
    J = _J_from_traces(pt, s2, data.nT, m4)
    cov = sandwich(I, J, data.nT, options.se)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if not res.converged:
        log.warning("fit did not converge: %s", res.message)
    names = tuple(f"lambda_{k + 1}" for k in range(data.d)) + ("sigma2",)
    return FitResult(
        theta_hat=theta,
        loglik=res.value,
        score_norm_at_opt=res.pg_norm,
        I_hat=I,
        J_hat=J,
        cov_sandwich=cov,
        std_errors=se,
        mu4_hat=m4,
        residuals=resid,
        converged=res.converged,
        iterations=res.iterations,
        params=theta.as_vector(),
        param_names=names,
        message=res.message,
        feasibility=options.feasibility,
        se_kind=options.se,
        n=data.n,
        T=data.T,
    )
