"""Likelihood machinery for the mutual influence regression model.

The model is ``Delta_t(lam) Y_t = eps_t`` with
``Delta_t(lam) = I_n - sum_k lam_k W_k^(t)``.  This module provides the
factorized ``Delta_t``, the profiled error variance, the concentrated and
full Gaussian quasi-log-likelihoods, the analytic score and the projection
onto the l1 parameter space.

:class:`ConcentratedObjective` is the shared engine.  It also profiles out
linear regressors and individual effects so the extension models reuse the
same factorization and trace code.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, lapack
from scipy.sparse.linalg import splu

from . import kernels
from .weights import WeightSet

#: Default margin of the l1 parameter space ``sum |lam_k| < 1 - VARSIGMA``.
VARSIGMA = 1e-3
#: Above this n, ``tr(W_k Delta^{-1})`` uses a Hutchinson estimator.
HUTCHINSON_MIN_N = 256
HUTCHINSON_PROBES = 128
HUTCHINSON_SEED = 20240917
#: Reconstruction tolerance for factor checks.
DELTA_ATOL = 1e-10

LOG2PI = math.log(2.0 * math.pi)


class SingularDeltaError(np.linalg.LinAlgError):
    """``Delta_t(lam)`` is numerically singular."""

    def __init__(self, t, lam=None):
        self.t = t
        self.lam = None if lam is None else np.asarray(lam).copy()
        super().__init__(f"Delta_t(lambda) is singular at period {t}")


class DegenerateResponseError(ValueError):
    """The profiled variance is zero, so the log-likelihood is undefined."""


@dataclass(frozen=True)
class Theta:
    """Influence coefficients ``lam`` and error variance ``sigma2``."""

    lam: np.ndarray
    sigma2: float

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float)).copy()
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def d(self):
        return self.lam.shape[0]

    def as_vector(self):
        return np.append(self.lam, self.sigma2)

    def in_lambda_space(self, varsigma=VARSIGMA):
        return float(np.abs(self.lam).sum()) < 1.0 - varsigma


class MirData:
    """Responses ``Y`` of shape ``(T, n)`` with their weight set."""

    def __init__(self, Y, weights):
        if not isinstance(weights, WeightSet):
            weights = WeightSet(np.asarray(weights, dtype=float))
        Y = np.array(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[None, :]
        if Y.ndim != 2:
            raise ValueError(f"Y must have shape (T, n), got {Y.shape}")
        if Y.shape != (weights.T, weights.n):
            raise ValueError(
                f"Y has T={Y.shape[0]}, n={Y.shape[1]} but weights have T={weights.T}, n={weights.n}"
            )
        if weights.d < 1:
            raise ValueError("need at least one weight matrix")
        if not np.all(np.isfinite(Y)):
            raise ValueError("Y contains non-finite values")
        Y.setflags(write=False)
        self.Y = Y
        self.weights = weights

    @property
    def T(self):
        return self.Y.shape[0]

    @property
    def n(self):
        return self.Y.shape[1]

    @property
    def d(self):
        return self.weights.d

    @property
    def nT(self):
        return self.Y.size

    def W(self):
        return self.weights.dense()

    def subset(self, ks):
        return MirData(self.Y, self.weights.subset(ks))

    def scaled(self, c):
        return MirData(c * self.Y, self.weights)

    def permuted(self, perm):
        perm = np.asarray(perm)
        W = self.weights.dense()[:, :, perm][:, :, :, perm]
        return MirData(self.Y[:, perm], WeightSet(W, check=False))


@dataclass(frozen=True)
class DeltaFactor:
    """LU-factorized ``Delta_t(lam)`` for a single period."""

    t: int
    matrix: np.ndarray
    lu: np.ndarray
    piv: np.ndarray
    sign: float
    logdet: float

    def solve(self, v, trans=False):
        """Return ``Delta^{-1} v`` (or ``Delta^{-T} v`` when ``trans``)."""
        x, info = lapack.dgetrs(self.lu, self.piv, np.asarray(v, dtype=float), trans=1 if trans else 0)
        if info != 0:
            raise SingularDeltaError(self.t)
        return x

    def inverse(self):
        return self.solve(np.eye(self.matrix.shape[0]))


# ---------------------------------------------------------------------------
# parameter space
# ---------------------------------------------------------------------------

def project_l1_ball(v, radius):
    """Euclidean projection of ``v`` onto ``{x : ||x||_1 <= radius}``."""
    v = np.asarray(v, dtype=float)
    if radius <= 0:
        return np.zeros_like(v)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, u.size + 1)
    rho = np.nonzero(u * ks > css - radius)[0][-1]
    shift = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - shift, 0.0)


def project_to_lambda_space(lam, varsigma=VARSIGMA):
    """Project onto the l1 ball of radius ``1 - varsigma``."""
    if not 0 <= varsigma < 1:
        raise ValueError(f"varsigma must lie in [0, 1), got {varsigma}")
    return project_l1_ball(lam, 1.0 - varsigma)


def spectral_feasible(weights, lam):
    """True when every ``B_t = sum_k lam_k W_k^(t)`` has max absolute row sum below 1."""
    W = weights.dense() if isinstance(weights, WeightSet) else weights
    B = np.einsum("k,ktij->tij", np.asarray(lam, dtype=float), W)
    return bool(np.all(np.abs(B).sum(axis=2).max(axis=1) < 1.0))


# ---------------------------------------------------------------------------
# shared engine
# ---------------------------------------------------------------------------

def _sparse_logdet(lu):
    diag = lu.U.diagonal()
    if np.any(diag == 0) or not np.all(np.isfinite(diag)):
        return 0.0, -np.inf
    n = diag.size
    sign = np.prod(np.sign(diag))
    sign *= _perm_sign(lu.perm_r) * _perm_sign(lu.perm_c)
    return float(sign), float(np.sum(np.log(np.abs(diag))))


def _perm_sign(p):
    p = np.asarray(p).copy()
    sign = 1.0
    for i in range(p.size):
        while p[i] != i:
            j = p[i]
            p[i], p[j] = p[j], p[i]
            sign = -sign
    return sign


class ConcentratedObjective:
    """Concentrated quasi-log-likelihood in ``lam`` with closed-form nuisances.

    Parameters
    ----------
    Y : ndarray, shape (T, n)
    weights : WeightSet or ndarray (d, T, n, n)
    X : ndarray, shape (T, n, p), optional
        Regressors profiled by least squares at each ``lam``.
    within : bool
        Remove actor-specific means over time (individual effects).
    """

    def __init__(self, Y, weights, X=None, within=False, hutchinson_min_n=HUTCHINSON_MIN_N):
        if isinstance(weights, WeightSet):
            self.weights = weights
        else:
            self.weights = WeightSet(np.asarray(weights, dtype=float), check=False)
        self.Y = np.asarray(Y, dtype=float)
        self.T, self.n = self.Y.shape
        self.d = self.weights.d
        self.N = self.T * self.n
        self.within = bool(within)
        if self.within and self.T < 2:
            raise ValueError("individual effects need T >= 2")
        self.sparse = self.weights.is_sparse
        self.W = None if self.sparse else self.weights.dense()
        self.hutchinson = self.n > hutchinson_min_n
        self.WY = self._apply(self.Y)
        self._setup_regressors(X)

    # -- helpers ------------------------------------------------------------
    def _apply(self, V):
        if not self.sparse:
            return kernels.apply_weights(self.W, V)
        out = np.empty((self.d, self.T, self.n))
        for k in range(self.d):
            for t in range(self.T):
                out[k, t] = self.weights.slice(k, t) @ V[t]
        return out

    def demean(self, V):
        if not self.within:
            return V
        return V - V.mean(axis=0, keepdims=True)

    def _setup_regressors(self, X):
        if X is None:
            self.X = None
            self.p = 0
            return
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        if X.shape[:2] != (self.T, self.n):
            raise ValueError(f"X must have shape (T, n, p) = ({self.T}, {self.n}, p), got {X.shape}")
        self.X = X
        self.p = X.shape[2]
        Xd = self.demean(X)
        gram = np.einsum("tip,tiq->pq", Xd, Xd)
        cond = np.linalg.cond(gram) if self.p else 1.0
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError(f"pooled X'X is singular or ill-conditioned (cond={cond:.3g})")
        self.Xd = Xd
        self.gram = gram
        self._chol = cho_factor(gram)
        self._XY = np.einsum("tip,ti->p", Xd, self.Y)
        self._XWY = np.einsum("tip,kti->kp", Xd, self.WY)

    # -- residuals ----------------------------------------------------------
    def delta_y(self, lam):
        return self.Y - np.einsum("k,kti->ti", lam, self.WY)

    def beta(self, lam):
        if self.X is None:
            return np.zeros(0)
        return cho_solve(self._chol, self._XY - lam @ self._XWY)

    def residuals(self, lam):
        """Profiled residuals ``P(Delta Y - X beta)`` and ``beta``."""
        lam = np.asarray(lam, dtype=float)
        r = self.demean(self.delta_y(lam))
        beta = self.beta(lam)
        if self.p:
            r = r - self.Xd @ beta
        return r, beta

    def sigma2(self, lam):
        r, _ = self.residuals(lam)
        s2 = float(np.einsum("ti,ti->", r, r)) / self.N
        if not s2 > 0:
            raise DegenerateResponseError("profiled sigma^2 is zero; the log-likelihood is undefined")
        return s2

    # -- factorizations -----------------------------------------------------
    def delta_stack(self, lam):
        """Dense ``(T, n, n)`` stack of ``Delta_t(lam)``."""
        lam = np.asarray(lam, dtype=float)
        if not self.sparse:
            return kernels.assemble_delta(lam, self.W)
        out = np.empty((self.T, self.n, self.n))
        for t in range(self.T):
            out[t] = self.delta_sparse(lam, t).toarray()
        return out

    def delta_sparse(self, lam, t):
        D = sparse.identity(self.n, format="csc")
        for k in range(self.d):
            if lam[k] != 0.0:
                D = D - lam[k] * self.weights.slice(k, t)
        return sparse.csc_matrix(D)

    def logdets(self, lam):
        """Per-period determinant signs and log|det Delta_t|."""
        lam = np.asarray(lam, dtype=float)
        if not self.sparse:
            return kernels.lu_logdet(kernels.assemble_delta(lam, self.W))
        sign = np.empty(self.T)
        logdet = np.empty(self.T)
        for t in range(self.T):
            try:
                lu = splu(self.delta_sparse(lam, t))
            except RuntimeError:
                sign[t], logdet[t] = 0.0, -np.inf
                continue
            sign[t], logdet[t] = _sparse_logdet(lu)
        return sign, logdet

    def traces(self, lam):
        """``tr(W_k Delta_t^{-1})`` (d, T) plus determinant signs and logdets."""
        lam = np.asarray(lam, dtype=float)
        if not self.sparse and not self.hutchinson:
            D = kernels.assemble_delta(lam, self.W)
            try:
                inv, sign, logdet = kernels.lu_inverse_logdet(D)
            except kernels.SingularFactorError as exc:
                raise SingularDeltaError(exc.t, lam) from None
            return kernels.weighted_traces(self.W, inv), sign, logdet
        return self._hutchinson_traces(lam)

    def _hutchinson_traces(self, lam):
        rng = np.random.default_rng(HUTCHINSON_SEED)
        probes = rng.choice((-1.0, 1.0), size=(self.n, HUTCHINSON_PROBES))
        tr = np.empty((self.d, self.T))
        sign = np.empty(self.T)
        logdet = np.empty(self.T)
        for t in range(self.T):
            if self.sparse:
                try:
                    lu = splu(self.delta_sparse(lam, t))
                except RuntimeError:
                    raise SingularDeltaError(t, lam) from None
                sign[t], logdet[t] = _sparse_logdet(lu)
                S = lu.solve(probes)
            else:
                D = kernels.assemble_delta(lam, self.W[:, t:t + 1])[0]
                lu, piv, info = lapack.dgetrf(D)
                if info > 0:
                    raise SingularDeltaError(t, lam)
                diag = np.diag(lu)
                sign[t] = (-1.0) ** np.count_nonzero(piv != np.arange(self.n)) * np.prod(np.sign(diag))
                logdet[t] = np.sum(np.log(np.abs(diag)))
                S, _ = lapack.dgetrs(lu, piv, probes)
            for k in range(self.d):
                WS = self.weights.slice(k, t) @ S
                tr[k, t] = np.einsum("ij,ij->", probes, WS) / HUTCHINSON_PROBES
        if not np.all(np.isfinite(logdet)):
            raise SingularDeltaError(int(np.argmin(np.isfinite(logdet))), lam)
        return tr, sign, logdet

    # -- objective ----------------------------------------------------------
    def _constant(self, s2):
        return -0.5 * self.N * (LOG2PI + 1.0 + math.log(s2))

    def value(self, lam, ref_sign=None):
        """``l_c(lam)``; ``-inf`` when singular or when the sign pattern leaves ``ref_sign``."""
        sign, logdet = self.logdets(lam)
        if not np.all(np.isfinite(logdet)) or np.any(sign == 0):
            return -np.inf
        if ref_sign is not None and np.any(sign != ref_sign):
            return -np.inf
        return self._constant(self.sigma2(lam)) + float(np.sum(logdet))

    def value_grad(self, lam):
        """``l_c``, its gradient and the determinant signs."""
        lam = np.asarray(lam, dtype=float)
        tr, sign, logdet = self.traces(lam)
        r, _ = self.residuals(lam)
        s2 = float(np.einsum("ti,ti->", r, r)) / self.N
        if not s2 > 0:
            raise DegenerateResponseError("profiled sigma^2 is zero; the log-likelihood is undefined")
        value = self._constant(s2) + float(np.sum(logdet))
        grad = np.einsum("kti,ti->k", self.WY, r) / s2 - tr.sum(axis=1)
        return value, grad, sign

    def concentrated_information(self, lam):
        """Expected information of ``l_c`` in ``lam`` (scaled by ``N``), for preconditioning."""
        lam = np.asarray(lam, dtype=float)
        D = self.delta_stack(lam)
        G = np.stack([np.matmul(self.W_dense_k(k), np.linalg.inv(D)) for k in range(self.d)])
        uu, _ = kernels.sym_trace_pairs(G)
        tru = np.einsum("ktii->k", G)
        I_ll = 2.0 * uu.sum(axis=0)
        return I_ll - 2.0 * np.outer(tru, tru) / self.N

    def W_dense_k(self, k):
        if not self.sparse:
            return self.W[k]
        return np.stack([self.weights.slice(k, t).toarray() for t in range(self.T)])


# ---------------------------------------------------------------------------
# public functional API
# ---------------------------------------------------------------------------

def _objective(data):
    return ConcentratedObjective(data.Y, data.weights)


def delta(data, lam, t):
    """Factorize ``Delta_t(lam)`` for period ``t``."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (data.d,):
        raise ValueError(f"lambda must have length {data.d}")
    if data.weights.is_sparse:
        M = np.eye(data.n) - sum(lam[k] * data.weights.slice(k, t).toarray() for k in range(data.d))
    else:
        M = np.eye(data.n) - np.einsum("k,kij->ij", lam, data.weights.dense()[:, t])
    lu, piv, info = lapack.dgetrf(M)
    diag = np.diag(lu)
    if info > 0 or np.min(np.abs(diag)) <= np.finfo(float).eps * np.max(np.abs(diag)) * data.n:
        raise SingularDeltaError(t, lam)
    sign = (-1.0) ** np.count_nonzero(piv != np.arange(data.n)) * np.prod(np.sign(diag))
    M.setflags(write=False)
    return DeltaFactor(t, M, lu, piv, float(sign), float(np.sum(np.log(np.abs(diag)))))


def sigma2_profile(data, lam):
    """``(nT)^{-1} sum_t ||Delta_t(lam) Y_t||^2``."""
    return _objective(data).sigma2(np.asarray(lam, dtype=float))


def concentrated_loglik(data, lam):
    """Concentrated quasi-log-likelihood with ``sigma^2`` profiled out."""
    lam = np.asarray(lam, dtype=float)
    obj = _objective(data)
    sign, logdet = obj.logdets(lam)
    if not np.all(np.isfinite(logdet)):
        raise SingularDeltaError(int(np.argmin(np.isfinite(logdet))), lam)
    return obj._constant(obj.sigma2(lam)) + float(np.sum(logdet))


def full_loglik(data, theta):
    """Gaussian quasi-log-likelihood at ``theta``."""
    lam, s2 = theta.lam, theta.sigma2
    obj = _objective(data)
    sign, logdet = obj.logdets(lam)
    if not np.all(np.isfinite(logdet)):
        raise SingularDeltaError(int(np.argmin(np.isfinite(logdet))), lam)
    R = obj.delta_y(lam)
    ss = float(np.einsum("ti,ti->", R, R))
    N = data.nT
    return -0.5 * N * (LOG2PI + math.log(s2)) + float(np.sum(logdet)) - ss / (2.0 * s2)


def score(data, theta):
    """Gradient of :func:`full_loglik` in ``(lam, sigma2)``."""
    lam, s2 = theta.lam, theta.sigma2
    obj = _objective(data)
    tr, _, _ = obj.traces(lam)
    R = obj.delta_y(lam)
    g_lam = np.einsum("kti,ti->k", obj.WY, R) / s2 - tr.sum(axis=1)
    ss = float(np.einsum("ti,ti->", R, R))
    g_s2 = -0.5 * data.nT / s2 + ss / (2.0 * s2 * s2)
    return np.append(g_lam, g_s2)


def weighted_trace(data, lam):
    """``sum_t tr(W_k^(t) Delta_t^{-1}(lam))`` per ``k``."""
    tr, _, _ = _objective(data).traces(np.asarray(lam, dtype=float))
    return tr.sum(axis=1)
