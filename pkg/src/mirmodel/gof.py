"""Adequacy test for the influence-matrix structure.

The statistic compares each ``Y_t Y_t^T`` with the fitted covariance
``Sigma_t = sigma^2 Delta_t^{-1} Delta_t^{-T}`` through the quadratic loss
``tr(Y_t Y_t^T Sigma_t^{-1} - I)^2``.  Because ``Y_t Y_t^T`` has rank one the
loss reduces to ``q^2 - 2 q + n`` with ``q = Y_t^T Sigma_t^{-1} Y_t``.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from . import kernels
from .estimate import _jsonable, period_traces
from .model import ConcentratedObjective, Theta, delta

log = logging.getLogger(__name__)

#: ``"exact"`` (default) is the null variance of the centred statistic with
#: ``sigma^2`` profiled out: ``T_ql - mu_hat`` equals the degenerate U-statistic
#: ``(nT)^{-1} sum_t sum_{i != j} u_it u_jt`` with ``u = e^2 - 1`` and
#: ``e = eps_hat / sigma_hat``, whose variance is ``2 (mu4 - 1)^2 (n - 1) / (nT)``.
#: ``"lemma"`` and ``"main"`` are three-term plug-in forms; ``"lemma"`` uses
#: ``2 tr(U_k U_l)`` in the triple sum and ``sigma^2`` in the cross term, while
#: ``"main"`` uses ``tr(U_k U_l)`` and ``sigma^4``.  Both nearly cancel when
#: ``sigma^2`` is estimated and can turn negative.
VARIANCE_FORMS = ("exact", "lemma", "main")
REGIME_RATIO = (0.25, 4.0)


class TestPreconditionError(ValueError):
    """The test is undefined for this panel (for instance ``T < 3``)."""

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class GofResult:
    t_ql: float
    mu_hat: float
    sigma_hat: float
    z: float
    p_value: float
    n_over_T: float
    alpha: float = 0.05
    reject: bool = False
    regime_warning: bool = False
    terms: dict = field(default_factory=dict)
    variance_form: str = "exact"

    def to_dict(self):
        return _jsonable(dict(self.__dict__))

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def verdict(self):
        word = "reject" if self.reject else "do not reject"
        return (f"T_ql={self.t_ql:.6g} mu={self.mu_hat:.6g} sigma={self.sigma_hat:.6g} "
                f"z={self.z:.4f} p={self.p_value:.4g}: {word} H0 at alpha={self.alpha:g}")


def _q(data, lam, sigma2):
    obj = ConcentratedObjective(data.Y, data.weights)
    R = obj.delta_y(np.asarray(lam, dtype=float))
    return np.einsum("ti,ti->t", R, R) / sigma2


def test_statistic(data, fit):
    """``(nT)^{-1} sum_t tr(Y_t Y_t^T Sigma_t^{-1} - I_n)^2`` at the fitted parameters."""
    s2 = fit.theta_hat.sigma2
    if not s2 > 0:
        raise TestPreconditionError("sigma^2 estimate is zero")
    q = _q(data, fit.theta_hat.lam, s2)
    return float(np.sum(q * q - 2.0 * q + data.n) / data.nT)


def v_matrix(data, theta, t, k):
    """``Delta_t^{-T} (d Sigma_t^{-1} / d theta_k) Delta_t^{-1}`` (``k = d`` is ``sigma^2``)."""
    d = data.d
    s2 = theta.sigma2
    if k == d:
        return -np.eye(data.n) / (s2 * s2)
    if not 0 <= k < d:
        raise IndexError(f"parameter index {k} outside 0..{d}")
    fac = delta(data, theta.lam, t)
    W = data.weights.slice(k, t)
    W = W.toarray() if hasattr(W, "toarray") else W
    G = fac.solve(W.T, trans=True).T  # W Delta^{-1}
    return -(G + G.T) / s2


def _per_period_blocks(pt, sigma2, n, mu4, c):
    """Per-period ``F_t``, ``v_t`` and ``a_t`` over the full parameter index."""
    T, d = pt.tru.shape
    m = d + 1
    F = np.empty((T, m, m))
    F[:, :d, :d] = c * pt.uu + (mu4 - 3.0) * pt.dd
    cross = (c + mu4 - 3.0) * pt.tru / (2.0 * sigma2)
    F[:, :d, d] = cross
    F[:, d, :d] = cross
    F[:, d, d] = (c + mu4 - 3.0) * n / (4.0 * sigma2 * sigma2)
    v = np.empty((T, m))
    v[:, :d] = -2.0 * pt.tru / sigma2
    v[:, d] = -n / (sigma2 * sigma2)
    a = np.empty((T, m))
    a[:, :d] = pt.tru
    a[:, d] = n / (2.0 * sigma2)
    return F, v, a


def sigma_ql_terms(data, fit, variance_form="exact", lambda_only=False):
    """Variance components of the centred statistic.

    The ``"exact"`` form returns a single ``u_stat`` term; the plug-in forms
    return ``term1``, ``term2`` and ``term3``.
    """
    if variance_form not in VARIANCE_FORMS:
        raise ValueError(f"variance_form must be one of {VARIANCE_FORMS}")
    n, T = data.n, data.T
    if T < 3:
        raise TestPreconditionError(f"the adequacy test needs T >= 3, got T={T}")
    s2 = fit.theta_hat.sigma2
    mu4 = fit.mu4_hat
    if variance_form == "exact":
        return {"u_stat": float(2.0 * (mu4 - 1.0) ** 2 * (n - 1) / (n * T))}
    c, p = (2.0, 1) if variance_form == "lemma" else (1.0, 2)
    pt = period_traces(data.weights, fit.theta_hat.lam)
    F, v, a = _per_period_blocks(pt, s2, n, mu4, c)
    Iinv = np.linalg.inv(fit.I_hat)
    if lambda_only:
        d = data.d
        F, v, a, Iinv = F[:, :d, :d], v[:, :d], a[:, :d], Iinv[:d, :d]
    h = v @ Iinv.T
    term1 = (4.0 * mu4 - 4.0) * n / T
    term2 = 4.0 * s2 * s2 / (n * n * T ** 4) * kernels.triple_sum(F, h)
    pair = a.sum(axis=0) @ Iinv @ v.sum(axis=0) - np.einsum("ti,ij,tj->", a, Iinv, v)
    term3 = (8.0 * mu4 - 8.0) * s2 ** p / (n * T ** 3) * pair
    return {"term1": float(term1), "term2": float(term2), "term3": float(term3)}


def sigma_ql_hat(data, fit, variance_form="exact", lambda_only=False):
    """Plug-in standard deviation of the statistic under the null."""
    terms = sigma_ql_terms(data, fit, variance_form, lambda_only)
    total = sum(terms.values())
    if not total > 0:
        raise FloatingPointError(f"nonpositive variance estimate {total:.6g}; terms {terms}")
    return math.sqrt(total)


def p_value(z):
    """Two-sided normal p-value ``2 (1 - Phi(|z|))``."""
    return float(erfc(abs(z) / math.sqrt(2.0)))


def influence_test(data, fit, alpha=0.05, variance_form="exact", lambda_only=False):
    """Run the adequacy test and assemble a :class:`GofResult`."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    t_ql = test_statistic(data, fit)
    mu = data.n + fit.mu4_hat - 2.0
    sigma = sigma_ql_hat(data, fit, variance_form, lambda_only)
    terms = sigma_ql_terms(data, fit, variance_form, lambda_only)
    if variance_form == "exact":
        # the three plug-in terms are kept for diagnosis only
        plug = sigma_ql_terms(data, fit, "lemma", lambda_only)
        terms.update({f"lemma_{k}": v for k, v in plug.items()})
    z = (t_ql - mu) / sigma
    pv = p_value(z)
    ratio = data.n / data.T
    regime = not (REGIME_RATIO[0] <= ratio <= REGIME_RATIO[1])
    if regime:
        log.warning("n/T = %.3g is outside [%g, %g]; the normal calibration may be poor", ratio, *REGIME_RATIO)
    return GofResult(t_ql, mu, sigma, z, pv, ratio, alpha, pv < alpha, regime, terms, variance_form)
