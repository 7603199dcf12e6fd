"""Projected quasi-Newton maximization with a feasibility-aware line search."""

from dataclasses import dataclass

import numpy as np

#: Relative objective-change tolerance.
FTOL = 1e-9
#: Projected-gradient tolerance per observation (multiplied by nT by callers).
GTOL_PER_OBS = 1e-6
MAX_ITER = 500
ARMIJO_C = 1e-4
MAX_BACKTRACK = 50


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    sign: np.ndarray
    iterations: int
    converged: bool
    message: str
    pg_norm: float


def _identity(x):
    return x


def projected_gradient_norm(x, g, project):
    return float(np.linalg.norm(x - project(x + g)))


def maximize(value_grad, value, x0, project=None, H0=None, keep_sign=False,
             max_iter=MAX_ITER, ftol=FTOL, gtol=1e-6):
    """Maximize a smooth function over a convex set by projected BFGS.

    Parameters
    ----------
    value_grad : callable
        ``x -> (f, g, sign)``; ``sign`` is the per-period determinant sign.
    value : callable
        ``(x, ref_sign) -> f``, returning ``-inf`` at infeasible points or
        when ``ref_sign`` is given and the sign pattern differs.
    x0 : ndarray
        Start point, projected first.
    project : callable, optional
        Euclidean projection onto the feasible set.
    H0 : ndarray, optional
        Positive definite curvature estimate (negative Hessian) at ``x0``.
    keep_sign : bool
        Reject steps that change the determinant sign pattern of the start.
    """
    project = project or _identity
    x = project(np.asarray(x0, dtype=float))
    f, g, sign = value_grad(x)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the start point")
    ref = sign.copy() if keep_sign else None
    m = x.size
    if H0 is not None:
        try:
            Hinv0 = np.linalg.inv(0.5 * (H0 + H0.T))
            if np.any(np.linalg.eigvalsh(Hinv0) <= 0):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            Hinv0 = np.eye(m) / max(np.linalg.norm(g), 1.0)
    else:
        Hinv0 = np.eye(m) / max(np.linalg.norm(g), 1.0)
    Hinv = Hinv0.copy()
    message = "maximum iterations reached"
    converged = False
    pg = projected_gradient_norm(x, g, project)
    it = 0
    for it in range(1, max_iter + 1):
        if pg <= gtol:
            converged, message = True, "projected gradient below tolerance"
            it -= 1
            break
        p = Hinv @ g
        if g @ p <= 0:
            Hinv = Hinv0.copy()
            p = Hinv @ g
        alpha = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACK):
            x_new = project(x + alpha * p)
            step = x_new - x
            if not np.any(step):
                break
            f_new = value(x_new, ref)
            if np.isfinite(f_new) and f_new >= f + ARMIJO_C * (g @ step):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = pg <= 10 * gtol
            message = "line search failed"
            break
        f_new, g_new, sign_new = value_grad(x_new)
        s = x_new - x
        y = g - g_new
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(m) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        df = abs(f_new - f)
        x, f, g, sign = x_new, f_new, g_new, sign_new
        pg = projected_gradient_norm(x, g, project)
        if df <= ftol * (1.0 + abs(f)):
            converged, message = True, "objective change below tolerance"
            break
    return OptimResult(x, float(f), g, sign, it, converged, message, pg)
