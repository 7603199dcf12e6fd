"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from the ``MIRMODEL_BACKEND``
environment variable (``"numba"`` or ``"numpy"``).  When unset, numba is used
if it can be imported.  Both paths return identical results up to floating
point summation order; every public kernel is listed in ``KERNELS`` so the
benchmark and the parity tests can reach both implementations directly.
"""

import os

import numpy as np
from scipy.linalg import lapack

try:
    import numba
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _requested_backend():
    name = os.environ.get("MIRMODEL_BACKEND", "").strip().lower()
    if name in ("", "auto"):
        return "numba" if _HAVE_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"MIRMODEL_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ImportError("MIRMODEL_BACKEND=numba but numba is not importable")
    return name


BACKEND = _requested_backend()


class SingularFactorError(np.linalg.LinAlgError):
    """LU factorization hit an exactly singular period."""

    def __init__(self, t):
        self.t = t
        super().__init__(f"singular factor at period {t}")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _similarity_numpy(z, phi):
    diff = z[:, None] - z[None, :]
    dist = np.abs(diff)
    A = np.where(dist < phi, np.exp(-diff * diff), 0.0)
    np.fill_diagonal(A, 0.0)
    return A


def _assemble_delta_numpy(lam, W):
    n = W.shape[-1]
    return np.eye(n) - np.einsum("k,ktij->tij", lam, W)


def _weighted_traces_numpy(W, Dinv):
    # tr(W_k Dinv_t) = sum_ij W_k[i, j] * Dinv_t[j, i]
    return np.einsum("ktij,tji->kt", W, Dinv)


def _apply_weights_numpy(W, Y):
    return np.einsum("ktij,tj->kti", W, Y)


def _sym_trace_pairs_numpy(G):
    # tr(s(G_k) s(G_l)) per period and sum_i G_k[i,i] G_l[i,i] per period
    d, T, n, _ = G.shape
    gg = np.einsum("ktij,ltji->tkl", G, G)
    ggt = np.einsum("ktij,ltij->tkl", G, G)
    diag = np.einsum("ktii->kti", G)
    dd = np.einsum("kti,lti->tkl", diag, diag)
    return 0.5 * (gg + ggt), dd


def _residual_quadratic_numpy(Dl, Y, sigma2):
    R = np.einsum("tij,tj->ti", Dl, Y)
    return np.einsum("ti,ti->t", R, R) / sigma2


def _triple_sum_numpy(F, h):
    # sum over pairwise-distinct (t1, t2, t3) of h[t2]^T F[t1] h[t3]
    H = h.sum(axis=0)
    Q = np.einsum("ti,tj->ij", h, h)
    rest = H[None, :] - h
    first = np.einsum("ti,tij,tj->t", rest, F, rest)
    own = np.einsum("ti,tij,tj->t", h, F, h)
    second = np.einsum("tij,ij->t", F, Q) - own
    return float(np.sum(first - second))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _similarity_numba(z, phi):
        n = z.shape[0]
        A = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                diff = z[i] - z[j]
                if abs(diff) < phi:
                    v = np.exp(-diff * diff)
                    A[i, j] = v
                    A[j, i] = v
        return A

    @njit(cache=True)
    def _assemble_delta_numba(lam, W):
        d, T, n, _ = W.shape
        out = np.zeros((T, n, n))
        for t in range(T):
            for i in range(n):
                out[t, i, i] = 1.0
            for k in range(d):
                lk = lam[k]
                if lk == 0.0:
                    continue
                for i in range(n):
                    for j in range(n):
                        w = W[k, t, i, j]
                        if w != 0.0:
                            out[t, i, j] -= lk * w
        return out

    @njit(cache=True)
    def _weighted_traces_numba(W, Dinv):
        d, T, n, _ = W.shape
        out = np.zeros((d, T))
        for k in range(d):
            for t in range(T):
                acc = 0.0
                for i in range(n):
                    for j in range(n):
                        w = W[k, t, i, j]
                        if w != 0.0:
                            acc += w * Dinv[t, j, i]
                out[k, t] = acc
        return out

    @njit(cache=True)
    def _apply_weights_numba(W, Y):
        d, T, n, _ = W.shape
        out = np.zeros((d, T, n))
        for k in range(d):
            for t in range(T):
                for i in range(n):
                    acc = 0.0
                    for j in range(n):
                        w = W[k, t, i, j]
                        if w != 0.0:
                            acc += w * Y[t, j]
                    out[k, t, i] = acc
        return out

    @njit(cache=True)
    def _sym_trace_pairs_numba(G):
        d, T, n, _ = G.shape
        uu = np.zeros((T, d, d))
        dd = np.zeros((T, d, d))
        for t in range(T):
            for k in range(d):
                for l in range(k, d):
                    a = 0.0
                    b = 0.0
                    c = 0.0
                    for i in range(n):
                        c += G[k, t, i, i] * G[l, t, i, i]
                        for j in range(n):
                            gkij = G[k, t, i, j]
                            a += gkij * G[l, t, j, i]
                            b += gkij * G[l, t, i, j]
                    v = 0.5 * (a + b)
                    uu[t, k, l] = v
                    uu[t, l, k] = v
                    dd[t, k, l] = c
                    dd[t, l, k] = c
        return uu, dd

    @njit(cache=True)
    def _residual_quadratic_numba(Dl, Y, sigma2):
        T, n, _ = Dl.shape
        out = np.zeros(T)
        for t in range(T):
            acc = 0.0
            for i in range(n):
                r = 0.0
                for j in range(n):
                    r += Dl[t, i, j] * Y[t, j]
                acc += r * r
            out[t] = acc / sigma2
        return out

    @njit(cache=True)
    def _triple_sum_numba(F, h):
        T, m = h.shape
        H = np.zeros(m)
        for t in range(T):
            for i in range(m):
                H[i] += h[t, i]
        Q = np.zeros((m, m))
        for t in range(T):
            for i in range(m):
                for j in range(m):
                    Q[i, j] += h[t, i] * h[t, j]
        total = 0.0
        for t in range(T):
            first = 0.0
            own = 0.0
            fq = 0.0
            for i in range(m):
                ri = H[i] - h[t, i]
                for j in range(m):
                    f = F[t, i, j]
                    first += ri * f * (H[j] - h[t, j])
                    own += h[t, i] * f * h[t, j]
                    fq += f * Q[i, j]
            total += first - (fq - own)
        return total


_IMPLS = {
    "similarity": (_similarity_numpy, "_similarity_numba"),
    "assemble_delta": (_assemble_delta_numpy, "_assemble_delta_numba"),
    "weighted_traces": (_weighted_traces_numpy, "_weighted_traces_numba"),
    "apply_weights": (_apply_weights_numpy, "_apply_weights_numba"),
    "sym_trace_pairs": (_sym_trace_pairs_numpy, "_sym_trace_pairs_numba"),
    "residual_quadratic": (_residual_quadratic_numpy, "_residual_quadratic_numba"),
    "triple_sum": (_triple_sum_numpy, "_triple_sum_numba"),
}


def get_kernel(name, backend=None):
    """Return the implementation of kernel ``name`` for ``backend``."""
    backend = backend or BACKEND
    numpy_impl, numba_name = _IMPLS[name]
    if backend == "numpy":
        return numpy_impl
    if not _HAVE_NUMBA:
        raise ImportError("numba backend requested but numba is unavailable")
    return globals()[numba_name]


KERNELS = tuple(_IMPLS)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def similarity(z, phi):
    """Thresholded Gaussian-kernel similarity ``exp(-(z_i - z_j)^2)`` for ``|z_i - z_j| < phi``."""
    return get_kernel("similarity")(_c(z), float(phi))


def assemble_delta(lam, W):
    """Stack of ``I - sum_k lam_k W_k^(t)``, shape ``(T, n, n)``."""
    return get_kernel("assemble_delta")(_c(lam), _c(W))


def weighted_traces(W, Dinv):
    """``tr(W_k^(t) Dinv_t)`` for every ``(k, t)``, shape ``(d, T)``."""
    return get_kernel("weighted_traces")(_c(W), _c(Dinv))


def apply_weights(W, Y):
    """``W_k^(t) Y_t`` for every ``(k, t)``, shape ``(d, T, n)``."""
    return get_kernel("apply_weights")(_c(W), _c(Y))


def sym_trace_pairs(G):
    """Per-period ``tr(s(G_k) s(G_l))`` and ``sum_i G_k[i,i] G_l[i,i]``.

    Both outputs have shape ``(T, d, d)``; ``s(A) = (A + A^T) / 2``.
    """
    return get_kernel("sym_trace_pairs")(_c(G))


def residual_quadratic(Dl, Y, sigma2):
    """``||Dl_t Y_t||^2 / sigma2`` per period."""
    return get_kernel("residual_quadratic")(_c(Dl), _c(Y), float(sigma2))


def triple_sum(F, h):
    """Sum of ``h[t2]^T F[t1] h[t3]`` over pairwise-distinct ``(t1, t2, t3)``.

    Uses the inclusion-exclusion identity, cost ``O(T m^2)``.
    """
    return get_kernel("triple_sum")(_c(F), _c(h))


def _numerically_singular(diag, n):
    a = np.abs(diag)
    return not np.all(np.isfinite(a)) or a.min() <= n * np.finfo(float).eps * a.max()


def lu_inverse_logdet(D):
    """LU-factorize each ``D[t]`` and return inverses, determinant signs and log|det|.

    Raises :class:`SingularFactorError` carrying the offending period when a
    pivot is zero or below ``n * eps`` times the largest pivot.
    """
    D = np.asarray(D, dtype=np.float64)
    T, n, _ = D.shape
    inv = np.empty_like(D)
    sign = np.empty(T)
    logdet = np.empty(T)
    for t in range(T):
        lu, piv, info = lapack.dgetrf(D[t])
        diag = np.diag(lu)
        if info > 0 or _numerically_singular(diag, n):
            raise SingularFactorError(t)
        swaps = np.count_nonzero(piv != np.arange(n))
        sign[t] = (-1.0) ** swaps * np.prod(np.sign(diag))
        logdet[t] = np.sum(np.log(np.abs(diag)))
        inv_t, info = lapack.dgetri(lu, piv)
        if info != 0:
            raise SingularFactorError(t)
        inv[t] = inv_t
    return inv, sign, logdet


def lu_logdet(D):
    """Determinant signs and log|det| only; numerically singular periods give sign 0 and ``-inf``."""
    D = np.asarray(D, dtype=np.float64)
    T, n, _ = D.shape
    sign = np.empty(T)
    logdet = np.empty(T)
    for t in range(T):
        lu, piv, info = lapack.dgetrf(D[t])
        diag = np.diag(lu)
        if info > 0 or _numerically_singular(diag, n):
            sign[t] = 0.0
            logdet[t] = -np.inf
            continue
        swaps = np.count_nonzero(piv != np.arange(n))
        sign[t] = (-1.0) ** swaps * np.prod(np.sign(diag))
        logdet[t] = np.sum(np.log(np.abs(diag)))
    return sign, logdet
