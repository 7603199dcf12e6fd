"""Compare the numba and numpy kernel backends.

Usage: ``python benchmarks/bench_kernels.py [--n 50] [--T 50] [--d 6] [--repeat 5]``.
Prints the best-of-``repeat`` time per call for each kernel and backend, the
speedup and the maximum absolute difference between the two outputs.
"""

import argparse
import timeit

import numpy as np

from mirmodel import kernels
from mirmodel.weights import AttributePanel, build_weight_set


def kernel_inputs(n, T, d, seed=0):
    rng = np.random.default_rng(seed)
    W = build_weight_set(AttributePanel.continuous(rng.standard_normal((d, T, n))), 5.0 / n).dense()
    lam = np.full(d, 0.5 / d)
    D = np.eye(n)[None] - np.einsum("k,ktij->tij", lam, W)
    Dinv = np.linalg.inv(D)
    Y = rng.standard_normal((T, n))
    G = np.matmul(W, Dinv[None])
    m = d + 1
    F = rng.standard_normal((T, m, m))
    h = rng.standard_normal((T, m))
    return {
        "similarity": (rng.standard_normal(n), 0.5),
        "assemble_delta": (lam, W),
        "weighted_traces": (W, Dinv),
        "apply_weights": (W, Y),
        "sym_trace_pairs": (G,),
        "residual_quadratic": (D, Y, 1.3),
        "triple_sum": (F, h),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def run(n=50, T=50, d=6, repeat=5):
    inputs = kernel_inputs(n, T, d)
    rows = []
    for name in kernels.KERNELS:
        args = inputs[name]
        fast = kernels.get_kernel(name, "numba")
        slow = kernels.get_kernel(name, "numpy")
        fast(*args)  # compile outside the timing
        t_fast = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat))
        t_slow = min(timeit.repeat(lambda: slow(*args), number=1, repeat=repeat))
        rows.append((name, t_slow, t_fast, t_slow / t_fast, _max_diff(fast(*args), slow(*args))))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--T", type=int, default=50)
    ap.add_argument("--d", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    print(f"n={a.n} T={a.T} d={a.d}")
    print(f"{'kernel':<20s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, ts, tf, sp, diff in run(a.n, a.T, a.d, a.repeat):
        print(f"{name:<20s} {1e3 * ts:10.3f} {1e3 * tf:10.3f} {sp:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
