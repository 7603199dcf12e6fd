"""Weight-matrix selection by the extended BIC."""

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estimate import FitOptions, optimize_lambda
from .model import LOG2PI, ConcentratedObjective

log = logging.getLogger(__name__)

STRATEGIES = ("exhaustive", "bound", "greedy")
#: Above this many candidates the default strategy switches to greedy.
EXHAUSTIVE_MAX_D = 16


def ebic(loglik, subset_size, n, T, d, gamma=2.0):
    """``-2 loglik + |S| log(nT) + gamma |S| log(d)``."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return -2.0 * loglik + subset_size * math.log(n * T) + gamma * subset_size * math.log(d)


@dataclass(frozen=True)
class SubsetFit:
    subset: tuple
    loglik: float
    ebic: float
    converged: bool

    @property
    def size(self):
        return len(self.subset)

    def key(self):
        return (self.ebic, self.size, self.subset)


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a subset search; subsets hold 0-based weight indices."""

    best_subset: tuple
    ebic_value: float
    per_subset_table: list
    gamma: float
    q_max: int
    strategy: str = "exhaustive"
    failed: list = field(default_factory=list)
    pruned_sizes: tuple = ()

    def to_csv(self, path):
        """Write ``subset, size, loglik, ebic, converged`` rows (1-based subsets)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "size", "loglik", "ebic", "converged"])
            for row in self.per_subset_table:
                label = "{" + ",".join(str(k + 1) for k in row.subset) + "}"
                w.writerow([label, row.size, repr(row.loglik), repr(row.ebic), int(row.converged)])


def empty_loglik(Y):
    """Log-likelihood of the model with no weight matrices (``lam = 0``)."""
    Y = np.asarray(Y, dtype=float)
    N = Y.size
    s2 = float(np.sum(Y * Y)) / N
    if not s2 > 0:
        raise ValueError("Y is identically zero")
    return -0.5 * N * (LOG2PI + 1.0 + math.log(s2))


def fit_subset_loglik(data, subset, options=None):
    """Maximized concentrated log-likelihood using only the weights in ``subset``."""
    if len(subset) == 0:
        return empty_loglik(data.Y), True
    sub = data.weights.subset(subset)
    obj = ConcentratedObjective(data.Y, sub)
    res = optimize_lambda(obj, options or FitOptions())
    return res.value, res.converged


def _evaluate(data, subsets, gamma, options, fits, failed):
    for s in subsets:
        if s in fits:
            continue
        try:
            ll, ok = fit_subset_loglik(data, s, options)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.warning("subset %s failed: %s", s, exc)
            failed.append(s)
            continue
        if not ok:
            failed.append(s)
            continue
        fits[s] = SubsetFit(s, ll, ebic(ll, len(s), data.n, data.T, data.d, gamma), ok)


def select_subsets(data, gamma=2.0, q_max=None, strategy=None, options=None):
    """Search weight subsets of size at most ``q_max`` for the minimum EBIC.

    Strategies
    ----------
    ``"exhaustive"``
        Fit every subset of size ``<= q_max`` (plus the empty model).
    ``"bound"``
        Same answer as exhaustive.  Sizes are visited in increasing order and
        size ``m`` is skipped once ``-2 l_full + m (log nT + gamma log d)``,
        a lower bound on every size-``m`` EBIC, reaches the best value so far.
    ``"greedy"``
        Forward addition while the EBIC decreases.

    Non-converged subset fits are excluded and listed in ``failed``.
    """
    d = data.d
    q_max = min(d, 6) if q_max is None else int(q_max)
    if not 0 <= q_max <= d:
        raise ValueError(f"q_max must lie in [0, {d}]")
    if strategy is None:
        strategy = "exhaustive" if d <= EXHAUSTIVE_MAX_D else "greedy"
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    options = options or FitOptions()
    fits, failed, pruned = {}, [], []
    if strategy == "greedy":
        current = ()
        _evaluate(data, [current], gamma, options, fits, failed)
        while len(current) < q_max:
            cands = [tuple(sorted(current + (k,))) for k in range(d) if k not in current]
            _evaluate(data, cands, gamma, options, fits, failed)
            scored = [fits[c] for c in cands if c in fits]
            if not scored:
                break
            step = min(scored, key=SubsetFit.key)
            if step.ebic >= fits[current].ebic:
                break
            current = step.subset
    else:
        penalty = math.log(data.n * data.T) + gamma * math.log(d)
        full_ll = None
        if strategy == "bound":
            full_ll, ok = fit_subset_loglik(data, tuple(range(d)), options)
            slack = 1e-6 * (1.0 + abs(full_ll))
        for m in range(q_max + 1):
            if strategy == "bound" and fits:
                best = min(fits.values(), key=SubsetFit.key).ebic
                if -2.0 * full_ll + m * penalty - slack >= best:
                    pruned = list(range(m, q_max + 1))
                    break
            _evaluate(data, list(itertools.combinations(range(d), m)), gamma, options, fits, failed)
    table = sorted(fits.values(), key=lambda f: (f.size, f.subset))
    if not table:
        raise RuntimeError("no subset fit converged")
    best = min(table, key=SubsetFit.key)
    _check_nesting(table)
    return SelectionResult(best.subset, best.ebic, table, gamma, q_max, strategy, failed, tuple(pruned))


def _check_nesting(table, tol=1e-6):
    by_subset = {f.subset: f.loglik for f in table}
    for f in table:
        for k in f.subset:
            parent = tuple(x for x in f.subset if x != k)
            if parent in by_subset and by_subset[parent] > f.loglik + tol * (1.0 + abs(f.loglik)):
                log.warning("nested likelihood violated: %s < %s", f.subset, parent)
