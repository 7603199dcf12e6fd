"""Monte Carlo harness: data-generating processes, replication runner and metrics.

Randomness is keyed by ``(base_seed, rep, role)`` through
:class:`numpy.random.SeedSequence`, so a replication draws the same data no
matter which worker runs it or in what order.  Aggregation folds the
per-replication records in replication order.
"""

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .estimate import FitOptions, fit_qmle
from .extensions import (
    fit_covariates,
    fit_endogenous,
    fit_individual_effects,
    fit_time_effects,
)
from .gof import influence_test
from .model import MirData
from .select import select_subsets
from .weights import AttributePanel, build_weight_set

log = logging.getLogger(__name__)

ERROR_DISTS = ("normal", "mixture", "std_exponential")
SETTINGS = ("exogenous", "endogenous", "alternative", "covariates", "fixed_effects", "time_effects")
TASKS = ("estimate", "select", "test")
ROLES = {"attributes": 0, "errors": 1, "alternative": 2, "covariates": 3, "effects": 4}
MAX_FAILURE_RATE = 0.05
ALT_REDRAWS = 10


class StudyFailedError(RuntimeError):
    """More than the allowed share of replications failed."""

    def __init__(self, report):
        self.report = report
        super().__init__(f"{report.failures} of {report.config['replications']} replications failed")


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo cell.

    ``density`` defaults to ``5 / n`` (see the project notes on calibration);
    ``lambda_true`` defaults to 0.2 for every weight matrix.  For selection
    studies the true subset is the support of ``lambda_true``.
    """

    n: int = 50
    T: int = 50
    d: int = 2
    lambda_true: tuple = None
    error_dist: str = "normal"
    setting: str = "exogenous"
    task: str = "estimate"
    rho: float = 0.5
    kappa: float = 0.0
    p: int = 3
    beta_true: float = 1.0
    density: float = None
    replications: int = 100
    base_seed: int = 20240101
    gamma: float = 2.0
    q_max: int = None
    select_strategy: str = "bound"
    alpha: float = 0.05
    feasibility: str = None
    fixed_weights: bool = False

    def __post_init__(self):
        lam = self.lambda_true
        lam = (0.2,) * self.d if lam is None else tuple(float(x) for x in lam)
        if len(lam) != self.d:
            raise ValueError(f"lambda_true has {len(lam)} entries for d={self.d}")
        object.__setattr__(self, "lambda_true", lam)
        if self.density is None:
            object.__setattr__(self, "density", min(1.0, 5.0 / self.n))
        if self.error_dist not in ERROR_DISTS:
            raise ValueError(f"error_dist must be one of {ERROR_DISTS}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.n < 2 or self.T < 1 or self.d < 1:
            raise ValueError("need n >= 2, T >= 1, d >= 1")

    @property
    def lam(self):
        return np.asarray(self.lambda_true, dtype=float)

    def fit_options(self):
        mode = self.feasibility
        if mode is None:
            mode = "invertible" if np.abs(self.lam).sum() >= 1.0 else "l1"
        return FitOptions(feasibility=mode)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        if raw.get("lambda_true") is not None:
            raw["lambda_true"] = tuple(raw["lambda_true"])
        return cls(**raw)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def rng_for(cfg, rep, role):
    """Independent generator for ``(base_seed, rep, role)``."""
    if role == "attributes" and cfg.fixed_weights:
        rep = 0
    ss = np.random.SeedSequence(entropy=cfg.base_seed, spawn_key=(int(rep), ROLES[role]))
    return np.random.Generator(np.random.Philox(ss))


def draw_errors(rng, dist, shape):
    """Unit-variance, mean-zero errors from ``dist``."""
    if dist == "normal":
        return rng.standard_normal(shape)
    if dist == "mixture":
        wide = rng.random(shape) < 0.1
        scale = np.where(wide, math.sqrt(5.0), math.sqrt(5.0 / 9.0))
        return scale * rng.standard_normal(shape)
    if dist == "std_exponential":
        return rng.standard_exponential(shape) - 1.0
    raise ValueError(f"unknown error distribution {dist!r}")


def equicorrelation_cholesky(m, rho):
    """Lower Cholesky factor of ``(1 - rho) I_m + rho 11^T``."""
    C = (1.0 - rho) * np.eye(m) + rho * np.ones((m, m))
    return np.linalg.cholesky(C)


# ---------------------------------------------------------------------------
# data-generating processes
# ---------------------------------------------------------------------------

def _weights(cfg, Z):
    return build_weight_set(AttributePanel.continuous(Z), cfg.density)


def _solve(cfg, weights, rhs, extra=None):
    lam = cfg.lam
    if not np.any(lam) and extra is None:
        return rhs.copy()
    D = np.eye(cfg.n)[None] - np.einsum("k,ktij->tij", lam, weights.dense())
    if extra is not None:
        D = D - extra
    return np.linalg.solve(D, rhs[:, :, None])[:, :, 0]


def gen_setting1(cfg, rep):
    """Exogenous weights: ``Y_t = Delta_t^{-1} eps_t`` with fresh attributes."""
    Z = rng_for(cfg, rep, "attributes").standard_normal((cfg.d, cfg.T, cfg.n))
    eps = draw_errors(rng_for(cfg, rep, "errors"), cfg.error_dist, (cfg.T, cfg.n))
    weights = _weights(cfg, Z)
    return MirData(_solve(cfg, weights, eps), weights)


def gen_setting2(cfg, rep):
    """Endogenous weights: ``(Z_1i, ..., Z_di, eps_i)`` equicorrelated normal.

    Returns the data and the attribute panel used to build the weights.
    """
    rng = rng_for(cfg, rep, "attributes")
    L = equicorrelation_cholesky(cfg.d + 1, cfg.rho)
    draws = rng.standard_normal((cfg.T, cfg.n, cfg.d + 1)) @ L.T
    Z = np.transpose(draws[:, :, :cfg.d], (2, 0, 1))
    eps = draws[:, :, cfg.d]
    panel = AttributePanel.continuous(Z)
    weights = build_weight_set(panel, cfg.density)
    return MirData(_solve(cfg, weights, eps), weights), panel


def gen_alternative(cfg, rep, require_spectral=False):
    """``B_t = sum_k lam_k W_k^(t) + kappa E_t E_t^T`` with standard normal ``E_t``.

    Attributes and errors use the same streams as :func:`gen_setting1`, so
    ``kappa = 0`` reproduces it exactly.  ``E_t`` is redrawn (up to
    ``ALT_REDRAWS`` times) when ``I - B_t`` is numerically singular or, with
    ``require_spectral``, when the spectral radius of ``B_t`` reaches 1.
    """
    if cfg.kappa == 0:
        return gen_setting1(cfg, rep)
    Z = rng_for(cfg, rep, "attributes").standard_normal((cfg.d, cfg.T, cfg.n))
    eps = draw_errors(rng_for(cfg, rep, "errors"), cfg.error_dist, (cfg.T, cfg.n))
    weights = _weights(cfg, Z)
    rng = rng_for(cfg, rep, "alternative")
    base = np.einsum("k,ktij->tij", cfg.lam, weights.dense())
    extra = np.empty((cfg.T, cfg.n, cfg.n))
    for t in range(cfg.T):
        for _ in range(ALT_REDRAWS):
            E = rng.standard_normal(cfg.n)
            K = cfg.kappa * np.outer(E, E)
            B = base[t] + K
            if require_spectral and np.max(np.abs(np.linalg.eigvals(B))) >= 1.0:
                continue
            if np.linalg.cond(np.eye(cfg.n) - B) < 1e12:
                break
        else:
            raise np.linalg.LinAlgError(f"I - B_t stayed singular after {ALT_REDRAWS} redraws at period {t}")
        extra[t] = K
    return MirData(_solve(cfg, weights, eps, extra), weights)


def gen_covariates(cfg, rep):
    """``Y_t = Delta_t^{-1}(X_t beta + eps_t)`` with standard normal covariates."""
    Z = rng_for(cfg, rep, "attributes").standard_normal((cfg.d, cfg.T, cfg.n))
    eps = draw_errors(rng_for(cfg, rep, "errors"), cfg.error_dist, (cfg.T, cfg.n))
    X = rng_for(cfg, rep, "covariates").standard_normal((cfg.T, cfg.n, cfg.p))
    weights = _weights(cfg, Z)
    beta = np.full(cfg.p, cfg.beta_true)
    return MirData(_solve(cfg, weights, X @ beta + eps), weights), X


def gen_effects(cfg, rep, time_effects=False):
    """Actor effects ``omega ~ N(0, 1)`` (plus period effects ``g_t ~ N(0, 1)``)."""
    Z = rng_for(cfg, rep, "attributes").standard_normal((cfg.d, cfg.T, cfg.n))
    eps = draw_errors(rng_for(cfg, rep, "errors"), cfg.error_dist, (cfg.T, cfg.n))
    rng = rng_for(cfg, rep, "effects")
    omega = rng.standard_normal(cfg.n)
    g = rng.standard_normal(cfg.T) if time_effects else np.zeros(cfg.T)
    weights = _weights(cfg, Z)
    rhs = eps + omega[None, :] + g[:, None]
    return MirData(_solve(cfg, weights, rhs), weights), omega, g


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------

def _est_record(prefix, fit, truth, names):
    out = {}
    for j, name in enumerate(names):
        out[f"{prefix}{name}"] = (float(fit.params[j]), float(fit.std_errors[j]), float(truth[j]))
    return out


def run_replication(cfg, rep):
    """Run one replication and return a flat record (or raise)."""
    opts = cfg.fit_options()
    lam_names = [f"lambda_{k + 1}" for k in range(cfg.d)]
    rec = {"rep": rep, "converged": True, "est": {}}
    if cfg.task == "select":
        data = gen_setting1(cfg, rep)
        sel = select_subsets(data, cfg.gamma, cfg.q_max, cfg.select_strategy, opts)
        rec["selected"] = list(sel.best_subset)
        return rec
    if cfg.task == "test" or cfg.setting == "alternative":
        data = gen_alternative(cfg, rep)
        fit = fit_qmle(data, opts)
        res = influence_test(data, fit, cfg.alpha)
        rec["converged"] = fit.converged
        rec["reject"] = bool(res.reject)
        rec["z"] = float(res.z)
        return rec
    if cfg.setting == "exogenous":
        data = gen_setting1(cfg, rep)
        fit = fit_qmle(data, opts)
        rec["converged"] = fit.converged
        rec["est"].update(_est_record("", fit, cfg.lam, lam_names))
    elif cfg.setting == "endogenous":
        data, panel = gen_setting2(cfg, rep)
        naive = fit_qmle(data, opts)
        ea = fit_endogenous(data, panel, opts)
        rec["converged"] = naive.converged and ea.converged
        rec["est"].update(_est_record("QMLE:", naive, cfg.lam, lam_names))
        rec["est"].update(_est_record("EA-QMLE:", ea, cfg.lam, lam_names))
    elif cfg.setting == "covariates":
        data, X = gen_covariates(cfg, rep)
        fit = fit_covariates(data, X, opts)
        rec["converged"] = fit.converged
        truth = np.concatenate([cfg.lam, [1.0], np.full(cfg.p, cfg.beta_true)])
        names = lam_names + ["sigma2"] + [f"beta_{j + 1}" for j in range(cfg.p)]
        rec["est"].update(_est_record("", fit, truth, names))
    else:
        tfe = cfg.setting == "time_effects"
        data, omega, _ = gen_effects(cfg, rep, tfe)
        fit = (fit_time_effects if tfe else fit_individual_effects)(data, None, opts)
        rec["converged"] = fit.converged
        rec["est"].update(_est_record("", fit, cfg.lam, lam_names))
        if not tfe:
            rec["omega_mae"] = float(np.mean(np.abs(fit.extra["omega"] - omega)))
    return rec


def _safe_replication(args):
    cfg, rep = args
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        try:
            rec = run_replication(cfg, rep)
        except Exception as exc:  # replication-level failure is data, not a crash
            rec = {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}
        rec["seconds"] = time.perf_counter() - t0
    return rec


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def selection_metrics(selected, true_subset, d):
    """AS, CT, TPR and FPR (the last three in percent) over replications."""
    true_set = set(true_subset)
    false_count = d - len(true_set)
    sizes, ct, tpr, fpr = [], [], [], []
    for s in selected:
        s = set(s)
        sizes.append(len(s))
        ct.append(100.0 * (s == true_set))
        tpr.append(100.0 * len(s & true_set) / len(true_set) if true_set else 100.0)
        fpr.append(100.0 * len(s - true_set) / false_count if false_count else 0.0)
    return {"AS": float(np.mean(sizes)), "CT": float(np.mean(ct)),
            "TPR": float(np.mean(tpr)), "FPR": float(np.mean(fpr))}


def estimate_metrics(values, ses, truth):
    """BIAS, SE (mean estimated SE) and SE* (empirical SD) for one parameter."""
    v = np.asarray(values, dtype=float)
    return {"BIAS": float(np.mean(v) - truth), "SE": float(np.mean(ses)), "SE*": float(np.std(v))}


@dataclass
class SimReport:
    config: dict
    metrics: dict
    failures: int
    failure_messages: list
    runtime_seconds: float
    replications_used: int
    rows: list = field(default_factory=list)

    def to_dict(self, include_runtime=False):
        out = {
            "config": self.config,
            "metrics": self.metrics,
            "failures": self.failures,
            "failure_messages": self.failure_messages,
            "replications_used": self.replications_used,
        }
        if include_runtime:
            out["runtime_seconds"] = self.runtime_seconds
        return out

    def write(self, directory, stem="report"):
        """Write ``<stem>.csv`` (metric rows) and ``<stem>.json``.

        Runtime is left out so reruns are byte-identical.
        """
        os.makedirs(directory, exist_ok=True)
        csv_path = os.path.join(directory, f"{stem}.csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "parameter", "value"])
            for metric, param, value in self.rows:
                w.writerow([metric, param, repr(float(value))])
        json_path = os.path.join(directory, f"{stem}.json")
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return csv_path, json_path


def aggregate(cfg, records, runtime=0.0):
    """Fold replication records (in replication order) into a :class:`SimReport`."""
    records = sorted(records, key=lambda r: r["rep"])
    good = [r for r in records if "error" not in r and r.get("converged", True)]
    bad = [r for r in records if r not in good]
    messages = [f"rep {r['rep']}: {r.get('error', 'not converged')}" for r in bad]
    metrics, rows = {}, []
    if good and cfg.task == "select":
        truth = [k for k in range(cfg.d) if cfg.lambda_true[k] != 0]
        metrics = selection_metrics([r["selected"] for r in good], truth, cfg.d)
        rows = [(k, "subset", v) for k, v in metrics.items()]
    elif good and "reject" in good[0]:
        rate = float(np.mean([r["reject"] for r in good]))
        metrics = {"rejection_rate": rate, "mean_z": float(np.mean([r["z"] for r in good]))}
        rows = [("rejection_rate", f"kappa={cfg.kappa:g}", rate)]
    elif good:
        for name in good[0]["est"]:
            vals = [r["est"][name][0] for r in good]
            ses = [r["est"][name][1] for r in good]
            m = estimate_metrics(vals, ses, good[0]["est"][name][2])
            metrics[name] = m
            rows.extend((k, name, v) for k, v in m.items())
        if "omega_mae" in good[0]:
            metrics["omega_mae"] = float(np.mean([r["omega_mae"] for r in good]))
            rows.append(("omega_MAE", "omega", metrics["omega_mae"]))
    return SimReport(cfg.to_dict(), metrics, len(bad), messages, runtime, len(good), rows)


def run_study(cfg, workers=1, raise_on_failure=True):
    """Run all replications of ``cfg`` and aggregate them deterministically.

    ``workers > 1`` uses a process pool; every worker limits BLAS to one
    thread so results do not depend on the worker count.
    """
    t0 = time.perf_counter()
    jobs = [(cfg, rep) for rep in range(cfg.replications)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_safe_replication, jobs, chunksize=1))
    else:
        records = [_safe_replication(j) for j in jobs]
    report = aggregate(cfg, records, time.perf_counter() - t0)
    if report.failures > MAX_FAILURE_RATE * cfg.replications:
        log.error("study failed: %s", report.failure_messages[:5])
        if raise_on_failure:
            raise StudyFailedError(report)
    return report


# ---------------------------------------------------------------------------
# table presets
# ---------------------------------------------------------------------------

GRID = (25, 50, 100)


def table_presets(table, replications=500, base_seed=20240101):
    """All cells of a paper-style table as :class:`SimConfig` objects.

    Table 1: estimation for d in {2, 6}; 2: selection with d=8 and three
    true matrices; 3: test size and power for d=2, kappa in {0, 0.1, 0.2};
    4: endogenous weights with d=6; "S9": covariates with d=6, p=3.
    """
    table = str(table).upper()
    cells = []
    for n in GRID:
        for T in GRID:
            common = dict(n=n, T=T, replications=replications, base_seed=base_seed)
            if table == "1":
                cells += [SimConfig(d=d, **common) for d in (2, 6)]
            elif table == "2":
                cells.append(SimConfig(d=8, lambda_true=(0.2,) * 3 + (0.0,) * 5, task="select", **common))
            elif table == "3":
                cells += [SimConfig(d=2, setting="alternative", task="test", kappa=k, **common)
                          for k in (0.0, 0.1, 0.2)]
            elif table == "4":
                cells.append(SimConfig(d=6, setting="endogenous", **common))
            elif table == "S9":
                cells.append(SimConfig(d=6, setting="covariates", p=3, **common))
            else:
                raise ValueError(f"unknown table preset {table!r}")
    return cells
