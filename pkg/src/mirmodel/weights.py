"""Similarity and row-normalized weight matrices built from actor attributes.

Each attribute ``k`` observed at period ``t`` yields an ``n x n`` similarity
matrix ``A_k^(t)``; row-normalizing it gives the weight matrix ``W_k^(t)``.
Continuous attributes use the thresholded kernel ``exp(-(z_i - z_j)^2)`` for
``|z_i - z_j| < phi``; discrete attributes connect actors of the same class.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import kernels

log = logging.getLogger(__name__)

#: Slices with more actors than this are stored in sparse (CSR) form.
DENSE_MAX_N = 512

CONTINUOUS = "continuous"
DISCRETE = "discrete"


class WeightConstructionError(ValueError):
    """Raised when a similarity or weight matrix cannot be built."""


class IsolatedActorError(WeightConstructionError):
    """A row of a similarity matrix sums to zero, so it cannot be normalized."""

    def __init__(self, actor, k=None, t=None):
        self.actor = actor
        self.k = k
        self.t = t
        where = []
        if k is not None:
            where.append(f"attribute {k}")
        if t is not None:
            where.append(f"period {t}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"actor {actor} has no neighbours{suffix}; row sum is zero")


@dataclass(frozen=True)
class AttributePanel:
    """Attribute stack indexed ``(k, t, i)``.

    ``values`` has shape ``(d, T, n)``.  Discrete attributes hold integer class
    codes (use :meth:`from_labels` to encode arbitrary labels).
    """

    values: np.ndarray
    kinds: tuple

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"attribute values must have shape (d, T, n), got {values.shape}")
        d = values.shape[0]
        kinds = tuple(self.kinds) if self.kinds is not None else (CONTINUOUS,) * d
        if len(kinds) != d:
            raise ValueError(f"{len(kinds)} kinds given for {d} attributes")
        for k, kind in enumerate(kinds):
            if kind not in (CONTINUOUS, DISCRETE):
                raise ValueError(f"unknown attribute kind {kind!r} for attribute {k}")
            if kind == CONTINUOUS and not np.all(np.isfinite(values[k].astype(float))):
                raise ValueError(f"continuous attribute {k} contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kinds", kinds)

    @property
    def d(self):
        return self.values.shape[0]

    @property
    def T(self):
        return self.values.shape[1]

    @property
    def n(self):
        return self.values.shape[2]

    @classmethod
    def continuous(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(values, (CONTINUOUS,) * values.shape[0])

    @classmethod
    def from_labels(cls, columns, kinds):
        """Build from a list of ``(T, n)`` arrays, one per attribute.

        Discrete columns may contain any hashable labels; they are encoded to
        integer codes in order of first appearance.
        """
        encoded = []
        for col, kind in zip(columns, kinds):
            col = np.asarray(col)
            if kind == DISCRETE:
                codes = {}
                flat = [codes.setdefault(v, len(codes)) for v in col.ravel().tolist()]
                encoded.append(np.asarray(flat, dtype=float).reshape(col.shape))
            else:
                encoded.append(col.astype(float))
        return cls(np.stack(encoded), tuple(kinds))


class WeightSet:
    """Stack of row-stochastic weight matrices ``W_k^(t)``.

    Dense storage is a ``(d, T, n, n)`` array; for ``n > DENSE_MAX_N`` each
    slice is kept as a CSR matrix.  Instances are read-only after creation.
    """

    def __init__(self, matrices, phi=None, repaired=(), check=True, atol=1e-12):
        if isinstance(matrices, np.ndarray):
            arr = np.array(matrices, dtype=float)
            if arr.ndim != 4 or arr.shape[2] != arr.shape[3]:
                raise ValueError(f"weights must have shape (d, T, n, n), got {arr.shape}")
            arr.setflags(write=False)
            self._dense = arr
            self._sparse = None
            self.d, self.T, self.n = arr.shape[0], arr.shape[1], arr.shape[2]
        else:
            rows = [[sparse.csr_matrix(m, dtype=float) for m in row] for row in matrices]
            self._dense = None
            self._sparse = rows
            self.d, self.T = len(rows), len(rows[0])
            self.n = rows[0][0].shape[0]
        self.phi = None if phi is None else np.asarray(phi, dtype=float)
        self.repaired = tuple(repaired)
        if check:
            self.validate(atol)

    @property
    def is_sparse(self):
        return self._sparse is not None

    def slice(self, k, t):
        """Return ``W_k^(t)`` (dense array or CSR matrix depending on storage)."""
        if self._sparse is not None:
            return self._sparse[k][t]
        return self._dense[k, t]

    def dense(self):
        """Dense ``(d, T, n, n)`` array view of all matrices."""
        if self._dense is not None:
            return self._dense
        arr = np.zeros((self.d, self.T, self.n, self.n))
        for k in range(self.d):
            for t in range(self.T):
                arr[k, t] = self._sparse[k][t].toarray()
        arr.setflags(write=False)
        return arr

    def subset(self, ks):
        """Weight set restricted to attributes ``ks`` (in the given order)."""
        ks = list(ks)
        phi = None if self.phi is None else self.phi[ks]
        if self._sparse is not None:
            return WeightSet([self._sparse[k] for k in ks], phi=phi, check=False)
        return WeightSet(self._dense[ks], phi=phi, check=False)

    def density(self):
        """Proportion of nonzero off-diagonal entries per ``(k, t)``."""
        out = np.empty((self.d, self.T))
        for k in range(self.d):
            for t in range(self.T):
                m = self.slice(k, t)
                nnz = m.count_nonzero() if sparse.issparse(m) else np.count_nonzero(m)
                out[k, t] = nnz / (self.n * (self.n - 1))
        return out

    def validate(self, atol=1e-12):
        for k in range(self.d):
            for t in range(self.T):
                m = self.slice(k, t)
                if sparse.issparse(m):
                    diag = m.diagonal()
                    rows = np.asarray(m.sum(axis=1)).ravel()
                    neg = (m.data < 0).any()
                else:
                    diag = np.diag(m)
                    rows = m.sum(axis=1)
                    neg = (m < 0).any()
                if np.any(diag != 0):
                    raise WeightConstructionError(f"W[{k}, {t}] has a nonzero diagonal")
                if neg:
                    raise WeightConstructionError(f"W[{k}, {t}] has negative entries")
                if np.max(np.abs(rows - 1.0)) > atol:
                    raise WeightConstructionError(f"W[{k}, {t}] is not row-stochastic")

    def export_csv(self, directory):
        """Write one ``W_k{k}_t{t}.csv`` file per slice (1-based indices)."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for k in range(self.d):
            for t in range(self.T):
                m = self.slice(k, t)
                m = m.toarray() if sparse.issparse(m) else m
                path = os.path.join(directory, f"W_k{k + 1}_t{t + 1}.csv")
                np.savetxt(path, m, delimiter=",", fmt="%.17g")
                paths.append(path)
        return paths

    @classmethod
    def from_csv_dir(cls, directory):
        """Inverse of :meth:`export_csv`."""
        entries = {}
        for name in os.listdir(directory):
            if not (name.startswith("W_k") and name.endswith(".csv")):
                continue
            stem = name[3:-4]
            k_str, t_str = stem.split("_t")
            entries[(int(k_str), int(t_str))] = os.path.join(directory, name)
        if not entries:
            raise FileNotFoundError(f"no W_k*_t*.csv files in {directory}")
        ks = sorted({k for k, _ in entries})
        ts = sorted({t for _, t in entries})
        if len(entries) != len(ks) * len(ts):
            raise ValueError(f"weight directory {directory} is missing (k, t) slices")
        mats = [[np.loadtxt(entries[(k, t)], delimiter=",", ndmin=2) for t in ts] for k in ks]
        n = mats[0][0].shape[0]
        if n > DENSE_MAX_N:
            return cls(mats)
        return cls(np.array(mats))

    def __repr__(self):
        storage = "sparse" if self.is_sparse else "dense"
        return f"WeightSet(d={self.d}, T={self.T}, n={self.n}, {storage})"


def build_similarity_continuous(z, phi):
    """Similarity matrix for a continuous attribute vector.

    Entry ``(i, j)`` is ``exp(-(z_i - z_j)^2)`` when ``|z_i - z_j| < phi``
    and zero otherwise; the diagonal is zero.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise WeightConstructionError("continuous attribute contains non-finite values")
    if not phi > 0:
        raise WeightConstructionError(f"threshold phi must be positive, got {phi}")
    return kernels.similarity(z, phi)


def build_similarity_discrete(z):
    """Adjacency of actors sharing a class label (zero diagonal)."""
    z = np.asarray(z)
    A = (z[:, None] == z[None, :]).astype(float)
    np.fill_diagonal(A, 0.0)
    return A


def _pair_distances(z):
    z = np.asarray(z, dtype=float)
    iu = np.triu_indices(len(z), k=1)
    return np.abs(z[iu[0]] - z[iu[1]])


def select_threshold(z, target_density):
    """Threshold ``phi`` giving the smallest realized density not below target.

    Density counts nonzero off-diagonal entries over ``n (n - 1)``.  Ties at
    the cut are all included.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    if n < 2:
        raise ValueError("need at least two actors")
    if not 0 < target_density <= 1:
        raise ValueError(f"target density must lie in (0, 1], got {target_density}")
    if not np.all(np.isfinite(z)):
        raise WeightConstructionError("continuous attribute contains non-finite values")
    dist = np.sort(_pair_distances(z))
    m_ordered = math.ceil(target_density * n * (n - 1) - 1e-9)
    m_pairs = max(1, math.ceil(m_ordered / 2))
    cut = dist[m_pairs - 1]
    above = dist[dist > cut]
    if above.size:
        return float(cut + 0.5 * (above[0] - cut))
    if dist[0] == dist[-1]:
        log.info("all pairwise distances equal; realized density is 1")
    return float(cut + max(1.0, abs(cut)))


def realized_density(z, phi):
    dist = _pair_distances(z)
    n = len(z)
    return 2.0 * np.count_nonzero(dist < phi) / (n * (n - 1))


def repair_isolated(A, z):
    """Connect every zero-degree actor to its nearest neighbour.

    Returns the repaired matrix and the list of repaired actor indices.  The
    added entry carries the kernel value at that distance (or 1 if it
    underflows); only the isolated actor's row changes.
    """
    rows = A.sum(axis=1)
    isolated = np.flatnonzero(rows <= 0)
    if isolated.size == 0:
        return A, []
    A = A.copy()
    z = np.asarray(z, dtype=float)
    for i in isolated:
        dist = np.abs(z - z[i])
        dist[i] = np.inf
        j = int(np.argmin(dist))
        value = math.exp(-dist[j] ** 2)
        A[i, j] = value if value > 0 else 1.0
    return A, isolated.tolist()


def row_normalize(A, k=None, t=None):
    """Divide each row by its sum.  Zero rows raise :class:`IsolatedActorError`."""
    if sparse.issparse(A):
        A = sparse.csr_matrix(A, dtype=float)
        rows = np.asarray(A.sum(axis=1)).ravel()
        bad = np.flatnonzero(rows <= 0)
        if bad.size:
            raise IsolatedActorError(int(bad[0]), k, t)
        return sparse.diags(1.0 / rows) @ A
    A = np.asarray(A, dtype=float)
    rows = A.sum(axis=1)
    bad = np.flatnonzero(rows <= 0)
    if bad.size:
        raise IsolatedActorError(int(bad[0]), k, t)
    return A / rows[:, None]


def _build_slice(z, kind, target_density, k, t):
    if kind == DISCRETE:
        A = build_similarity_discrete(z)
        return row_normalize(A, k, t), np.nan, []
    phi = select_threshold(z, target_density)
    A = build_similarity_continuous(z, phi)
    A, fixed = repair_isolated(A, z)
    return row_normalize(A, k, t), phi, fixed


def build_weight_set(panel, target_density=None):
    """Build ``W_k^(t)`` for every attribute and period of ``panel``.

    Thresholds are chosen independently per ``(k, t)`` slice.  The default
    target density is ``10 / n``.
    """
    if target_density is None:
        target_density = min(1.0, 10.0 / panel.n)
    d, T, n = panel.d, panel.T, panel.n
    phi = np.full((d, T), np.nan)
    repaired = []
    use_sparse = n > DENSE_MAX_N
    mats = [] if use_sparse else np.empty((d, T, n, n))
    for k in range(d):
        row = []
        for t in range(T):
            W, phi[k, t], fixed = _build_slice(panel.values[k, t], panel.kinds[k], target_density, k, t)
            repaired.extend((k, t, i) for i in fixed)
            if use_sparse:
                row.append(sparse.csr_matrix(W))
            else:
                mats[k, t] = W
        if use_sparse:
            mats.append(row)
    if repaired:
        log.debug("repaired %d isolated actors by nearest-neighbour links", len(repaired))
    return WeightSet(mats, phi=phi, repaired=repaired)


def read_attributes_csv(path, discrete=()):
    """Read a long-format attribute file with columns ``k, t, i, value``.

    Indices may start at any integer; they are mapped to consecutive
    positions in sorted order.  Attributes listed in ``discrete`` (by their
    ``k`` label) keep their raw string values as class labels.
    """
    discrete = {str(k) for k in discrete}
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader)]
        try:
            cols = [header.index(c) for c in ("k", "t", "i", "value")]
        except ValueError:
            raise ValueError(f"{path}: header must contain k, t, i, value; got {header}") from None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                k, t, i = (int(row[c]) for c in cols[:3])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed index in {row}") from None
            records.append((k, t, i, row[cols[3]].strip()))
    if not records:
        raise ValueError(f"{path}: no data rows")
    ks = sorted({r[0] for r in records})
    ts = sorted({r[1] for r in records})
    ids = sorted({r[2] for r in records})
    kpos = {k: p for p, k in enumerate(ks)}
    tpos = {t: p for p, t in enumerate(ts)}
    ipos = {i: p for p, i in enumerate(ids)}
    raw = np.empty((len(ks), len(ts), len(ids)), dtype=object)
    seen = np.zeros(raw.shape, dtype=bool)
    for k, t, i, v in records:
        raw[kpos[k], tpos[t], ipos[i]] = v
        seen[kpos[k], tpos[t], ipos[i]] = True
    if not seen.all():
        missing = tuple(int(x) for x in np.argwhere(~seen)[0])
        raise ValueError(f"{path}: missing (k, t, i) cell at positions {missing}")
    kinds = [DISCRETE if str(k) in discrete else CONTINUOUS for k in ks]
    columns = []
    for p, kind in enumerate(kinds):
        if kind == CONTINUOUS:
            try:
                columns.append(raw[p].astype(float))
            except ValueError:
                raise ValueError(f"{path}: attribute {ks[p]} has non-numeric values") from None
        else:
            columns.append(raw[p])
    return AttributePanel.from_labels(columns, kinds)


def write_attributes_csv(path, panel):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "t", "i", "value"])
        for k in range(panel.d):
            for t in range(panel.T):
                for i in range(panel.n):
                    writer.writerow([k + 1, t + 1, i + 1, repr(float(panel.values[k, t, i]))])
