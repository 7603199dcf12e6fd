"""File interchange: response panels, covariates, configs and run manifests."""

import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__

MANIFEST_NAME = "manifest.json"


class InputError(ValueError):
    """An input file is malformed or inconsistent with another input."""


def _data_rows(path):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            yield lineno, row


def read_y_csv(path):
    """Read a wide response file: one row per period, one column per actor.

    A header row is detected when its first cell is not numeric.
    """
    rows = []
    width = None
    for lineno, row in _data_rows(path):
        try:
            values = [float(x) for x in row]
        except ValueError:
            if not rows and width is None:
                width = len(row)
                continue
            raise InputError(f"{path}:{lineno}: non-numeric value in {row}") from None
        if width is None:
            width = len(values)
        if len(values) != width:
            raise InputError(f"{path}:{lineno}: expected {width} columns, found {len(values)}")
        rows.append(values)
    if not rows:
        raise InputError(f"{path}: no data rows")
    Y = np.array(rows)
    if not np.all(np.isfinite(Y)):
        raise InputError(f"{path}: non-finite values")
    return Y


def write_y_csv(path, Y):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"actor_{i + 1}" for i in range(Y.shape[1])])
        for row in Y:
            w.writerow([repr(float(v)) for v in row])


def read_long_panel(path, T, n):
    """Read a long ``k, t, i, value`` file into an array of shape ``(T, n, p)``.

    Used for covariates and endogenous attributes; indices are 1-based.
    """
    cells = {}
    header = None
    for lineno, row in _data_rows(path):
        if header is None:
            header = [h.strip().lower() for h in row]
            try:
                cols = [header.index(c) for c in ("k", "t", "i", "value")]
            except ValueError:
                raise InputError(f"{path}:{lineno}: header must contain k, t, i, value") from None
            continue
        try:
            k, t, i = (int(row[c]) for c in cols[:3])
            v = float(row[cols[3]])
        except (ValueError, IndexError):
            raise InputError(f"{path}:{lineno}: malformed row {row}") from None
        if not (1 <= t <= T and 1 <= i <= n and k >= 1):
            raise InputError(f"{path}:{lineno}: index (k={k}, t={t}, i={i}) outside T={T}, n={n}")
        cells[(k, t, i)] = v
    if not cells:
        raise InputError(f"{path}: no data rows")
    p = max(k for k, _, _ in cells)
    if len(cells) != p * T * n:
        raise InputError(f"{path}: expected {p * T * n} cells for p={p}, T={T}, n={n}, found {len(cells)}")
    X = np.empty((T, n, p))
    for (k, t, i), v in cells.items():
        X[t - 1, i - 1, k - 1] = v
    return X


def write_long_panel(path, X):
    X = np.asarray(X, dtype=float)
    T, n, p = X.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "i", "value"])
        for k in range(p):
            for t in range(T):
                for i in range(n):
                    w.writerow([k + 1, t + 1, i + 1, repr(float(X[t, i, k]))])


def read_config(path):
    """Load a TOML or JSON configuration file into a dict."""
    try:
        if path.endswith(".json"):
            with open(path) as fh:
                return json.load(fh)
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def file_digest(path):
    """SHA-256 of a file, or of every file in a directory in name order."""
    h = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full):
                h.update(name.encode())
                with open(full, "rb") as fh:
                    h.update(fh.read())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance of a CLI run.

    ``run_id`` hashes everything except wall-clock fields, so identical
    inputs, config and seed give the same id and the same output bytes.
    The manifest file itself records timings and so differs between runs.
    """

    subcommand: str
    config: dict
    inputs: dict
    seed: int
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float = None
    timings: dict = field(default_factory=dict)

    @property
    def run_id(self):
        payload = json.dumps(
            {"subcommand": self.subcommand, "config": self.config, "inputs": self.inputs,
             "seed": self.seed, "version": self.version},
            sort_keys=True, default=str,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @classmethod
    def create(cls, subcommand, config, input_paths, seed):
        inputs = {name: file_digest(p) for name, p in sorted(input_paths.items()) if p}
        return cls(subcommand, config, inputs, seed)

    def reference(self):
        return {"manifest": MANIFEST_NAME, "run_id": self.run_id}

    def write(self, directory):
        self.finished = time.time()
        out = {
            "run_id": self.run_id,
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs": self.inputs,
            "seed": self.seed,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "wall_clock_seconds": self.finished - self.started,
            "timings": self.timings,
        }
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True, default=str)
        return path


def write_json(path, payload, manifest):
    payload = dict(payload)
    payload["_manifest"] = manifest.reference()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def stamp_csv(path, manifest):
    """Prepend a ``# manifest=... run_id=...`` comment line to a CSV file."""
    with open(path) as fh:
        body = fh.read()
    ref = manifest.reference()
    with open(path, "w") as fh:
        fh.write(f"# manifest={ref['manifest']} run_id={ref['run_id']}\n")
        fh.write(body)


def write_residuals_csv(path, residuals, manifest):
    R = np.atleast_2d(np.asarray(residuals, dtype=float))
    with open(path, "w", newline="") as fh:
        ref = manifest.reference()
        fh.write(f"# manifest={ref['manifest']} run_id={ref['run_id']}\n")
        w = csv.writer(fh)
        w.writerow(["t", "i", "residual"])
        for t in range(R.shape[0]):
            for i in range(R.shape[1]):
                w.writerow([t + 1, i + 1, repr(float(R[t, i]))])
