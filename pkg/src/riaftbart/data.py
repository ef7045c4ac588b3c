"""Clustered right-censored survival datasets: model, CSV I/O, validation and
row bootstrap."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

RESERVED = ("y", "delta", "cluster", "a")
MISSING_TOKENS = ("", "NA")


class DataError(ValueError):
    """Invalid survival data; ``row`` is 1-based over data rows, when known."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Observed times, event indicators, clusters, optional treatment and covariates.

    Categorical covariates are stored as integer codes ``0..C-1`` (as floats);
    ``codebooks[name]`` lists the original labels in code order. Missing
    covariate cells are NaN, so ``mask`` is ``isnan(X)``.
    """

    y: np.ndarray
    delta: np.ndarray
    cluster: np.ndarray
    X: np.ndarray
    column_names: tuple
    is_categorical: np.ndarray
    a: np.ndarray | None = None
    codebooks: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("y", "delta", "cluster", "X", "is_categorical", "a"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        check_dataset(self)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def L(self):
        return self.X.shape[1]

    @property
    def K(self):
        return int(self.cluster.max())

    @property
    def J(self):
        return 0 if self.a is None else int(self.a.max())

    @property
    def mask(self):
        return np.isnan(self.X)

    @property
    def cluster_sizes(self):
        return np.bincount(self.cluster, minlength=self.K + 1)[1:]

    def take(self, rows, relabel=False):
        """Row subset; ``relabel`` renumbers clusters when some drop out."""
        rows = np.asarray(rows)
        cluster = self.cluster[rows]
        if relabel:
            cluster = relabel_clusters(cluster)
        return replace(self, y=self.y[rows], delta=self.delta[rows], cluster=cluster,
                       X=self.X[rows], a=None if self.a is None else self.a[rows])

    def with_outcomes(self, y, delta):
        return replace(self, y=np.asarray(y, float), delta=np.asarray(delta, int))

    def with_X(self, X):
        return replace(self, X=np.asarray(X, float))

    def design(self, a=None):
        """Predictor matrix for BART: treatment code (a - 1) first when present,
        then the covariates. ``a`` overrides the treatment (scalar or vector)."""
        if self.a is None:
            return np.ascontiguousarray(self.X, dtype=float)
        arm = self.a if a is None else np.broadcast_to(np.asarray(a), self.a.shape)
        return np.ascontiguousarray(np.column_stack([arm - 1.0, self.X]), dtype=float)

    def design_is_categorical(self):
        if self.a is None:
            return self.is_categorical.copy()
        return np.concatenate([[True], self.is_categorical])

    def design_names(self):
        return (("a",) if self.a is not None else ()) + self.column_names

    def equals(self, other):
        same = (self.column_names == other.column_names
                and np.array_equal(self.is_categorical, other.is_categorical)
                and np.array_equal(self.y, other.y) and np.array_equal(self.delta, other.delta)
                and np.array_equal(self.cluster, other.cluster)
                and np.array_equal(self.X, other.X, equal_nan=True)
                and self.codebooks == other.codebooks)
        if self.a is None or other.a is None:
            return same and self.a is None and other.a is None
        return same and np.array_equal(self.a, other.a)


def check_dataset(ds):
    y, delta, cluster = ds.y, ds.delta, ds.cluster
    n = y.shape[0]
    if delta.shape[0] != n or cluster.shape[0] != n or ds.X.shape[0] != n:
        raise DataError("y, delta, cluster and X must have the same number of rows")
    if ds.X.ndim != 2 or ds.X.shape[1] != len(ds.column_names):
        raise DataError("X must be n x L with one name per column")
    if ds.is_categorical.shape[0] != ds.X.shape[1]:
        raise DataError("is_categorical must have one flag per column")
    bad = np.flatnonzero(~(y > 0))
    if bad.size:
        raise DataError(f"nonpositive time at row {bad[0] + 1}", row=bad[0] + 1, column="y")
    bad = np.flatnonzero((delta != 0) & (delta != 1))
    if bad.size:
        raise DataError(f"event indicator not in {{0,1}} at row {bad[0] + 1}",
                        row=bad[0] + 1, column="delta")
    if n == 0:
        raise DataError("dataset has no rows")
    _check_labels(cluster, "cluster")
    if ds.a is not None:
        if ds.a.shape[0] != n:
            raise DataError("treatment column has the wrong length")
        bad = np.flatnonzero(ds.a < 1)
        if bad.size:
            raise DataError(f"unknown treatment label at row {bad[0] + 1}",
                            row=bad[0] + 1, column="a")


def _check_labels(labels, column):
    bad = np.flatnonzero(labels < 1)
    if bad.size:
        raise DataError(f"unknown {column} label at row {bad[0] + 1}", row=bad[0] + 1, column=column)
    present = np.bincount(labels)[1:]
    empty = np.flatnonzero(present == 0)
    if empty.size:
        raise DataError(f"empty {column} {empty[0] + 1}: labels must be contiguous 1..K",
                        column=column)


def make_dataset(y, delta, cluster, X, column_names=None, is_categorical=None, a=None,
                 codebooks=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    L = X.shape[1]
    names = tuple(column_names) if column_names is not None else tuple(f"x{j + 1}" for j in range(L))
    cat = np.zeros(L, dtype=bool) if is_categorical is None else np.asarray(is_categorical, bool)
    return SurvivalDataset(y=np.asarray(y, float), delta=np.asarray(delta).astype(int),
                           cluster=np.asarray(cluster).astype(int), X=X, column_names=names,
                           is_categorical=cat, a=None if a is None else np.asarray(a).astype(int),
                           codebooks=dict(codebooks or {}))


# ------------------------------------------------------------------------ I/O
def _parse_float(text, row, column):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"cannot parse {text!r} as a number at row {row}, column {column}",
                        row=row, column=column) from None


def load_dataset(path, schema=None, categorical=None, codebook_path=None):
    """Read a CSV with columns y, delta, cluster, optional a, then covariates.

    ``schema`` maps roles (y, delta, cluster, a) to header names when they
    differ. Covariates listed in ``categorical`` (or in a codebook sidecar) are
    coded 0..C-1; empty cells and ``NA`` become missing.
    """
    path = Path(path)
    roles = {r: r for r in RESERVED}
    roles.update(schema or {})
    sidecar = Path(codebook_path) if codebook_path else path.with_suffix(".codebook.json")
    codebooks = {}
    if sidecar.exists():
        codebooks = {k: list(v) for k, v in json.loads(sidecar.read_text()).items()}
    cat_names = set(categorical or ()) | set(codebooks)

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file") from None
        rows = [r for r in reader if r]
    for role in ("y", "delta", "cluster"):
        if roles[role] not in header:
            raise DataError(f"missing required column {roles[role]!r}", column=roles[role])
    idx = {h: i for i, h in enumerate(header)}
    has_a = roles["a"] in idx
    role_cols = {roles[r] for r in RESERVED}
    cov_names = [h for h in header if h not in role_cols]

    n = len(rows)
    y = np.empty(n)
    delta = np.empty(n, dtype=int)
    cluster = np.empty(n, dtype=int)
    a = np.empty(n, dtype=int) if has_a else None
    raw = []
    for i, r in enumerate(rows):
        row = i + 1
        if len(r) != len(header):
            raise DataError(f"row {row} has {len(r)} fields, expected {len(header)}", row=row)
        for role in ("y", "delta", "cluster") + (("a",) if has_a else ()):
            if r[idx[roles[role]]].strip() in MISSING_TOKENS:
                raise DataError(f"missing value in {roles[role]} at row {row}",
                                row=row, column=roles[role])
        y[i] = _parse_float(r[idx[roles["y"]]], row, roles["y"])
        if not y[i] > 0:
            raise DataError(f"nonpositive time at row {row}", row=row, column=roles["y"])
        d = _parse_float(r[idx[roles["delta"]]], row, roles["delta"])
        if d not in (0.0, 1.0):
            raise DataError(f"event indicator not in {{0,1}} at row {row}", row=row,
                            column=roles["delta"])
        delta[i] = int(d)
        c = _parse_float(r[idx[roles["cluster"]]], row, roles["cluster"])
        if c != int(c) or c < 1:
            raise DataError(f"unknown cluster label at row {row}", row=row, column=roles["cluster"])
        cluster[i] = int(c)
        if has_a:
            t = _parse_float(r[idx[roles["a"]]], row, roles["a"])
            if t != int(t) or t < 1:
                raise DataError(f"unknown treatment label at row {row}", row=row, column=roles["a"])
            a[i] = int(t)
        raw.append([r[idx[h]].strip() for h in cov_names])

    X = np.full((n, len(cov_names)), np.nan)
    is_cat = np.zeros(len(cov_names), dtype=bool)
    for j, name in enumerate(cov_names):
        col = [row[j] for row in raw]
        if name in cat_names:
            is_cat[j] = True
            labels = list(codebooks.get(name, []))
            if name not in codebooks:
                labels = sorted({v for v in col if v not in MISSING_TOKENS}, key=_label_key)
                codebooks[name] = labels
            lookup = {lab: k for k, lab in enumerate(labels)}
            for i, v in enumerate(col):
                if v in MISSING_TOKENS:
                    continue
                if v not in lookup:
                    raise DataError(f"unknown category {v!r} at row {i + 1}, column {name}",
                                    row=i + 1, column=name)
                X[i, j] = lookup[v]
        else:
            for i, v in enumerate(col):
                if v not in MISSING_TOKENS:
                    X[i, j] = _parse_float(v, i + 1, name)
    return SurvivalDataset(y=y, delta=delta, cluster=cluster, X=X, column_names=tuple(cov_names),
                           is_categorical=is_cat, a=a, codebooks=codebooks)


def _label_key(v):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def _fmt(v):
    return repr(float(v))


def save_dataset(ds, path, codebook_path=None):
    """Write the canonical CSV (plus a codebook sidecar when categoricals exist)."""
    path = Path(path)
    header = ["y", "delta", "cluster"] + (["a"] if ds.a is not None else []) + list(ds.column_names)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [_fmt(ds.y[i]), str(int(ds.delta[i])), str(int(ds.cluster[i]))]
            if ds.a is not None:
                row.append(str(int(ds.a[i])))
            for j, name in enumerate(ds.column_names):
                v = ds.X[i, j]
                if np.isnan(v):
                    row.append("NA")
                elif ds.is_categorical[j]:
                    row.append(str(ds.codebooks[name][int(v)]) if name in ds.codebooks else str(int(v)))
                else:
                    row.append(_fmt(v))
            w.writerow(row)
    cat_names = [nm for nm, c in zip(ds.column_names, ds.is_categorical) if c]
    if cat_names:
        books = {nm: [str(x) for x in ds.codebooks.get(nm, range(int(np.nanmax(ds.X[:, j])) + 1))]
                 for j, nm in enumerate(ds.column_names) if ds.is_categorical[j]}
        sidecar = Path(codebook_path) if codebook_path else path.with_suffix(".codebook.json")
        sidecar.write_text(json.dumps(books, indent=2, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------- reports
def validate(ds):
    """Summary report: cluster sizes, censoring, missingness, arm counts."""
    mask = ds.mask
    report = {
        "n": int(ds.n),
        "K": ds.K,
        "cluster_sizes": ds.cluster_sizes.tolist(),
        "censoring_proportion": float(1.0 - ds.delta.mean()),
        "missingness": {nm: float(mask[:, j].mean()) for j, nm in enumerate(ds.column_names)},
        "row_missingness": float(mask.any(axis=1).mean()) if ds.L else 0.0,
        "cell_missingness": float(mask.mean()) if ds.L else 0.0,
    }
    if ds.a is not None:
        report["arm_counts"] = np.bincount(ds.a, minlength=ds.J + 1)[1:].tolist()
    return report


def bootstrap_resample(ds, seed):
    """n rows drawn with replacement over the whole sample; rows keep their cluster."""
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, ds.n, size=ds.n)
    return ds.take(rows, relabel=True)


def relabel_clusters(cluster):
    """Map cluster labels onto 1..K' preserving their order (a subset of rows
    can drop whole clusters)."""
    cluster = np.asarray(cluster)
    present = np.unique(cluster)
    lookup = np.zeros(cluster.max() + 1, dtype=int)
    lookup[present] = np.arange(1, present.size + 1)
    return lookup[cluster]
