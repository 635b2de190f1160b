"""Data model for two-level nested linear mixed-effects problems.

A :class:`GroupedData` holds the response and the fixed/random design
matrices split by cluster.  It is built either directly from
:class:`ClusterBlock` objects or from a column table with
:func:`build_design`.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd

from .errors import (
    DimensionMismatch,
    EmptyCluster,
    MissingColumn,
    MissingValue,
    RankDeficientDesign,
)

INTERCEPT = "(Intercept)"


def _readonly(a, ndim: int) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != ndim:
        raise DimensionMismatch(f"expected a {ndim}-d array, got shape {a.shape}")
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ClusterBlock:
    """Response and design rows of a single cluster."""

    cluster_id: str
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = _readonly(self.y, 1)
        X = _readonly(self.X, 2)
        Z = _readonly(self.Z, 2)
        if not (len(y) == X.shape[0] == Z.shape[0]):
            raise DimensionMismatch(
                f"cluster {self.cluster_id!r}: y, X and Z have {len(y)}, {X.shape[0]} and {Z.shape[0]} rows"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return len(self.y)


class GroupedData:
    """Clustered response with fixed (X) and random (Z) designs.

    Immutable after construction.  Rows are stored stacked in cluster order;
    per-cluster blocks and cross products are derived lazily and cached, so
    one instance can back many refits that only differ in the response (see
    :meth:`with_response`).
    """

    def __init__(
        self,
        clusters: Sequence[ClusterBlock],
        fixed_names: Sequence[str] | None = None,
        random_names: Sequence[str] | None = None,
        *,
        check_rank: bool = True,
    ):
        clusters = tuple(clusters)
        if len(clusters) < 2:
            raise DimensionMismatch(f"need at least 2 clusters, got {len(clusters)}")
        p = clusters[0].X.shape[1]
        q = clusters[0].Z.shape[1]
        for c in clusters:
            if c.n < 1:
                raise EmptyCluster(f"cluster {c.cluster_id!r} has no rows")
            if c.X.shape[1] != p or c.Z.shape[1] != q:
                raise DimensionMismatch(
                    f"cluster {c.cluster_id!r} has {c.X.shape[1]} fixed and {c.Z.shape[1]} random columns, "
                    f"expected {p} and {q}"
                )
        sizes = np.array([c.n for c in clusters], dtype=np.intp)
        self._init(
            [c.cluster_id for c in clusters],
            sizes,
            np.concatenate([c.y for c in clusters]),
            np.concatenate([c.X for c in clusters]),
            np.concatenate([c.Z for c in clusters]),
            fixed_names,
            random_names,
        )
        self.__dict__["clusters"] = clusters
        if check_rank and np.linalg.matrix_rank(self.X) < p:
            raise RankDeficientDesign(f"stacked fixed design has rank < p = {p}")

    def _init(self, ids, sizes, y, X, Z, fixed_names, random_names):
        p, q = X.shape[1], Z.shape[1]
        if fixed_names is None:
            fixed_names = [f"x{j}" for j in range(p)]
        if random_names is None:
            random_names = [f"z{j}" for j in range(q)]
        if len(fixed_names) != p or len(random_names) != q:
            raise DimensionMismatch("column name counts do not match the design widths")
        for a in (y, X, Z, sizes):
            a.flags.writeable = False
        self._ids = tuple(ids)
        self.sizes = sizes
        self.y, self.X, self.Z = y, X, Z
        self.fixed_names = tuple(fixed_names)
        self.random_names = tuple(random_names)
        self.g, self.p, self.q = len(sizes), p, q
        self.n_total = int(sizes.sum())

    @classmethod
    def from_stacked(cls, cluster_ids, sizes, y, X, Z, fixed_names=None, random_names=None) -> GroupedData:
        """Build from stacked rows ordered by cluster (no rank check)."""
        sizes = np.array(sizes, dtype=np.intp)
        y = np.array(y, dtype=np.float64)
        X = np.array(X, dtype=np.float64)
        Z = np.array(Z, dtype=np.float64)
        if len(sizes) < 2 or np.any(sizes < 1):
            raise DimensionMismatch("need at least 2 non-empty clusters")
        if not (len(y) == X.shape[0] == Z.shape[0] == sizes.sum()):
            raise DimensionMismatch("row counts of y, X, Z and cluster sizes disagree")
        obj = cls.__new__(cls)
        obj._init(cluster_ids, sizes, y, X, Z, fixed_names, random_names)
        return obj

    @cached_property
    def clusters(self) -> tuple[ClusterBlock, ...]:
        return tuple(
            ClusterBlock(cid, self.y[a:b], self.X[a:b], self.Z[a:b])
            for cid, a, b in zip(self._ids, self.offsets[:-1], self.offsets[1:])
        )

    @property
    def column_names(self) -> dict[str, tuple[str, ...]]:
        return {"fixed": self.fixed_names, "random": self.random_names}

    @property
    def cluster_ids(self) -> list[str]:
        return list(self._ids)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offsets of each cluster in the stacked arrays (length g + 1)."""
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @cached_property
    def cluster_index(self) -> np.ndarray:
        """Cluster position of every stacked row."""
        return np.repeat(np.arange(self.g), self.sizes)

    def split(self, stacked: np.ndarray) -> list[np.ndarray]:
        """Split a stacked length-n vector into per-cluster pieces."""
        return np.split(np.asarray(stacked), self.offsets[1:-1])

    def cluster_sums(self, rows: np.ndarray) -> np.ndarray:
        """Sum a row-indexed array (n, ...) within each cluster -> (g, ...)."""
        return np.add.reduceat(rows, self.offsets[:-1], axis=0)

    # -- cross products reused by the fitter --------------------------------
    @cached_property
    def ZtZ(self) -> np.ndarray:
        Z = self.Z
        return self.cluster_sums(Z[:, :, None] * Z[:, None, :])

    @cached_property
    def ZtX(self) -> np.ndarray:
        return self.cluster_sums(self.Z[:, :, None] * self.X[:, None, :])

    @cached_property
    def XtX(self) -> np.ndarray:
        return self.X.T @ self.X

    @cached_property
    def Zty(self) -> np.ndarray:
        return self.cluster_sums(self.Z * self.y[:, None])

    @cached_property
    def Xty(self) -> np.ndarray:
        return self.X.T @ self.y

    _DESIGN_CACHE = ("offsets", "cluster_index", "ZtZ", "ZtX", "XtX")

    # -- derived data -----------------------------------------------------
    def with_response(self, y) -> GroupedData:
        """Same designs, new response (stacked vector or per-cluster list)."""
        if isinstance(y, np.ndarray) and y.ndim == 1:
            y = np.array(y, dtype=np.float64)
        else:
            pieces = list(y)
            if len(pieces) != self.g:
                raise DimensionMismatch(f"expected {self.g} response blocks, got {len(pieces)}")
            y = np.concatenate([np.asarray(v, dtype=np.float64) for v in pieces])
        if y.shape != (self.n_total,):
            raise DimensionMismatch(f"response has shape {y.shape}, expected ({self.n_total},)")
        new = GroupedData.__new__(GroupedData)
        new._init(self._ids, self.sizes, y, self.X, self.Z, self.fixed_names, self.random_names)
        for attr in self._DESIGN_CACHE:
            if attr in self.__dict__:
                new.__dict__[attr] = self.__dict__[attr]
        return new

    def to_dict(self) -> dict:
        return {
            "fixed_names": list(self.fixed_names),
            "random_names": list(self.random_names),
            "clusters": [
                {"cluster_id": c.cluster_id, "y": c.y.tolist(), "X": c.X.tolist(), "Z": c.Z.tolist()}
                for c in self.clusters
            ],
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    def __repr__(self):
        return f"GroupedData(g={self.g}, n_total={self.n_total}, p={self.p}, q={self.q})"


@dataclass(frozen=True, eq=False)
class Parameters:
    """Fixed effects, random-effects covariance D and residual variance."""

    beta: np.ndarray
    D: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta = _readonly(self.beta, 1)
        D = np.array(self.D, dtype=np.float64, ndmin=2)
        if D.shape[0] != D.shape[1]:
            raise DimensionMismatch(f"D must be square, got {D.shape}")
        if not np.allclose(D, D.T, rtol=0, atol=1e-12):
            raise ValueError("D is not symmetric")
        D = (D + D.T) / 2
        if D.size:
            evals, evecs = np.linalg.eigh(D)
            if evals.min() < -1e-10:
                raise ValueError(f"D has a negative eigenvalue {evals.min():.3g}")
            if evals.min() < 0:
                D = (evecs * np.clip(evals, 0, None)) @ evecs.T
                D = (D + D.T) / 2
        D.flags.writeable = False
        sigma2 = float(self.sigma2)
        if not sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {sigma2}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def q(self) -> int:
        return self.D.shape[0]

    def marginal_cov(self, Z: np.ndarray) -> np.ndarray:
        """V = Z D Z' + sigma2 I for one cluster."""
        Z = np.asarray(Z, dtype=float)
        return Z @ self.D @ Z.T + self.sigma2 * np.eye(Z.shape[0])

    def relative_factor(self) -> np.ndarray:
        """A matrix F with F F' = D / sigma2 (symmetric square root)."""
        evals, evecs = np.linalg.eigh(self.D / self.sigma2)
        return evecs * np.sqrt(np.clip(evals, 0, None))


def simulate_stacked(data: GroupedData, params: Parameters, rng: np.random.Generator) -> np.ndarray:
    """Draw a stacked response X beta + Z b + e.

    All g random-effect vectors are drawn first (cluster order), then all
    n_total errors, so the stream is consumed identically on every call.
    """
    if params.p != data.p or params.q != data.q:
        raise DimensionMismatch(
            f"parameters have p={params.p}, q={params.q}; data has p={data.p}, q={data.q}"
        )
    evals, evecs = np.linalg.eigh(params.D)
    root = evecs * np.sqrt(np.clip(evals, 0, None))
    b = rng.standard_normal((data.g, data.q)) @ root.T
    e = rng.standard_normal(data.n_total) * np.sqrt(params.sigma2)
    return data.X @ params.beta + np.einsum("nq,nq->n", data.Z, b[data.cluster_index]) + e


def simulate_response(data: GroupedData, params: Parameters, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-cluster responses y_i = X_i beta + Z_i b_i + e_i, b_i ~ N(0, D), e_i ~ N(0, sigma2 I)."""
    return data.split(simulate_stacked(data, params, rng))


# ---------------------------------------------------------------------------
# model specification and design construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Term:
    """Product of column factors, each raised to a power (``a:b``, ``x^2``)."""

    factors: tuple[tuple[str, int], ...]

    @property
    def columns(self) -> list[str]:
        return [name for name, _ in self.factors]

    @property
    def label(self) -> str:
        return ":".join(name if k == 1 else f"{name}^{k}" for name, k in self.factors)


@dataclass(frozen=True)
class ModelSpec:
    response: str
    fixed_terms: tuple[Term, ...]
    random_terms: tuple[Term, ...]
    group: str
    fixed_intercept: bool = True
    random_intercept: bool = True

    @property
    def columns(self) -> list[str]:
        cols = [self.response, self.group]
        for t in self.fixed_terms + self.random_terms:
            cols.extend(t.columns)
        return list(dict.fromkeys(cols))


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, str) and v.strip() in ("", "NA", "NaN", "nan"))


def _infer_column(name: str, values: Sequence) -> np.ndarray:
    vals = list(values)
    for i, v in enumerate(vals):
        if _is_missing(v) or (isinstance(v, float) and np.isnan(v)):
            raise MissingValue(f"missing value in column {name!r} at data row {i + 1}")
    try:
        return np.array([float(v) for v in vals], dtype=np.float64)
    except (TypeError, ValueError):
        return np.array([str(v) for v in vals], dtype=object)


def read_table(path) -> pd.DataFrame:
    """Read a CSV file; columns are numeric when every value parses as a float."""
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if raw.empty:
        raise ValueError(f"{path}: no data rows")
    return pd.DataFrame({col: _infer_column(col, raw[col].tolist()) for col in raw.columns})


def _label(v) -> str:
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v)


def _table_columns(table) -> dict[str, np.ndarray]:
    if isinstance(table, pd.DataFrame):
        items = {c: table[c].to_numpy() for c in table.columns}
    elif isinstance(table, Mapping):
        items = {c: np.asarray(v) for c, v in table.items()}
    else:
        raise TypeError(f"unsupported table type {type(table).__name__}")
    out = {}
    for name, col in items.items():
        if col.dtype.kind in "biuf":
            col = col.astype(np.float64)
            if np.isnan(col).any():
                raise MissingValue(f"missing value in column {name!r} at data row {int(np.isnan(col).argmax()) + 1}")
            out[str(name)] = col
        else:
            out[str(name)] = _infer_column(str(name), col.tolist())
    return out


def _term_columns(term: Term, cols: Mapping[str, np.ndarray]) -> list[tuple[str, np.ndarray]]:
    """Expand a term into named design columns (treatment-coded factors)."""
    pieces: list[list[tuple[str, np.ndarray]]] = []
    for name, power in term.factors:
        col = cols[name]
        if col.dtype == object:
            if power != 1:
                raise ValueError(f"cannot raise categorical column {name!r} to a power")
            levels = sorted(set(col.tolist()))
            pieces.append([(f"{name}{lvl}", (col == lvl).astype(np.float64)) for lvl in levels[1:]])
        else:
            pieces.append([(name if power == 1 else f"{name}^{power}", col**power)])
    out = [("", None)]
    for options in pieces:
        out = [
            (f"{ln}:{rn}" if ln else rn, rv if lv is None else lv * rv)
            for ln, lv in out
            for rn, rv in options
        ]
    return out


def _design(terms, intercept: bool, cols, n: int) -> tuple[list[str], np.ndarray]:
    names, columns = [], []
    if intercept:
        names.append(INTERCEPT)
        columns.append(np.ones(n))
    for term in terms:
        for name, values in _term_columns(term, cols):
            if name not in names:
                names.append(name)
                columns.append(values)
    mat = np.column_stack(columns) if columns else np.empty((n, 0))
    return names, mat


def build_design(table, spec: ModelSpec) -> GroupedData:
    """Encode a column table into a :class:`GroupedData` according to ``spec``.

    Clusters appear in first-appearance order with row order preserved.
    Categorical columns are dummy coded against their lexicographically
    first level, and the intercept column (when enabled) comes first.
    """
    cols = _table_columns(table)
    missing = [c for c in spec.columns if c not in cols]
    if missing:
        raise MissingColumn(f"column(s) not found in table: {', '.join(missing)}")
    n = len(cols[spec.response])
    if n == 0:
        raise ValueError("table has no rows")
    if cols[spec.response].dtype == object:
        raise ValueError(f"response column {spec.response!r} is not numeric")

    groups = [_label(v) for v in cols[spec.group]]
    order = list(dict.fromkeys(groups))
    if len(order) < 2:
        raise ValueError(f"group column {spec.group!r} needs at least 2 distinct levels")

    fixed_names, X = _design(spec.fixed_terms, spec.fixed_intercept, cols, n)
    random_names, Z = _design(spec.random_terms, spec.random_intercept, cols, n)
    if not fixed_names:
        raise ValueError("model has no fixed-effect columns")
    if not random_names:
        raise ValueError("model has no random-effect columns")
    y = cols[spec.response]

    labels = np.array(groups, dtype=object)
    blocks = []
    for gid in order:
        rows = np.flatnonzero(labels == gid)
        if rows.size == 0:
            raise EmptyCluster(f"cluster {gid!r} has no rows")
        blocks.append(ClusterBlock(gid, y[rows], X[rows], Z[rows]))
    return GroupedData(blocks, fixed_names, random_names)
