"""Named statistics and the bootstrap result container."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

LOG_KINDS = ("messages", "warnings", "errors")


@dataclass(frozen=True)
class NamedStatistic:
    """Ordered named values; ``kinds`` tags each as fixed/variance/other."""

    names: tuple[str, ...]
    values: np.ndarray
    kinds: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        names = tuple(str(n) for n in self.names)
        if values.ndim != 1 or len(values) != len(names):
            raise ValueError(f"{len(names)} names for {values.shape} values")
        kinds = self.kinds if self.kinds is not None else ("other",) * len(names)
        if len(kinds) != len(names):
            raise ValueError("kinds must match names")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kinds", tuple(kinds))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def as_statistic(value) -> NamedStatistic:
    """Normalize what a statistic function returned.

    Accepts a :class:`NamedStatistic`, a mapping, a sequence of
    ``(name, value)`` pairs, a pandas Series, a bare scalar or a 1-d array
    (unnamed values get empty names).
    """
    if isinstance(value, NamedStatistic):
        return value
    if isinstance(value, pd.Series):
        return NamedStatistic(tuple(map(str, value.index)), value.to_numpy(dtype=float))
    if isinstance(value, Mapping):
        return NamedStatistic(tuple(value.keys()), list(value.values()))
    if np.isscalar(value):
        return NamedStatistic(("",), [float(value)])
    arr = np.asarray(value, dtype=object)
    if arr.ndim == 2 and arr.shape[1] == 2:
        return NamedStatistic(tuple(arr[:, 0]), arr[:, 1].astype(float))
    arr = np.asarray(value, dtype=float).ravel()
    return NamedStatistic(("",) * len(arr) if len(arr) == 1 else tuple(f"V{k + 1}" for k in range(len(arr))), arr)


def compute_stats(names, observed, replicates) -> pd.DataFrame:
    """observed / rep_mean / se / bias over the non-missing replicate rows."""
    rep = np.asarray(replicates, dtype=float).reshape(-1, len(names))
    ok = rep[~np.isnan(rep).any(axis=1)]
    n_ok = ok.shape[0]
    mean = ok.mean(axis=0) if n_ok else np.full(len(names), np.nan)
    se = ok.std(axis=0, ddof=1) if n_ok >= 2 else np.full(len(names), np.nan)
    observed = np.asarray(observed, dtype=float)
    return pd.DataFrame(
        {"term": list(names), "observed": observed, "rep_mean": mean, "se": se, "bias": mean - observed}
    )


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Observed statistic, B x p replicate matrix and per-replicate logs.

    Failed replicates are rows of NaN.  ``stats`` is recomputed from the
    replicates on construction.
    """

    names: tuple[str, ...]
    observed: np.ndarray
    replicates: np.ndarray
    type: str
    seeds: tuple[int, ...]
    logs: tuple[dict, ...]
    kinds: tuple[str, ...] | None = None
    model_ref: object = None
    data_ref: object = None
    call_description: str = ""
    stats: pd.DataFrame = field(init=False, repr=False)

    def __post_init__(self):
        names = tuple(self.names)
        rep = np.array(self.replicates, dtype=np.float64).reshape(-1, len(names))
        rep.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=np.float64))
        object.__setattr__(self, "replicates", rep)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "logs", tuple(self.logs))
        object.__setattr__(self, "kinds", tuple(self.kinds) if self.kinds else ("other",) * len(names))
        if len(self.seeds) != rep.shape[0] or len(self.logs) != rep.shape[0]:
            raise ValueError("seeds and logs must have one entry per replicate")
        object.__setattr__(self, "stats", compute_stats(names, self.observed, rep))

    @property
    def B(self) -> int:
        return self.replicates.shape[0]

    @property
    def ok_mask(self) -> np.ndarray:
        return ~np.isnan(self.replicates).any(axis=1)

    @property
    def n_ok(self) -> int:
        return int(self.ok_mask.sum())

    def log_counts(self) -> dict[str, int]:
        return {k: sum(len(entry.get(k) or ()) for entry in self.logs) for k in LOG_KINDS}

    def most_common(self, kind: str) -> str | None:
        c = Counter(t for entry in self.logs for t in (entry.get(kind) or ()))
        return c.most_common(1)[0][0] if c else None

    def format_summary(self) -> str:
        table = self.stats.rename(columns={"rep_mean": "rep.mean"})
        if all(n == "" for n in self.names):
            table = table.drop(columns="term")
        table.index = range(1, len(table) + 1)
        counts = self.log_counts()
        lines = [
            f"Bootstrap type: {self.type} ",
            "",
            f"Number of resamples: {self.B} ",
            "",
            table.to_string(float_format=lambda v: f"{v:.7g}"),
            "",
            f"There were {counts['messages']} messages, {counts['warnings']} warnings, "
            f"and {counts['errors']} errors.",
        ]
        for kind in LOG_KINDS:
            most = self.most_common(kind)
            lines += ["", f"The most commonly occurring {kind[:-1]} was: {most if most else 'NULL'}"]
        return "\n".join(lines)

    def __str__(self):
        return self.format_summary()

    # -- serialization ----------------------------------------------------
    def replicates_csv(self) -> str:
        lines = [",".join(_csv_field(n) for n in self.names)]
        for row in self.replicates:
            lines.append("" if np.isnan(row).any() else ",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def logs_records(self) -> list[dict]:
        return [
            {"replicate": b + 1, "kind": kind[:-1], "text": text}
            for b, entry in enumerate(self.logs)
            for kind in LOG_KINDS
            for text in (entry.get(kind) or ())
        ]

    def stats_record(self) -> dict:
        return {
            "type": self.type,
            "B": self.B,
            "call": self.call_description,
            "names": list(self.names),
            "kinds": list(self.kinds),
            "observed": [float(v) for v in self.observed],
            "seeds": list(self.seeds),
            "counts": self.log_counts(),
            "stats": [
                {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
                for row in self.stats.to_dict(orient="records")
            ],
        }

    def write(self, out_dir) -> None:
        """Write stats.json, replicates.csv and logs.json into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(json.dumps(self.stats_record(), indent=2))
        (out / "replicates.csv").write_text(self.replicates_csv())
        (out / "logs.json").write_text(json.dumps(self.logs_records(), indent=2))


def _csv_field(name: str) -> str:
    if any(ch in name for ch in ',"\n'):
        return '"' + name.replace('"', '""') + '"'
    return name


def read_result(out_dir) -> BootstrapResult:
    """Load a result written by :meth:`BootstrapResult.write`."""
    out = Path(out_dir)
    rec = json.loads((out / "stats.json").read_text())
    names = rec["names"]
    rows = []
    with open(out / "replicates.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for line in reader:
            if not line or all(v == "" for v in line):
                rows.append([math.nan] * len(names))
            else:
                rows.append([float(v) for v in line])
    if len(rows) != rec["B"]:
        raise ValueError(f"replicates.csv has {len(rows)} rows, stats.json says B={rec['B']}")
    logs = [{k: None for k in LOG_KINDS} for _ in range(rec["B"])]
    log_path = out / "logs.json"
    if log_path.exists():
        for item in json.loads(log_path.read_text()):
            entry = logs[item["replicate"] - 1]
            key = item["kind"] + "s"
            entry[key] = (entry[key] or []) + [item["text"]]
    return BootstrapResult(
        names=tuple(names),
        observed=np.array(rec["observed"], dtype=float),
        replicates=np.array(rows, dtype=float).reshape(-1, len(names)),
        type=rec["type"],
        seeds=tuple(rec["seeds"]),
        logs=tuple(logs),
        kinds=tuple(rec["kinds"]),
        call_description=rec.get("call", ""),
    )
