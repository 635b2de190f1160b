"""Bootstrap summaries, confidence intervals, merging and builtin statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import IncompatibleResults, InsufficientReplicates, NotRandomInterceptModel, UnknownIntervalType
from .reml import FittedModel
from .results import BootstrapResult, NamedStatistic, compute_stats

INTERVAL_TYPES = ("norm", "basic", "perc")


def summarize(result: BootstrapResult) -> pd.DataFrame:
    """Per-statistic observed, rep_mean, se and bias."""
    if result.n_ok < 2:
        raise InsufficientReplicates(f"need at least 2 successful replicates, have {result.n_ok}")
    return compute_stats(result.names, result.observed, result.replicates)


def boot_quantile(sorted_values: np.ndarray, prob: float) -> float:
    """Order statistic at position (B + 1) * prob, linearly interpolated.

    The position is clamped to [1, B] (1-based).
    """
    B = len(sorted_values)
    pos = min(max((B + 1) * prob, 1.0), float(B))
    lo = int(np.floor(pos))
    frac = pos - lo
    if frac == 0.0 or lo >= B:
        return float(sorted_values[lo - 1])
    return float(sorted_values[lo - 1] + frac * (sorted_values[lo] - sorted_values[lo - 1]))


@dataclass(frozen=True)
class IntervalRow:
    term: str
    estimate: float
    lower: float
    upper: float
    type: str
    level: float


@dataclass(frozen=True)
class IntervalTable:
    rows: tuple[IntervalRow, ...]

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.rows], columns=list(IntervalRow.__dataclass_fields__))

    def to_records(self) -> list[dict]:
        return [dict(r.__dict__) for r in self.rows]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(IntervalRow.__dataclass_fields__))
        for r in self.rows:
            w.writerow([r.term, repr(r.estimate), repr(r.lower), repr(r.upper), r.type, repr(r.level)])
        return buf.getvalue()

    def __str__(self):
        return self.to_frame().to_string()


def confint(result: BootstrapResult, types=INTERVAL_TYPES, level: float = 0.95) -> IntervalTable:
    """Normal, basic and percentile bootstrap intervals.

    Rows are grouped by interval type (in the order requested), then by
    statistic.  Failed replicate rows are dropped as whole rows.
    """
    if isinstance(types, str):
        types = (types,)
    types = tuple(types)
    bad = [t for t in types if t not in INTERVAL_TYPES]
    if bad:
        raise UnknownIntervalType(f"unknown interval type(s) {bad}; choose from {INTERVAL_TYPES}")
    if not 0.5 < level < 1:
        raise ValueError("level must lie in (0.5, 1)")
    reps = result.replicates[result.ok_mask]
    n_ok = reps.shape[0]
    if n_ok < 2:
        raise InsufficientReplicates(f"need at least 2 successful replicates, have {n_ok}")
    if n_ok < 20 and any(t != "norm" for t in types):
        raise InsufficientReplicates(f"quantile intervals need at least 20 successful replicates, have {n_ok}")

    alpha = 1 - level
    z = norm.ppf(1 - alpha / 2)
    t0 = result.observed
    mean = reps.mean(axis=0)
    se = reps.std(axis=0, ddof=1)
    bias = mean - t0
    rows = []
    for kind in types:
        for j, name in enumerate(result.names):
            if kind == "norm":
                centre = t0[j] - bias[j]
                lo, hi = centre - z * se[j], centre + z * se[j]
            else:
                srt = np.sort(reps[:, j])
                q_lo = boot_quantile(srt, alpha / 2)
                q_hi = boot_quantile(srt, 1 - alpha / 2)
                lo, hi = (q_lo, q_hi) if kind == "perc" else (2 * t0[j] - q_hi, 2 * t0[j] - q_lo)
            rows.append(IntervalRow(name, float(t0[j]), float(lo), float(hi), kind, float(level)))
    return IntervalTable(tuple(rows))


def combine(results) -> BootstrapResult:
    """Concatenate independent bootstrap runs of the same statistic and model."""
    results = list(results)
    if len(results) < 2:
        raise IncompatibleResults("combine needs at least two results")
    first = results[0]
    for other in results[1:]:
        if other.type != first.type:
            raise IncompatibleResults(f"bootstrap types differ: {first.type!r} vs {other.type!r}")
        if other.names != first.names:
            raise IncompatibleResults("statistic names differ")
        if not np.array_equal(other.observed, first.observed, equal_nan=True):
            raise IncompatibleResults("observed statistics differ; results come from different models")
        if first.model_ref is not None and other.model_ref is not None and other.model_ref is not first.model_ref:
            if not np.array_equal(other.model_ref.data.y, first.model_ref.data.y):
                raise IncompatibleResults("results were generated from different data")
    return BootstrapResult(
        names=first.names,
        observed=first.observed,
        replicates=np.vstack([r.replicates for r in results]),
        type=first.type,
        seeds=[s for r in results for s in r.seeds],
        logs=[entry for r in results for entry in r.logs],
        kinds=first.kinds,
        model_ref=first.model_ref,
        data_ref=first.data_ref,
        call_description=" + ".join(r.call_description for r in results),
    )


# ---------------------------------------------------------------------------
# builtin statistics
# ---------------------------------------------------------------------------


def fixef(model: FittedModel) -> NamedStatistic:
    names = model.data.fixed_names
    return NamedStatistic(names, model.params.beta, ("fixed",) * len(names))


def varcomp(model: FittedModel) -> NamedStatistic:
    entries = model.variance_components().entries
    return NamedStatistic(tuple(n for n, _ in entries), [v for _, v in entries], ("variance",) * len(entries))


def extract_parameters(model: FittedModel) -> NamedStatistic:
    """Fixed effects followed by the variance components (lower triangle of D, then sigma2)."""
    fe, vc = fixef(model), varcomp(model)
    return NamedStatistic(fe.names + vc.names, np.concatenate([fe.values, vc.values]), fe.kinds + vc.kinds)


def icc(model: FittedModel) -> NamedStatistic:
    """Intraclass correlation D_11 / (D_11 + sigma2) of a random-intercept model."""
    data = model.data
    if data.q != 1 or not np.all(data.Z == 1.0):
        raise NotRandomInterceptModel("icc needs a model whose only random effect is an intercept")
    tau = float(model.params.D[0, 0])
    return NamedStatistic(("icc",), [tau / (tau + model.params.sigma2)])


BUILTIN_STATISTICS = {
    "fixef": fixef,
    "varcomp": varcomp,
    "all": extract_parameters,
    "icc": icc,
}
