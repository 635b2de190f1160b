"""Bootstrap generators for two-level LME fits.

Every generator turns a fitted model plus a random stream into a new
:class:`~mixedboot.core.GroupedData`; :func:`bootstrap` refits each draw,
evaluates the statistic and collects the replicate matrix.

Replicate ``b`` always uses the stream seeded by ``replicate_seed(master, b)``,
so results do not depend on execution order or the number of workers.
"""

from __future__ import annotations

import multiprocessing
import secrets
import warnings
from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np

from .core import GroupedData, simulate_stacked
from .errors import (
    ConfigurationError,
    LeverageOne,
    NonPositiveVarianceComponent,
    SingularBootstrapCovariance,
    ZeroReplicateMean,
)
from .reml import FittedModel, fit_reml
from .residuals import ReflatedResiduals, center_and_reflate, model_residuals, nonparametric_residuals
from .results import BootstrapResult, NamedStatistic, as_statistic

TYPES = ("case", "parametric", "residual", "reb", "wild")
HCCME = ("hc2", "hc3")
AUX_DISTS = ("f1", "f2")

SQRT5 = np.sqrt(5.0)
F1_LOW = -(SQRT5 - 1) / 2
F1_HIGH = (SQRT5 + 1) / 2
F1_P_LOW = (SQRT5 + 1) / (2 * SQRT5)

StatisticFn = Callable[[FittedModel], object]


def replicate_seed(master_seed: int, index: int) -> int:
    """64-bit seed of replicate ``index``: a counter-keyed split of ``master_seed``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def replicate_seeds(master_seed: int, B: int, start: int = 0) -> list[int]:
    return [replicate_seed(master_seed, b) for b in range(start, start + B)]


@dataclass(frozen=True)
class BootstrapConfig:
    type: str
    B: int
    resample: tuple[bool, bool] | None = None
    reb_variant: int | None = None
    hccme: str | None = None
    aux_dist: str | None = None
    master_seed: int | None = None

    def __post_init__(self):
        if self.type not in TYPES:
            raise ConfigurationError(f"unknown bootstrap type {self.type!r}; expected one of {TYPES}")
        if int(self.B) < 1:
            raise ConfigurationError("B must be at least 1")
        object.__setattr__(self, "B", int(self.B))

        def _only_for(option, owner):
            if getattr(self, option) is not None and self.type != owner:
                raise ConfigurationError(f"{option} applies only to type={owner!r}")

        if self.type == "case":
            if self.resample is None:
                raise ConfigurationError("type='case' requires resample=(level1, level2)")
            flags = tuple(bool(v) for v in self.resample)
            if len(flags) != 2:
                raise ConfigurationError("resample must have one flag per level (2 for two-level models)")
            if not any(flags):
                raise ConfigurationError("resample must enable at least one level")
            object.__setattr__(self, "resample", flags)
        else:
            _only_for("resample", "case")
        if self.type == "reb":
            if self.reb_variant not in (0, 1, 2):
                raise ConfigurationError("type='reb' requires reb_variant in {0, 1, 2}")
        else:
            _only_for("reb_variant", "reb")
        if self.type == "wild":
            if self.hccme not in HCCME:
                raise ConfigurationError(f"type='wild' requires hccme in {HCCME}")
            if self.aux_dist not in AUX_DISTS:
                raise ConfigurationError(f"type='wild' requires aux_dist in {AUX_DISTS}")
        else:
            _only_for("hccme", "wild")
            _only_for("aux_dist", "wild")
        seed = secrets.randbits(64) if self.master_seed is None else int(self.master_seed)
        if not 0 <= seed < 2**64:
            raise ConfigurationError("master_seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "master_seed", seed)

    def describe(self) -> str:
        extras = {
            "case": f", resample={list(self.resample or ())}",
            "reb": f", reb_type={self.reb_variant}",
            "wild": f", hccme={self.hccme!r}, aux_dist={self.aux_dist!r}",
        }.get(self.type, "")
        return f"bootstrap(type={self.type!r}, B={self.B}{extras}, seed={self.master_seed})"


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def case_resample(data: GroupedData, flags, rng: np.random.Generator) -> GroupedData:
    """Resample clusters (level 2), rows within clusters (level 1), or both.

    ``flags = (rows, clusters)``.  Resampled clusters get fresh ids 1..g;
    with rows-only resampling every cluster keeps its id and size.
    """
    rows_flag, clusters_flag = (bool(v) for v in flags)
    if not (rows_flag or clusters_flag):
        raise ConfigurationError("resample must enable at least one level")
    g = data.g
    if clusters_flag:
        chosen = rng.integers(0, g, size=g)
        ids = [str(k + 1) for k in range(g)]
    else:
        chosen = np.arange(g)
        ids = data.cluster_ids
    sizes = data.sizes[chosen]
    starts = np.repeat(data.offsets[chosen], sizes)
    if rows_flag:
        within = rng.integers(0, np.repeat(sizes, sizes))
    else:
        within = np.arange(sizes.sum()) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    idx = starts + within
    return GroupedData.from_stacked(
        ids, sizes, data.y[idx], data.X[idx], data.Z[idx], data.fixed_names, data.random_names
    )


def aux_draws(dist: str, size, rng: np.random.Generator) -> np.ndarray:
    """Mean-zero, unit-variance two-point weights for the wild bootstrap."""
    u = rng.random(size)
    if dist == "f1":
        return np.where(u < F1_P_LOW, F1_LOW, F1_HIGH)
    if dist == "f2":
        return np.where(u < 0.5, -1.0, 1.0)
    raise ConfigurationError(f"unknown auxiliary distribution {dist!r}")


def _add_ranef(data: GroupedData, U: np.ndarray) -> np.ndarray:
    return np.einsum("nq,nq->n", data.Z, U[data.cluster_index])


class _Generator:
    def __init__(self, model: FittedModel):
        self.model = model
        self.data = model.data
        self.fitted = model.fitted()

    def response(self, rng) -> np.ndarray:
        raise NotImplementedError

    def draw(self, rng) -> GroupedData:
        return self.data.with_response(self.response(rng))


class CaseGenerator(_Generator):
    def __init__(self, model, flags):
        super().__init__(model)
        self.flags = flags

    def draw(self, rng):
        return case_resample(self.data, self.flags, rng)


class ParametricGenerator(_Generator):
    def response(self, rng):
        return simulate_stacked(self.data, self.model.params, rng)


class ResidualGenerator(_Generator):
    def __init__(self, model, reflated: ReflatedResiduals | None = None):
        super().__init__(model)
        if reflated is None:
            reflated = center_and_reflate(model_residuals(model), model)
        self.reflated = reflated

    def response(self, rng):
        data = self.data
        u = self.reflated.ranef_star[rng.integers(0, data.g, size=data.g)]
        pool = self.reflated.cond_star
        e = pool[rng.integers(0, len(pool), size=data.n_total)]
        return self.fitted + _add_ranef(data, u) + e


class RebGenerator(_Generator):
    """REB/0 draws; variant 1 resamples centered and reflated quantities."""

    def __init__(self, model, variant: int):
        super().__init__(model)
        resids = nonparametric_residuals(model)
        if variant == 1:
            ref = center_and_reflate(resids, model)
            self.ranef, self.errors = ref.ranef_star, ref.cond_star
        else:
            self.ranef, self.errors = resids.ranef, resids.conditional
        self.variant = variant

    def response(self, rng, return_donors: bool = False):
        data = self.data
        g = data.g
        b = self.ranef[rng.integers(0, g, size=g)]
        donors = rng.integers(0, g, size=g)
        row_donor = donors[data.cluster_index]
        pick = data.offsets[row_donor] + rng.integers(0, data.sizes[row_donor])
        y = self.fitted + _add_ranef(data, b) + self.errors[pick]
        return (y, donors) if return_donors else y


def leverages(X: np.ndarray) -> np.ndarray:
    """Diagonal of the orthogonal projection X (X'X)^{-1} X'."""
    Q, _ = np.linalg.qr(X)
    return np.einsum("ij,ij->i", Q, Q)


class WildGenerator(_Generator):
    def __init__(self, model, hccme: str, aux_dist: str):
        super().__init__(model)
        if hccme not in HCCME:
            raise ConfigurationError(f"hccme must be one of {HCCME}")
        if aux_dist not in AUX_DISTS:
            raise ConfigurationError(f"aux_dist must be one of {AUX_DISTS}")
        h = leverages(self.data.X)
        if np.any(h >= 1 - 1e-12):
            raise LeverageOne(f"{int(np.sum(h >= 1 - 1e-12))} observation(s) have leverage 1")
        r = model.marginal_residuals()
        self.v = r / np.sqrt(1 - h) if hccme == "hc2" else r / (1 - h)
        self.aux_dist = aux_dist

    def response(self, rng):
        w = aux_draws(self.aux_dist, self.data.g, rng)
        return self.fitted + self.v * w[self.data.cluster_index]


def parametric_resample(model: FittedModel, rng) -> list[np.ndarray]:
    return model.data.split(ParametricGenerator(model).response(rng))


def residual_resample(model: FittedModel, reflated: ReflatedResiduals, rng) -> list[np.ndarray]:
    return model.data.split(ResidualGenerator(model, reflated).response(rng))


def reb_resample(model: FittedModel, variant: int, rng) -> list[np.ndarray]:
    """One REB draw.  Variant 2 draws like REB/0; its post-processing runs in :func:`bootstrap`."""
    if variant not in (0, 1, 2):
        raise ConfigurationError("reb variant must be 0, 1 or 2")
    return model.data.split(RebGenerator(model, 1 if variant == 1 else 0).response(rng))


def wild_resample(model: FittedModel, hccme: str, aux: str, rng) -> list[np.ndarray]:
    return model.data.split(WildGenerator(model, hccme, aux).response(rng))


def make_generator(model: FittedModel, config: BootstrapConfig) -> _Generator:
    if config.type == "case":
        return CaseGenerator(model, config.resample)
    if config.type == "parametric":
        return ParametricGenerator(model)
    if config.type == "residual":
        return ResidualGenerator(model)
    if config.type == "reb":
        return RebGenerator(model, 1 if config.reb_variant == 1 else 0)
    return WildGenerator(model, config.hccme, config.aux_dist)


# ---------------------------------------------------------------------------
# REB/2 post-processing
# ---------------------------------------------------------------------------


def uncorrelate_varcomps(replicates) -> np.ndarray:
    """Remove the correlation between bootstrap variance components.

    Works on the log scale: each row is whitened with the symmetric inverse
    square root of the column covariance, rescaled by the column standard
    deviations, shifted back to the column means and exponentiated.
    """
    X = np.asarray(replicates, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    B, nu = X.shape
    if not np.all(X > 0):
        raise NonPositiveVarianceComponent("variance-component replicates must be strictly positive")
    if B <= nu:
        raise SingularBootstrapCovariance(f"need more replicates than components (B={B}, nu={nu})")
    S = np.log(X)
    M = S.mean(axis=0)
    sd = S.std(axis=0, ddof=1)
    C = np.atleast_2d(np.cov(S, rowvar=False, ddof=1))
    evals, evecs = np.linalg.eigh(C)
    if evals.min() <= 1e-12 * max(evals.max(), np.finfo(float).tiny):
        raise SingularBootstrapCovariance("bootstrap covariance of log variance components is singular")
    C_inv_half = (evecs / np.sqrt(evals)) @ evecs.T
    return np.exp(M + ((S - M) @ C_inv_half) * sd)


def recenter_estimates(result: BootstrapResult) -> BootstrapResult:
    """Mean-correct fixed-effect columns and ratio-correct variance columns."""
    if any(k not in ("fixed", "variance") for k in result.kinds):
        raise ConfigurationError("recentering needs every column tagged as fixed or variance")
    rep = np.array(result.replicates)
    ok = result.ok_mask
    for j, kind in enumerate(result.kinds):
        col = rep[ok, j]
        avg = col.mean()
        if kind == "fixed":
            rep[ok, j] = result.observed[j] + col - avg
        else:
            if avg == 0:
                raise ZeroReplicateMean(f"replicate mean of {result.names[j]!r} is zero")
            rep[ok, j] = col * (result.observed[j] / avg)
    return replace(result, replicates=rep)


def _reb2_postprocess(result: BootstrapResult) -> BootstrapResult:
    var_cols = [j for j, k in enumerate(result.kinds) if k == "variance"]
    rep = np.array(result.replicates)
    ok = result.ok_mask
    rep[np.ix_(ok, var_cols)] = uncorrelate_varcomps(rep[np.ix_(ok, var_cols)])
    return recenter_estimates(replace(result, replicates=rep))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

BOUNDARY_MESSAGE = "boundary (singular) fit: a variance component was estimated as zero"


def _one_replicate(gen: _Generator, f: StatisticFn, names: tuple, seed: int):
    log = {"messages": None, "warnings": None, "errors": None}
    row = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            fit = fit_reml(gen.draw(np.random.default_rng(seed)))
            stat = as_statistic(f(fit))
            if stat.names != names:
                raise ValueError(f"statistic returned names {stat.names}, expected {names}")
            row = stat.values
            if fit.boundary:
                log["messages"] = [BOUNDARY_MESSAGE]
        except Exception as exc:  # noqa: BLE001 - every refit failure is logged, never raised
            log["errors"] = [f"{type(exc).__name__}: {exc}"]
    if caught:
        log["warnings"] = [str(w.message) for w in caught]
    return row, log


_SHARED: tuple | None = None


def _run_shard(args):
    shard, workers = args
    gen, f, names, seeds = _SHARED
    return [(b, *_one_replicate(gen, f, names, seeds[b])) for b in range(shard, len(seeds), workers)]


def _run_replicates(gen, f, names, seeds, workers: int):
    global _SHARED
    B = len(seeds)
    workers = max(1, min(int(workers), B))
    out = []
    if workers == 1 or "fork" not in multiprocessing.get_all_start_methods():
        for b, seed in enumerate(seeds):
            out.append((b, *_one_replicate(gen, f, names, seed)))
    else:
        _SHARED = (gen, f, names, seeds)
        try:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(workers) as pool:
                for shard in pool.map(_run_shard, [(k, workers) for k in range(workers)]):
                    out.extend(shard)
        finally:
            _SHARED = None
    out.sort(key=lambda item: item[0])
    return out


def bootstrap(model: FittedModel, f: StatisticFn, config: BootstrapConfig, *, workers: int = 1) -> BootstrapResult:
    """Run ``config.B`` bootstrap replicates of statistic ``f``.

    Replicates whose refit or statistic fails are kept as all-NaN rows with
    the error recorded in their log; they never abort the run.  With
    ``workers > 1`` replicates are sharded round-robin across processes
    (the statistic must then be importable or defined before the call).
    """
    observed = as_statistic(f(model))
    if config.type == "reb" and config.reb_variant == 2:
        kinds = set(observed.kinds)
        if kinds != {"fixed", "variance"}:
            raise ConfigurationError("REB/2 requires the 'all parameters' statistic (extract_parameters)")
    gen = make_generator(model, config)
    seeds = replicate_seeds(config.master_seed, config.B)
    rows = _run_replicates(gen, f, observed.names, seeds, workers)

    p = len(observed.names)
    rep = np.full((config.B, p), np.nan)
    logs = []
    for b, row, log in rows:
        if row is not None:
            rep[b] = row
        logs.append(log)
    result = BootstrapResult(
        names=observed.names,
        observed=observed.values,
        replicates=rep,
        type=config.type,
        seeds=seeds,
        logs=logs,
        kinds=observed.kinds,
        model_ref=model,
        data_ref=model.data,
        call_description=config.describe(),
    )
    if config.type == "reb" and config.reb_variant == 2:
        result = _reb2_postprocess(result)
    return result


__all__ = [
    "BootstrapConfig",
    "NamedStatistic",
    "aux_draws",
    "bootstrap",
    "case_resample",
    "leverages",
    "parametric_resample",
    "reb_resample",
    "recenter_estimates",
    "replicate_seed",
    "residual_resample",
    "uncorrelate_varcomps",
    "wild_resample",
]
