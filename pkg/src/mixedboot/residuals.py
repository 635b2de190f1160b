"""Marginal, conditional and random-effect residuals, and their reflation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTarget, SingularClusterDesign, SingularEmpiricalCovariance
from .reml import FittedModel, eblups


@dataclass(frozen=True, eq=False)
class ResidualSet:
    """Residual quantities of a fit.

    ``marginal`` and ``conditional`` are stacked in cluster order (use
    ``data.split`` for per-cluster pieces); ``ranef`` has one row per cluster.
    """

    data: object
    marginal: np.ndarray
    conditional: np.ndarray
    ranef: np.ndarray
    source: str  # "model_based" or "nonparametric"

    def per_cluster(self, which: str = "marginal") -> list[np.ndarray]:
        return self.data.split(getattr(self, which))

    def to_csv(self, path, ranef_path=None) -> None:
        """Write the long residual table and, optionally, the g x q ranef table."""
        data = self.data
        within = np.arange(data.n_total) - data.offsets[data.cluster_index]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster_id", "row_index", "marginal", "conditional"])
            for k in range(data.n_total):
                w.writerow([
                    data.cluster_ids[data.cluster_index[k]], int(within[k]),
                    repr(float(self.marginal[k])), repr(float(self.conditional[k])),
                ])
        if ranef_path is not None:
            with open(ranef_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["cluster_id", *data.random_names])
                for cid, row in zip(data.cluster_ids, self.ranef):
                    w.writerow([cid, *(repr(float(v)) for v in row)])


def model_residuals(model: FittedModel) -> ResidualSet:
    data = model.data
    r = model.marginal_residuals()
    U = eblups(model)
    e = r - np.einsum("nq,nq->n", data.Z, U[data.cluster_index])
    return ResidualSet(data, r, e, U, "model_based")


def nonparametric_residuals(model: FittedModel) -> ResidualSet:
    """Per-cluster least-squares projection of the marginal residuals onto Z_i."""
    data = model.data
    r = model.marginal_residuals()
    Ztr = data.cluster_sums(data.Z * r[:, None])
    U = np.empty((data.g, data.q))
    for i, (cid, ZtZ) in enumerate(zip(data.cluster_ids, data.ZtZ)):
        if data.sizes[i] < data.q or np.linalg.matrix_rank(ZtZ) < data.q:
            raise SingularClusterDesign(cid)
        U[i] = np.linalg.solve(ZtZ, Ztr[i])
    e = r - np.einsum("nq,nq->n", data.Z, U[data.cluster_index])
    return ResidualSet(data, r, e, U, "nonparametric")


@dataclass(frozen=True, eq=False)
class ReflatedResiduals:
    ranef_star: np.ndarray
    cond_star: np.ndarray
    transform_A: np.ndarray
    data: object = None

    def cond_per_cluster(self) -> list[np.ndarray]:
        return self.data.split(self.cond_star)


def reflation_transform(S: np.ndarray, D: np.ndarray) -> np.ndarray:
    """A = (L_D L_S^{-1})' so that A' S A = D (lower Cholesky factors)."""
    try:
        L_S = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularEmpiricalCovariance("empirical random-effect covariance is not positive definite") from exc
    try:
        L_D = np.linalg.cholesky(D)
    except np.linalg.LinAlgError as exc:
        raise DegenerateTarget("estimated random-effect covariance is singular") from exc
    return np.linalg.solve(L_S.T, L_D.T)


def center_and_reflate(resids: ResidualSet, model: FittedModel) -> ReflatedResiduals:
    """Center residual quantities and rescale them to the fitted covariances.

    Random effects are matched to D-hat through the Cholesky transform A;
    columns whose D-hat variance is exactly zero are returned as zeros.  The
    conditional residuals are pooled, centered and scaled by one factor so
    their mean square equals sigma2-hat.
    """
    U = resids.ranef - resids.ranef.mean(axis=0)
    g, q = U.shape
    D = model.params.D
    active = np.diag(D) > 0
    A = np.zeros((q, q))
    if active.any():
        Ua = U[:, active]
        S = Ua.T @ Ua / g
        A[np.ix_(active, active)] = reflation_transform(S, D[np.ix_(active, active)])
    U_star = U @ A

    e = resids.conditional - resids.conditional.mean()
    s_e = np.sqrt(np.mean(e * e))
    e_star = e * (np.sqrt(model.params.sigma2) / s_e) if s_e > 0 else e
    return ReflatedResiduals(U_star, e_star, A, resids.data)
