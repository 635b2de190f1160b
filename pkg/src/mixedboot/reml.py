"""REML estimation of two-level linear mixed-effects models.

The relative covariance D / sigma2 is written as Lambda Lambda' with Lambda
lower triangular and parameterized in log-Cholesky form: ``theta`` lists the
lower triangle row by row, diagonal entries on the log scale.  sigma2 and
beta are profiled out, leaving a q(q+1)/2-dimensional objective that is
minimized with a Nelder-Mead simplex.

Per-cluster blocks V_i* = I + Z_i Lambda Lambda' Z_i' are never formed; the
determinant and solves go through the q x q matrices I + Lambda' Z_i'Z_i Lambda.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from .core import GroupedData, Parameters
from .errors import DidNotConverge, NonFiniteObjective, RankDeficientDesign

LOG_DIAG_FLOOR = -11.5
STARTS = (0.0, math.log(0.1), math.log(10.0))
FATOL_REL = 1e-10
XATOL = 1e-8
MAXITER = 2000


def n_theta(q: int) -> int:
    return q * (q + 1) // 2


def _tril_rows(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major lower-triangle indices: (0,0), (1,0), (1,1), (2,0), ..."""
    rows = [i for i in range(q) for _ in range(i + 1)]
    cols = [j for i in range(q) for j in range(i + 1)]
    return np.array(rows, dtype=np.intp), np.array(cols, dtype=np.intp)


def theta_to_lambda(theta, q: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (n_theta(q),):
        raise ValueError(f"theta must have length {n_theta(q)} for q={q}")
    rows, cols = _tril_rows(q)
    lam = np.zeros((q, q))
    lam[rows, cols] = np.where(rows == cols, np.exp(theta), theta)
    return lam


def lambda_to_theta(lam: np.ndarray) -> np.ndarray:
    q = lam.shape[0]
    rows, cols = _tril_rows(q)
    theta = lam[rows, cols].astype(float)
    diag = rows == cols
    with np.errstate(divide="ignore"):
        theta[diag] = np.log(theta[diag])
    return theta


@dataclass(frozen=True)
class _Profile:
    """Quantities of the profiled REML problem at one Lambda."""

    deviance: float
    beta: np.ndarray
    sigma2: float
    XVX: np.ndarray  # X' V*^{-1} X


def _batched_cholesky(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factors of a stack (g, q, q) of small SPD matrices."""
    q = M.shape[-1]
    L = np.zeros_like(M)
    for j in range(q):
        d = M[:, j, j] - np.sum(L[:, j, :j] ** 2, axis=1)
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise NonFiniteObjective("cluster block is not positive definite")
        L[:, j, j] = np.sqrt(d)
        for i in range(j + 1, q):
            L[:, i, j] = (M[:, i, j] - np.sum(L[:, i, :j] * L[:, j, :j], axis=1)) / L[:, j, j]
    return L


def _batched_forward(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L X = B for a stack of lower-triangular L (g, q, q), B (g, q, k)."""
    X = np.empty_like(B)
    for i in range(L.shape[-1]):
        acc = B[:, i, :] - np.einsum("gj,gjk->gk", L[:, i, :i], X[:, :i, :]) if i else B[:, i, :]
        X[:, i, :] = acc / L[:, i, i, None]
    return X


def _profile(data: GroupedData, lam: np.ndarray) -> _Profile:
    n, p, q = data.n_total, data.p, data.q
    ZtZ, ZtX, Zty = data.ZtZ, data.ZtX, data.Zty

    if q == 1:
        lv = lam[0, 0]
        M = 1.0 + (lv * lv) * ZtZ[:, 0, 0]
        w = lv / np.sqrt(M)
        logdet_v = np.log(M).sum()
        C = ZtX[:, 0, :] * w[:, None]
        c = Zty[:, 0] * w
    else:
        lt = lam.T
        M = lt @ ZtZ @ lam
        M[:, range(q), range(q)] += 1.0
        L = _batched_cholesky(M)
        logdet_v = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum()
        C = _batched_forward(L, lt @ ZtX).reshape(-1, p)
        c = _batched_forward(L, (Zty @ lam)[..., None]).reshape(-1)
    XVX = data.XtX - C.T @ C
    XVy = data.Xty - c @ C

    RX, info = dpotrf(XVX, lower=1)
    if info != 0:
        raise NonFiniteObjective("X' V^-1 X is not positive definite")
    beta, _ = dpotrs(RX, XVy, lower=1)

    r = data.y - data.X @ beta
    cr = c - C @ beta
    rvr = float(r @ r - cr @ cr)
    dof = n - p
    if not rvr > 0:
        raise NonFiniteObjective(f"non-positive weighted residual sum of squares {rvr}")
    dev = float(logdet_v + 2.0 * np.log(RX.diagonal()).sum()) + dof * (math.log(rvr) + 1.0 - math.log(dof))
    if not math.isfinite(dev):
        raise NonFiniteObjective("profiled deviance is not finite")
    return _Profile(dev, beta, rvr / dof, XVX)


def _deviance_q1(data: GroupedData):
    """Closure computing the q = 1 deviance from the relative scale lambda.

    With s_i = lambda^2 / (1 + lambda^2 z_i'z_i), every Woodbury correction is
    a weighted sum of per-cluster outer products, so one evaluation costs a
    few length-g dot products plus a p x p Cholesky.
    """
    zz = data.ZtZ[:, 0, 0]
    zx = data.ZtX[:, 0, :]
    zy = data.Zty[:, 0]
    p = data.p
    P = np.einsum("gi,gj->gij", zx, zx).reshape(data.g, p * p)
    Q = zx * zy[:, None]
    zy2 = zy * zy
    XtX, Xty = data.XtX, data.Xty
    yy = float(data.y @ data.y)
    dof = data.n_total - p
    const = dof * (1.0 - math.log(dof))
    log = math.log

    def dev(lv: float) -> float:
        l2 = lv * lv
        M = 1.0 + l2 * zz
        s = l2 / M
        RX, info = dpotrf(XtX - (s @ P).reshape(p, p), lower=1)
        if info != 0:
            return math.inf
        b = Xty - s @ Q
        beta, _ = dpotrs(RX, b, lower=1)
        rvr = yy - float(s @ zy2) - float(b @ beta)
        if not rvr > 0:
            return math.inf
        return float(np.log(M).sum() + 2.0 * np.log(RX.diagonal()).sum()) + dof * log(rvr) + const

    return dev


def profiled_deviance(data: GroupedData, theta) -> float:
    """-2 x profiled restricted log-likelihood (constant 2*pi terms dropped)."""
    return _profile(data, theta_to_lambda(theta, data.q)).deviance


def _profile_dense(data: GroupedData, lam: np.ndarray) -> _Profile:
    """Reference evaluation with explicit n_i x n_i blocks."""
    n, p = data.n_total, data.p
    RLL = lam @ lam.T
    logdet_v = 0.0
    XVX = np.zeros((p, p))
    XVy = np.zeros(p)
    chols = []
    for c in data.clusters:
        V = np.eye(c.n) + c.Z @ RLL @ c.Z.T
        Lv = np.linalg.cholesky(V)
        chols.append(Lv)
        logdet_v += 2.0 * np.log(np.diag(Lv)).sum()
        A = np.linalg.solve(Lv, c.X)
        XVX += A.T @ A
        XVy += A.T @ np.linalg.solve(Lv, c.y)
    beta = np.linalg.solve(XVX, XVy)
    rvr = 0.0
    for c, Lv in zip(data.clusters, chols):
        a = np.linalg.solve(Lv, c.y - c.X @ beta)
        rvr += a @ a
    dof = n - p
    dev = logdet_v + np.linalg.slogdet(XVX)[1] + dof * math.log(rvr) + dof * (1 - math.log(dof))
    return _Profile(float(dev), beta, rvr / dof, XVX)


@dataclass(frozen=True, eq=False)
class FittedModel:
    """REML fit of a two-level LME model.

    ``theta`` holds the optimizer solution (log-Cholesky of D / sigma2);
    ``params.D`` has exact zeros wherever a diagonal of Lambda hit the floor.
    """

    data: GroupedData
    params: Parameters
    reml_criterion: float
    converged: bool
    boundary: bool
    n_iterations: int
    fixed_cov: np.ndarray
    theta: np.ndarray | None = None

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    @property
    def D(self) -> np.ndarray:
        return self.params.D

    @property
    def sigma2(self) -> float:
        return self.params.sigma2

    def fitted(self) -> np.ndarray:
        """Stacked X beta-hat."""
        return self.data.X @ self.params.beta

    def marginal_residuals(self) -> np.ndarray:
        """Stacked y - X beta-hat."""
        return self.data.y - self.fitted()

    def variance_components(self) -> VarianceComponents:
        return VarianceComponents.from_model(self)


@dataclass(frozen=True)
class VarianceComponents:
    entries: tuple[tuple[str, float], ...]

    @property
    def nu(self) -> int:
        return len(self.entries)

    @classmethod
    def from_model(cls, model: FittedModel) -> VarianceComponents:
        names = [name.strip("()") for name in model.data.random_names]
        D = model.params.D
        entries = []
        for i, j in zip(*_tril_rows(model.data.q)):
            label = f"var_{names[i]}" if i == j else f"cov_{names[j]}_{names[i]}"
            entries.append((label, float(D[i, j])))
        entries.append(("sigma2", model.params.sigma2))
        return cls(tuple(entries))


@dataclass
class _SimplexResult:
    x: list
    fun: float
    nit: int
    success: bool


def nelder_mead(f, x0, step: float = 0.5, xatol: float = XATOL, fatol_rel: float = FATOL_REL,
                maxiter: int = MAXITER) -> _SimplexResult:
    """Minimize ``f`` over R^k with the Nelder-Mead simplex.

    Standard coefficients (reflection 1, expansion 2, contraction 1/2,
    shrink 1/2).  Stops when every vertex lies within ``xatol`` of the best
    one in each coordinate and the spread of function values is at most
    ``fatol_rel * max(1, |f_best|)``.
    """
    k = len(x0)
    pts = [list(map(float, x0))]
    for i in range(k):
        v = list(pts[0])
        v[i] += step
        pts.append(v)
    vals = [f(v) for v in pts]
    nit = 0
    while True:
        order = sorted(range(k + 1), key=vals.__getitem__)
        pts = [pts[i] for i in order]
        vals = [vals[i] for i in order]
        best, worst = vals[0], vals[-1]
        x_spread = max(abs(a - b) for v in pts[1:] for a, b in zip(v, pts[0]))
        if (
            x_spread <= xatol
            and math.isfinite(best)
            and worst - best <= fatol_rel * max(1.0, abs(best))
        ):
            return _SimplexResult(pts[0], best, nit, True)
        if nit >= maxiter:
            return _SimplexResult(pts[0], best, nit, False)
        nit += 1

        cen = [sum(v[j] for v in pts[:-1]) / k for j in range(k)]
        xw = pts[-1]
        xr = [c + (c - w) for c, w in zip(cen, xw)]
        fr = f(xr)
        if fr < best:
            xe = [c + 2.0 * (c - w) for c, w in zip(cen, xw)]
            fe = f(xe)
            pts[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
            continue
        if fr < worst:
            xc = [c + 0.5 * (r - c) for c, r in zip(cen, xr)]
            fc = f(xc)
            if fc <= fr:
                pts[-1], vals[-1] = xc, fc
                continue
        else:
            xc = [c + 0.5 * (w - c) for c, w in zip(cen, xw)]
            fc = f(xc)
            if fc < worst:
                pts[-1], vals[-1] = xc, fc
                continue
        x_best = pts[0]
        for i in range(1, k + 1):
            pts[i] = [b + 0.5 * (v - b) for b, v in zip(x_best, pts[i])]
            vals[i] = f(pts[i])


def _objective(data: GroupedData, rows, cols, is_diag):
    q = data.q

    def objective(theta):
        t = [max(v, LOG_DIAG_FLOOR) if d else v for v, d in zip(theta, is_diag)]
        lam = np.zeros((q, q))
        lam[rows, cols] = [math.exp(v) if d else v for v, d in zip(t, is_diag)]
        try:
            return _profile(data, lam).deviance
        except NonFiniteObjective:
            return math.inf

    return objective


def fit_reml(data: GroupedData) -> FittedModel:
    """Fit ``data`` by REML from three deterministic starting points.

    Emits :class:`DidNotConverge` (and returns the best fit found, flagged
    ``converged=False``) when no start meets the tolerances.
    """
    n, p, q = data.n_total, data.p, data.q
    if n <= p + 1:
        raise ValueError(f"need n_total > p + 1 (n={n}, p={p})")
    if np.linalg.matrix_rank(data.X) < p:
        raise RankDeficientDesign(f"stacked fixed design has rank < p = {p}")
    rows, cols = _tril_rows(q)
    diag = rows == cols
    is_diag = diag.tolist()

    if q == 1:
        dev1 = _deviance_q1(data)

        def objective(theta):
            val = dev1(math.exp(max(theta[0], LOG_DIAG_FLOOR)))
            return val if math.isfinite(val) else math.inf
    else:
        objective = _objective(data, rows, cols, is_diag)

    best = None
    for start in STARTS:
        x0 = [start if d else 0.0 for d in is_diag]
        res = nelder_mead(objective, x0)
        if best is None or res.fun < best.fun:
            best = res

    theta = np.array(best.x, dtype=float)
    theta[diag] = np.maximum(theta[diag], LOG_DIAG_FLOOR)
    at_floor = diag & (theta <= LOG_DIAG_FLOOR)
    lam = theta_to_lambda(theta, q)
    lam[rows[at_floor], cols[at_floor]] = 0.0
    prof = _profile(data, lam)
    sigma2 = prof.sigma2
    D = sigma2 * (lam @ lam.T)
    fixed_cov = sigma2 * np.linalg.inv(prof.XVX)
    fixed_cov = (fixed_cov + fixed_cov.T) / 2

    if not best.success:
        warnings.warn(
            f"REML optimizer did not converge within {MAXITER} iterations", DidNotConverge, stacklevel=2
        )
    return FittedModel(
        data=data,
        params=Parameters(prof.beta, D, sigma2),
        reml_criterion=prof.deviance + (n - p) * math.log(2 * math.pi),
        converged=best.success,
        boundary=bool(at_floor.any()),
        n_iterations=best.nit,
        fixed_cov=fixed_cov,
        theta=theta,
    )


def eblups(model: FittedModel) -> np.ndarray:
    """Predicted random effects D Z_i' V_i^{-1} (y_i - X_i beta), one row per cluster."""
    data = model.data
    F = model.params.relative_factor()
    r = model.marginal_residuals()
    Ztr = data.cluster_sums(data.Z * r[:, None])
    M = np.einsum("ai,gab,bj->gij", F, data.ZtZ, F)
    M[:, range(data.q), range(data.q)] += 1.0
    u = np.linalg.solve(M, (Ztr @ F)[..., None])[..., 0]
    return u @ F.T
