from __future__ import annotations

import numpy as np
import pytest

from mixedboot.core import GroupedData, Parameters, simulate_stacked
from mixedboot.reml import fit_reml


def design(rng, sizes, q=1, x_scale=1.0):
    """Intercept + one covariate; Z is the intercept (q=1) or intercept and slope (q=2)."""
    sizes = np.asarray(sizes)
    n = int(sizes.sum())
    x = rng.normal(scale=x_scale, size=n)
    X = np.column_stack([np.ones(n), x])
    Z = X[:, :q].copy()
    ids = [str(i + 1) for i in range(len(sizes))]
    return GroupedData.from_stacked(ids, sizes, np.zeros(n), X, Z, ("(Intercept)", "x"), ("(Intercept)", "x")[:q])


def simulate(rng, sizes, beta=(1.0, 1.0), D=((1.0,),), sigma2=1.0, q=None):
    D = np.atleast_2d(np.asarray(D, dtype=float))
    q = D.shape[0] if q is None else q
    data = design(rng, sizes, q=q)
    y = simulate_stacked(data, Parameters(np.asarray(beta, float), D, sigma2), rng)
    return data.with_response(y)


def fitted(seed=0, g=12, m=6, q=1, D=None, sigma2=1.0):
    rng = np.random.default_rng(seed)
    if D is None:
        D = np.eye(q) if q == 1 else np.array([[1.0, 0.3], [0.3, 0.5]])
    return fit_reml(simulate(rng, [m] * g, D=D, sigma2=sigma2))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def ri_model():
    """Random-intercept fit used across modules."""
    return fitted(seed=11, g=15, m=6)


@pytest.fixture(scope="session")
def rs_model():
    """Correlated random intercept and slope."""
    return fitted(seed=12, g=20, m=8, q=2)


# -- acceptance report ---------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, label = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        status = "FAIL" if failed else "PASS"
        if _CRITERIA.get(number, ("", ""))[0] != "FAIL":
            _CRITERIA[number] = (status, label)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, label = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {label}")
