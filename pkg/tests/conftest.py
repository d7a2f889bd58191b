import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from secure_mle.mvn import ParameterSet
from secure_mle.partition import PartitionLayout

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_params(rng, p, scale=1.0):
    a = rng.normal(size=(p, p))
    cov = a @ a.T / p + 0.5 * np.eye(p)
    return ParameterSet(rng.normal(size=p) * scale, cov * scale**2)


def simulate(rng, params, n):
    return rng.multivariate_normal(params.mean, params.cov, size=n)


def split_columns(p, K):
    return [list(c) for c in np.array_split(np.arange(p), K)]


def vertical(p, K, n):
    return PartitionLayout.vertical(split_columns(p, K), n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion (plus labelled report lines), printed after the run
ACCEPTANCE: dict[int, list[tuple[str, str, str]]] = {}


def record_criterion(number: int, status: str, detail: str, label: str = "") -> None:
    ACCEPTANCE.setdefault(number, []).append((label, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        for label, status, detail in ACCEPTANCE[number]:
            name = f"criterion {number}" + (f" ({label})" if label else "")
            terminalreporter.write_line(f"{name}: {status}  {detail}")
