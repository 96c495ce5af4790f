import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_qp(rng, n=10, m=5):
    M = rng.standard_normal((n, n))
    H = M @ M.T + n * np.eye(n)
    g = rng.standard_normal(n)
    C = rng.standard_normal((m, n))
    b = rng.standard_normal(m) + 0.5
    return H, g, C, b


def random_polytope(rng, n=3, m=8):
    """Bounded polytope: m random unit facets plus a bounding box."""
    C = rng.standard_normal((m, n))
    C /= np.linalg.norm(C, axis=1, keepdims=True)
    C = np.vstack([C, np.eye(n), -np.eye(n)])
    b = rng.uniform(0.5, 2.0, C.shape[0])
    return C, b


ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str):
    """Remember one acceptance outcome; printed once at the end of the session."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
