import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from openasep.lattice import BoundaryRates

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# criterion label -> list of (passed, detail), one entry per checked part
ACCEPTANCE: dict[str, list[tuple[bool, str]]] = {}


def record_acceptance(label: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(label, []).append((bool(passed), detail))
    print(f"{label}: {'PASS' if passed else 'FAIL'} ({detail})")


def _order(label: str):
    return int(label.split("-")[1])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=_order):
        parts = ACCEPTANCE[label]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture
def random_rates():
    return BoundaryRates.random(np.random.default_rng(2), m=2, scale=0.4)
