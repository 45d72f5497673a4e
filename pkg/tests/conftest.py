import numpy as np
import pytest

from w1ray.measures import make_empirical


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def semi_discrete(rng, d, m, k, spread=1.0):
    """Uniform cloud of ``m`` points and ``k`` atoms with weights in multiples of ``1/m``."""
    mu = make_empirical(rng.uniform(-spread, spread, (m, d)))
    counts = 1 + rng.multinomial(m - k, np.full(k, 1.0 / k))
    nu = make_empirical(rng.uniform(-spread, spread, (k, d)), counts / m)
    return mu, nu


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
