import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def ablations():
    """All five variants trained at defaults for seeds 0..4 (about 2.5 minutes)."""
    from tranx.config import load_config
    from tranx.synthgen import generate
    from tranx.train import run_all_ablations

    out = {}
    for seed in SEEDS:
        cfg = load_config(None, seed, environ={})
        out[seed] = run_all_ablations(generate(cfg.synth), cfg.adapter)
    return out


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
