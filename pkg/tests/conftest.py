import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dam", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dam"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    from dam.config import RunConfig

    cfg = RunConfig()
    cfg.data.image_size = 32
    cfg.train.episodes = 16
    cfg.train.batch_size = 4
    cfg.train.eval_episodes = 6
    return cfg


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints one PASS/FAIL line and repeats it in the run summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
