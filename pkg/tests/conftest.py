from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]


def data_root() -> Path | None:
    """``$BANDIT_LAB_DATA`` if set, else the repo's git-ignored ``data/`` directory."""
    env = os.environ.get("BANDIT_LAB_DATA")
    root = Path(env) if env else REPO / "data"
    return root if root.is_dir() else None


def find_data(*names: str) -> Path | None:
    root = data_root()
    if root is None:
        return None
    for name in names:
        if (root / name).is_file():
            return root / name
    return None


@pytest.fixture
def mushroom_file() -> Path:
    path = find_data("agaricus-lepiota.data", "mushroom.dat")
    if path is None:
        pytest.skip("mushroom data not available under $BANDIT_LAB_DATA")
    return path


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request) -> dict:
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        passed, detail = log[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
