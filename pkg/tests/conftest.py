"""Shared fixtures: the default scenario, its synthesized design and cached plan runs."""

from __future__ import annotations

import contextlib
import time

import pytest

from ccs_peg.harness.config import ScenarioConfig
from ccs_peg.harness.runner import controller_choice, nominal_model, run_experiment

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")


@pytest.fixture
def verdict(request):
    """Context manager recording one acceptance criterion's outcome for the summary.

    Usage: ``with verdict(3, "title") as notes: notes.append("..."); assert ...``
    """
    store = request.config.stash[_ACCEPTANCE_KEY]

    @contextlib.contextmanager
    def record(n: int, title: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            store[n] = (False, title, "; ".join(notes + [msg]))
            raise
        store[n] = (True, title, "; ".join(notes))

    return record


@pytest.fixture(scope="session")
def default_cfg() -> ScenarioConfig:
    return ScenarioConfig()


@pytest.fixture(scope="session")
def nominal(default_cfg):
    return nominal_model(default_cfg)


@pytest.fixture(scope="session")
def design(default_cfg):
    return controller_choice(default_cfg).synthesized


class PlanRun:
    def __init__(self, cfg):
        t0 = time.perf_counter()
        self.cfg = cfg
        self.summary, self.records = run_experiment(cfg)
        self.wall_time = time.perf_counter() - t0


@pytest.fixture(scope="session")
def ccs_plan(default_cfg) -> PlanRun:
    return PlanRun(default_cfg.with_controller("ccs"))


@pytest.fixture(scope="session")
def int_s_plan(default_cfg) -> PlanRun:
    return PlanRun(default_cfg.with_controller("int_s"))


@pytest.fixture(scope="session")
def int_h_plan(default_cfg) -> PlanRun:
    return PlanRun(default_cfg.with_controller("int_h"))
