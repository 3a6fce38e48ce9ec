"""Shared fixtures. The desk smoke run is trained once per session."""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from analogyflow.config import TrainConfig
from analogyflow.flowmodel import VelocityNet
from analogyflow.trainer import TrainResult, check_base, train_phase1, train_phase2

SMOKE_FAMILIES = ("brightness", "contrast", "hflip", "roll_right")


def smoke_config(**overrides) -> TrainConfig:
    """Desk defaults restricted to four seen families."""
    return TrainConfig(families=SMOKE_FAMILIES, **overrides)


def tiny_config(**overrides) -> TrainConfig:
    """A network small enough for unit tests that train a few steps."""
    base = dict(
        hidden_width=16, hidden_layers=2, targets=(0, 1), n_basis=3, rank=2, key_dim=4,
        time_embed_dim=4, hint_dim=3, encoder_hidden=8, encoder_features=4,
        phase1_steps=6, phase2_steps=6, batch_size=4, log_every=2, eval_every=4,
        eval_samples=4, sample_steps=2, families=SMOKE_FAMILIES,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class SmokeRun:
    cfg: TrainConfig
    phase1: TrainResult
    phase2: TrainResult

    @property
    def base(self) -> VelocityNet:
        return self.phase1.net

    @property
    def net(self) -> VelocityNet:
        return self.phase2.net

    def untrained(self) -> VelocityNet:
        """The phase-2 network at step 0: base plus freshly attached adapters."""
        return check_base(self.cfg, self.base).attach_adapters(self.cfg.seed)


def run_smoke(cfg: TrainConfig) -> SmokeRun:
    p1 = train_phase1(cfg)
    p2 = train_phase2(cfg, p1.net)
    return SmokeRun(cfg, p1, p2)


@pytest.fixture(scope="session")
def smoke() -> SmokeRun:
    return run_smoke(smoke_config())


@pytest.fixture(scope="session")
def tiny_run() -> SmokeRun:
    return run_smoke(tiny_config())


# acceptance reporting --------------------------------------------------------
# Tests marked ``criterion(n, title)`` are grouped; the terminal summary prints
# one PASS/FAIL line per criterion plus any measurements the tests recorded.

_CRITERIA: dict[int, dict] = {}


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    number, title = mark.args
    return _CRITERIA.setdefault(number, {"title": title, "failed": [], "passed": [], "notes": []})


@pytest.fixture
def measure(request):
    """``measure("name", value)`` attaches a measurement to the test's criterion line."""
    entry = _criterion(request.node)

    def record(text: str) -> None:
        if entry is not None:
            entry["notes"].append(text)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    entry = _criterion(item)
    if entry is None:
        return
    if report.failed or (report.when == "call" and report.skipped):
        entry["failed"].append(item.name)
    elif report.when == "call" and report.passed:
        entry["passed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = "FAIL" if entry["failed"] else "PASS"
        terminalreporter.write_line(f"criterion {number} ({entry['title']}): {verdict}")
        for name in entry["failed"]:
            terminalreporter.write_line(f"    failed: {name}")
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")
