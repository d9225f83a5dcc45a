import os
import re
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from ecdb.denoiser import DenoiserArch
from ecdb.schedule import ProcessConfig, build_schedule

settings.register_profile(
    "ecdb", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ecdb")

TOY_ROOT = Path(os.environ.get("ECDB_TOY_ROOT", Path(__file__).resolve().parents[1] / "runs" / "toy_inpaint"))


@pytest.fixture(scope="session")
def sched():
    return build_schedule(ProcessConfig())


@pytest.fixture
def tiny_arch():
    return DenoiserArch(base_width=8, time_embed_dim=16)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


# -- acceptance summary: one line per criterion at the end of the run ----------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if m:
        _criteria[int(m.group(1))] = (m.group(2).replace("_", " "), "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        name, outcome = _criteria[k]
        terminalreporter.write_line(f"criterion {k:2d} {name}: {outcome}")
