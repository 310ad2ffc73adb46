from __future__ import annotations

from pathlib import Path

import pytest

from ims_dsl import Ims, ProvisioningConfig

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
DOMAIN = "ims.test"

ACCEPTANCE_RESULTS: list[tuple[int, str, bool]] = []


def make_config(*names: str, domain: str = DOMAIN, **extra) -> ProvisioningConfig:
    users = [{"username": n, "password": f"{n}-pw"} for n in names]
    return ProvisioningConfig.from_dict({"domain": domain, "users": users, **extra})


@pytest.fixture
def ims():
    deployment = Ims.simulated(make_config("alice", "bob", "carol", "dave"))
    yield deployment
    deployment.close()


@pytest.fixture
def users(ims):
    def register(*names):
        return [ims.user().has_credentials(n, DOMAIN, f"{n}-pw") for n in names]
    return register


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
