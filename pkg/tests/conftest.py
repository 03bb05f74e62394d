from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from confmon.harness.adversary import ActionKind, AdversaryAction, apply_action  # noqa: E402
from confmon.harness.scenario import BootConfig, boot_platform  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def act(p, kind: ActionKind, **params):
    return apply_action(p, AdversaryAction.make(kind, **params))


@pytest.fixture
def booted():
    """A two-hart platform straight after boot."""
    p, report = boot_platform(BootConfig(harts=2, mem_pages=64, seed=5, tracker_pages=12))
    return p, report


@pytest.fixture
def running(booted):
    """CVM 16 running on hart 0, CVM 17 promoted but parked, hart 1 in the hypervisor."""
    p, report = booted
    act(p, ActionKind.PROMOTE, hart=0, pages=2)
    act(p, ActionKind.PROMOTE, hart=1, pages=1)
    act(p, ActionKind.START_STOP_INTERRUPT_CVM, hart=0, cvm=16, op="start")
    return p, report


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.summary_line(n))
