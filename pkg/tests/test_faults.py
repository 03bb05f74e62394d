from __future__ import annotations

import pytest

from confmon.errors import ScriptError, UnknownFault
from confmon.harness.faults import CATALOG, PRE_BOOT, seeded_violation, self_test
from confmon.invariants import ALL_INVARIANTS


def test_catalog_targets_are_known_invariants():
    assert len(CATALOG) == 28
    assert {f.target for f in CATALOG.values()} <= set(ALL_INVARIANTS)


def test_every_invariant_has_a_fault():
    assert {f.target for f in CATALOG.values()} == set(ALL_INVARIANTS)


def test_clean_workload():
    assert self_test(None) == set()


@pytest.mark.parametrize("fault_id", sorted(CATALOG))
def test_fault_trips_exactly_its_target(fault_id):
    assert self_test(fault_id) == {CATALOG[fault_id].target}


def test_unknown_fault(booted):
    p, _ = booted
    with pytest.raises(UnknownFault):
        seeded_violation(p, "no-such-fault")


def test_pre_boot_fault_after_boot_rejected(booted):
    p, _ = booted
    pre = next(f for f in CATALOG.values() if f.phase == PRE_BOOT)
    with pytest.raises(ScriptError):
        seeded_violation(p, pre.id)
