from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from confmon.boot import plan_layout, secure_boot, verify_init_invariants
from confmon.errors import BootSequenceError
from confmon.harness.scenario import DEFAULT_HV_IMAGE, DEFAULT_SM_IMAGE, BootConfig, boot_platform
from confmon.hw import (
    HYPERVISOR,
    IRQ_SM,
    IRQ_TIMER,
    PAGE_SIZE,
    PrivilegeLevel,
    create_platform,
)
from confmon.invariants import INIT_ESTABLISHED
from drivers import first_sub_highest, random_boot_config


def test_layout_is_ordered_and_contiguous(booted):
    p, report = booted
    lay = p.monitor.layout
    regions = [lay.sm_region, lay.control_region, lay.tracker_range, lay.shared_reserve,
               lay.hypervisor_region]
    assert regions[0][0] == PAGE_SIZE  # right after the boot ROM
    for a, b in zip(regions, regions[1:]):
        assert a[1] == b[0]
    assert regions[-1][1] == p.mem_size
    assert p.isolation.confidential_regions == ((lay.sm_region[0], lay.tracker_range[1]),)


def test_every_hart_handed_to_hypervisor(booted):
    p, _ = booted
    for h in p.harts:
        assert (h.privilege, h.domain, h.interrupts_enabled) == (PrivilegeLevel.MIDDLE, HYPERVISOR, True)
        assert h.pc == p.monitor.layout.hypervisor_region[0]
        assert h.microarch.clean


def test_routes_after_boot(booted):
    p, _ = booted
    for h in range(p.hart_count):
        assert p.irqc.route(h, IRQ_SM).target is PrivilegeLevel.HIGHEST
        assert p.irqc.route(h, IRQ_TIMER).target is PrivilegeLevel.MIDDLE


def test_report_contents(booted):
    p, report = booted
    assert report.invariants_established == frozenset(INIT_ESTABLISHED)
    assert report.sm_region == p.monitor.layout.sm_region
    assert report.public_key == p.monitor.public_key
    assert verify_init_invariants(p) == set()
    assert p.endorsement.locked


def test_monitor_image_in_place(booted):
    p, _ = booted
    lo = p.monitor.layout.sm_region[0]
    assert p.peek(lo, len(DEFAULT_SM_IMAGE)) == DEFAULT_SM_IMAGE


def test_boot_twice_rejected(booted):
    p, _ = booted
    with pytest.raises(BootSequenceError, match="AlreadyInitialized"):
        secure_boot(p, DEFAULT_SM_IMAGE, DEFAULT_HV_IMAGE)


def test_too_little_memory():
    p = create_platform(6 * PAGE_SIZE, 1, 0)
    with pytest.raises(BootSequenceError) as exc:
        secure_boot(p, DEFAULT_SM_IMAGE, DEFAULT_HV_IMAGE)
    assert exc.value.step == "partition"


def test_seed_locked_before_handoff(booted):
    p, _ = booted
    events = p.trace.events()
    lock = next(i for i, e in enumerate(events) if e.op == "lock_seed")
    assert lock < first_sub_highest(events)


def test_late_seed_lock_mutation_reorders_boot():
    p, _ = boot_platform(BootConfig(harts=2, mem_pages=48, mutations=("late-seed-lock",)))
    events = p.trace.events()
    lock = next(i for i, e in enumerate(events) if e.op == "lock_seed")
    assert lock > first_sub_highest(events)


def test_reboot_clears_stale_tracker_pages():
    p = create_platform(48 * PAGE_SIZE, 1, 0)
    lay = plan_layout(p, DEFAULT_SM_IMAGE, DEFAULT_HV_IMAGE)
    p.poke(lay.tracker_range[0] + 16, b"left over")
    secure_boot(p, DEFAULT_SM_IMAGE, DEFAULT_HV_IMAGE)
    assert p.page_is_zero(lay.tracker_range[0] // PAGE_SIZE)


def test_tampered_monitor_image_detected(booted):
    p, _ = booted
    p.poke(p.monitor.layout.sm_region[0], b"X")
    assert verify_init_invariants(p) == {"init.sm-integrity"}


def test_boot_is_deterministic():
    a, ra = boot_platform(BootConfig(seed=3))
    b, rb = boot_platform(BootConfig(seed=3))
    assert ra.dumps() == rb.dumps()
    assert a.trace.dumps() == b.trace.dumps()
    _, rc = boot_platform(BootConfig(seed=4))
    assert rc.public_key != ra.public_key


@given(st.integers(0, 2**32))
def test_random_boots_establish_invariants(seed):
    cfg, sm, hv = random_boot_config(random.Random(seed))
    p, _ = boot_platform(cfg, sm, hv)
    assert verify_init_invariants(p) == set()
    events = p.trace.events()
    lock = next(i for i, e in enumerate(events) if e.op == "lock_seed")
    assert lock < first_sub_highest(events)
