from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from confmon.errors import (
    AccessDenied,
    ConfigError,
    OutOfRange,
    PinnedInterrupt,
    PrivilegeViolation,
    SeedLocked,
    UnroutedInterrupt,
)
from confmon.hw import (
    BOOT_ROM,
    DMA,
    FIRST_GUEST,
    HYPERVISOR,
    IRQ_SM,
    IRQ_TIMER,
    PAGE_SIZE,
    IsolationConfig,
    PrivilegeLevel,
    TrapCause,
    create_platform,
    overlaps,
    pairwise_disjoint,
)
from oracles import ranges_disjoint

CONF = (4 * PAGE_SIZE, 8 * PAGE_SIZE)


def fresh(harts=1, pages=16, seed=0):
    return create_platform(pages * PAGE_SIZE, harts, seed)


def lowered(p, domain=HYPERVISOR, level=PrivilegeLevel.MIDDLE):
    p.set_isolation(0, IsolationConfig.build([CONF]))
    p.return_to(0, level, 0x5000, domain=domain)
    return p


def test_power_on_state():
    p = fresh(harts=2)
    assert p.harts[0].privilege is PrivilegeLevel.HIGHEST
    assert not p.harts[0].halted and p.harts[1].halted
    assert p.harts[0].pc == BOOT_ROM[0]
    assert not p.endorsement.locked


@pytest.mark.parametrize("size,harts", [(0, 1), (PAGE_SIZE + 1, 1), (PAGE_SIZE, 1), (4 * PAGE_SIZE, 0)])
def test_bad_platform_shapes(size, harts):
    with pytest.raises(ConfigError):
        create_platform(size, harts, 0)


def test_out_of_range_is_traced():
    p = fresh(pages=4)
    with pytest.raises(OutOfRange):
        p.read_phys(0, 4 * PAGE_SIZE - 4, 8)
    assert p.trace[-1].outcome == "OutOfRange"


def test_boot_rom_is_read_only_even_for_highest():
    p = fresh()
    with pytest.raises(AccessDenied):
        p.write_phys(0, 0, b"x")
    with pytest.raises(ConfigError):
        p.set_isolation(0, IsolationConfig.build([CONF], readonly=()))


def test_confidential_memory_denied_below_highest():
    p = lowered(fresh())
    with pytest.raises(AccessDenied):
        p.read_phys(0, CONF[0], 8)
    with pytest.raises(AccessDenied):
        p.write_phys(0, CONF[1] - 8, b"\0" * 8)
    p.write_phys(0, CONF[1], b"ok")  # just past the region
    assert p.trace[-1].outcome == "ok"


def test_straddling_access_is_denied():
    p = lowered(fresh())
    with pytest.raises(AccessDenied):
        p.read_phys(0, CONF[0] - 4, 8)


def test_dma_is_non_confidential():
    p = fresh()
    p.set_isolation(0, IsolationConfig.build([CONF]))
    with pytest.raises(AccessDenied):
        p.dma_read(CONF[0], 8)
    with pytest.raises(AccessDenied):
        p.dma_write(CONF[0], b"x")
    assert p.trace[-1].domain == DMA
    p.dma_write(0x2000, b"dev")
    assert p.dma_read(0x2000, 3) == b"dev"


def test_cvm_grant_and_shared_page():
    p = fresh()
    cvm = FIRST_GUEST
    cfg = IsolationConfig.build([CONF], {cvm: [(CONF[0], CONF[0] + PAGE_SIZE)]},
                                {(0x2000, 0x3000): cvm})
    p.set_isolation(0, cfg)
    p.return_to(0, PrivilegeLevel.LOWEST, 0, domain=cvm)
    p.write_phys(0, CONF[0], b"mine")
    p.write_phys(0, 0x2000, b"shared")
    with pytest.raises(AccessDenied):
        p.read_phys(0, CONF[0] + PAGE_SIZE, 8)
    with pytest.raises(AccessDenied):
        p.read_phys(0, 0x3000, 8)  # ordinary memory is not the CVM's


@pytest.mark.parametrize("cfg", [
    IsolationConfig.build([(0, 0x2000), (0x1000, 0x3000)]),
    IsolationConfig.build([CONF], {HYPERVISOR: [CONF]}),
    IsolationConfig.build([CONF], {16: [(0, 0x1000)]}),
    IsolationConfig.build([CONF], {16: [CONF], 17: [CONF]}),
    IsolationConfig.build([CONF], shared_pages={(CONF[0], CONF[0] + PAGE_SIZE): 16}),
    IsolationConfig.build([CONF], shared_pages={(0x2000, 0x2800): 16}),
])
def test_invalid_isolation_configs_rejected(cfg):
    p = fresh()
    with pytest.raises(ConfigError):
        p.set_isolation(0, cfg)


def test_isolation_needs_highest():
    p = lowered(fresh())
    with pytest.raises(PrivilegeViolation):
        p.set_isolation(0, IsolationConfig.build([]))


def test_return_cannot_raise_privilege_or_remark_domain():
    p = lowered(fresh())
    with pytest.raises(PrivilegeViolation):
        p.return_to(0, PrivilegeLevel.HIGHEST, 0)
    with pytest.raises(PrivilegeViolation):
        p.return_to(0, PrivilegeLevel.LOWEST, 0, domain=FIRST_GUEST)
    p.return_to(0, PrivilegeLevel.LOWEST, 0)
    assert p.harts[0].domain == HYPERVISOR


def test_trap_enters_highest_with_interrupts_off():
    p = lowered(fresh())
    p.trap(0, TrapCause.ECALL)
    h = p.harts[0]
    assert h.privilege is PrivilegeLevel.HIGHEST and not h.interrupts_enabled
    assert h.trap.from_domain == HYPERVISOR and h.trap.cause is TrapCause.ECALL


def test_pinned_irq_cannot_leave_highest():
    p = fresh()
    p.configure_interrupt(0, IRQ_SM, PrivilegeLevel.HIGHEST, 0x100)
    with pytest.raises(PinnedInterrupt):
        p.configure_interrupt(0, IRQ_SM, PrivilegeLevel.MIDDLE, 0x100)


def test_lower_privilege_cannot_touch_highest_routes():
    p = fresh()
    p.configure_interrupt(0, IRQ_TIMER, PrivilegeLevel.HIGHEST, 0x100)
    p.set_isolation(0, IsolationConfig.build([CONF]))
    p.return_to(0, PrivilegeLevel.MIDDLE, 0, domain=HYPERVISOR)
    with pytest.raises(PrivilegeViolation):
        p.configure_interrupt(0, IRQ_TIMER, PrivilegeLevel.MIDDLE, 0x200)


def test_unrouted_interrupt():
    with pytest.raises(UnroutedInterrupt):
        fresh().deliver_interrupt(IRQ_TIMER, 0)


def test_delivery_follows_route_and_demotes_cvm_domain():
    p = fresh()
    p.configure_interrupt(0, IRQ_TIMER, PrivilegeLevel.MIDDLE, 0x4000)
    p.set_isolation(0, IsolationConfig.build([CONF]))
    p.return_to(0, PrivilegeLevel.LOWEST, 0, domain=FIRST_GUEST)
    rec = p.deliver_interrupt(IRQ_TIMER, 0)
    assert rec.new_privilege is PrivilegeLevel.MIDDLE and rec.handler == 0x4000
    assert p.harts[0].domain == HYPERVISOR


def test_seed_readable_once_at_highest():
    p = fresh()
    seed = p.read_seed(0)
    assert len(seed) == 32
    p.lock_seed(0)
    with pytest.raises(SeedLocked):
        p.read_seed(0)
    p.reset()
    assert p.read_seed(0) == seed


def test_seed_needs_highest():
    p = lowered(fresh())
    with pytest.raises(PrivilegeViolation):
        p.read_seed(0)


def test_microarch_taint_and_clear():
    p = fresh()
    p.set_isolation(0, IsolationConfig.build([CONF]))
    p.write_phys(0, CONF[0], b"secret!!")
    assert not p.harts[0].microarch.clean
    p.clear_microarch(0)
    assert p.harts[0].microarch.clean


def test_cas():
    p = fresh()
    assert p.atomic_cas(0, 0x2000, 0, 7) == 0
    assert p.atomic_cas(0, 0x2000, 0, 9) == 7
    assert p.read_word(0, 0x2000) == 7


def test_reset_keeps_memory():
    p = fresh()
    p.write_phys(0, 0x2000, b"stay")
    p.reset()
    assert p.peek(0x2000, 4) == b"stay"


def test_clone_is_independent():
    p = fresh(harts=2)
    p.write_phys(0, 0x2000, b"a")
    twin = p.clone()
    twin.write_phys(0, 0x2000, b"b")
    twin.harts[0].gprs[3] = 9
    assert p.peek(0x2000, 1) == b"a" and p.harts[0].gprs[3] == 0
    assert twin.trace.next_seq == p.trace.next_seq + 1
    assert p.rng.random() == twin.rng.random()


def test_state_key_ignores_trace():
    p = fresh()
    twin = p.clone()
    p.trace.record(None, None, "noise")
    assert p.state_key() == twin.state_key()


span = st.tuples(st.integers(0, 64), st.integers(1, 16)).map(lambda t: (t[0], t[0] + t[1]))


@given(st.lists(span, max_size=8))
def test_pairwise_disjoint_matches_bruteforce(ranges):
    assert pairwise_disjoint(ranges) == ranges_disjoint(ranges)


@given(span, span)
def test_overlaps_symmetric(a, b):
    assert overlaps(a, b) == overlaps(b, a) == (not ranges_disjoint([a, b]))


@given(st.integers(0, 15 * PAGE_SIZE), st.binary(min_size=1, max_size=64))
def test_poke_peek_roundtrip(addr, data):
    p = fresh()
    p.poke(addr, data)
    assert p.peek(addr, len(data)) == data


@given(st.sampled_from(list(PrivilegeLevel)), st.integers(0, 15), st.booleans())
def test_highest_always_allowed_outside_rom(level, page, write):
    cfg = IsolationConfig.build([CONF])
    rng = (page * PAGE_SIZE + PAGE_SIZE, page * PAGE_SIZE + 2 * PAGE_SIZE)
    allowed = cfg.allows(HYPERVISOR, level, rng, write)
    if level is PrivilegeLevel.HIGHEST:
        assert allowed
    else:
        assert allowed == ranges_disjoint([rng, CONF])
