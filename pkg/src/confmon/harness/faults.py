"""Seeded violations for testing the oracle itself.

Each fault breaks exactly one invariant, by corrupting the platform or
monitor state directly, by writing an event the hardware or monitor would
never emit, or by switching on a deliberately broken code path. The self-test
in :func:`self_test` runs the standard workload with one fault in place and
reports which invariants the oracle flagged; for every catalog entry that set
must be exactly ``{fault.target}``.

Faults come in three phases. ``pre-boot`` faults only make sense on a fresh
platform, ``before-workload`` faults change how the monitor behaves from then
on, and ``after-workload`` faults corrupt a state that the workload built up.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from .. import invariants as inv
from ..errors import ScriptError, UnknownFault
from ..hw import HYPERVISOR, IRQ_SM, PAGE_SIZE, SM_DOMAIN, Platform, PrivilegeLevel, Route
from ..invariants import STATE_CHECKS
from ..tracker import PageToken
from .adversary import live_cvms, runs_hypervisor
from .oracle import Oracle

PRE_BOOT = "pre-boot"
BEFORE = "before-workload"
AFTER = "after-workload"


@dataclass(frozen=True)
class Fault:
    id: str
    target: str
    phase: str
    description: str
    mutation: str | None = None
    inject: Callable[[Platform], None] | None = None


# ---------------------------------------------------------------- helpers

def _sm(p: Platform):
    if p.monitor is None:
        raise ScriptError("this fault needs a booted platform")
    return p.monitor


def _hv_hart(p: Platform) -> int:
    for h in reversed(range(p.hart_count)):
        if runs_hypervisor(p, h):
            return h
    raise ScriptError("no hart is running the hypervisor")


def _two_cvms(p: Platform):
    cvms = live_cvms(p)
    if len(cvms) < 2:
        raise ScriptError("this fault needs two live CVMs")
    sm = _sm(p)
    return sm.domains[cvms[0]], sm.domains[cvms[1]]


def _free_token(p: Platform, pred=lambda t: True) -> PageToken:
    for t in _sm(p).pool:
        if pred(t):
            return t
    raise ScriptError("no suitable free token")


def _zero_hv_page(p: Platform) -> int:
    lo, hi = _sm(p).layout.hypervisor_region
    for page in reversed(range(lo // PAGE_SIZE, hi // PAGE_SIZE)):
        if p.page_is_zero(page):
            return page
    raise ScriptError("hypervisor memory has no zero page")


# ---------------------------------------------------------------- state corruption

def _sm_priv_leak(p):
    p.harts[_hv_hart(p)].domain = SM_DOMAIN


def _forced_grant(p):
    sm = _sm(p)
    p.isolation = p.isolation.with_grants(HYPERVISOR, [sm.layout.control_region])


def _sm_region_declassified(p):
    sm_lo, sm_hi = _sm(p).layout.sm_region
    regions = []
    for lo, hi in p.isolation.confidential_regions:
        if lo < sm_lo:
            regions.append((lo, min(hi, sm_lo)))
        if hi > sm_hi:
            regions.append((max(lo, sm_hi), hi))
    p.isolation = replace(p.isolation, confidential_regions=tuple(regions))


def _unpinned_irq(p):
    sm = _sm(p)
    p.irqc.routes[(0, IRQ_SM)] = Route(PrivilegeLevel.MIDDLE, sm.layout.hypervisor_region[0])


def _seed_unlocked(p):
    _sm(p)
    p.endorsement.locked = False


def _sm_code_tamper(p):
    addr = _sm(p).layout.sm_region[0]
    p.poke(addr, bytes([p.peek(addr, 1)[0] ^ 0xFF]))


def _duplicate_token(p):
    a, b = _two_cvms(p)
    gpn, token = min(a.page_table.mappings.items())
    spare = max(b.page_table.mappings) + 1
    b.page_table.mappings[spare] = PageToken(token.base, token.serial, token.state)


def _overlapping_token(p):
    hi = _sm(p).layout.tracker_range[1]
    token = _free_token(p, lambda t: t.base + PAGE_SIZE < hi)
    token.size = 2 * PAGE_SIZE


def _cross_cvm_grant(p):
    a, b = _two_cvms(p)
    stolen = min(b.page_table.mappings.values(), key=lambda t: t.base).range
    p.isolation = p.isolation.with_grants(a.id, p.isolation.grants_for(a.id) + (stolen,))


def _dirty_free_page(p):
    p.poke(_free_token(p).base, b"residue")


def _key_leak(p):
    sm = _sm(p)
    p.poke(_zero_hv_page(p) * PAGE_SIZE, p.peek(sm.key_addr, 32))


# ---------------------------------------------------------------- forged events

def _tokenless_access(p):
    a, _ = _two_cvms(p)
    base = min(a.page_table.mappings.values(), key=lambda t: t.base).base
    p.poke(base, p.peek(base, 8))
    p.trace.record(None, SM_DOMAIN, "write_phys", addr=base, width=8,
                   priv=PrivilegeLevel.HIGHEST)


def _forged_token_create(p):
    pool = _sm(p).pool
    serial = pool.total_created
    base = _zero_hv_page(p) * PAGE_SIZE
    pool.free[serial] = PageToken(base, serial)
    pool.total_created += 1
    p.trace.record(None, SM_DOMAIN, "token_create", serial=serial, base=base)


def _privilege_raise(p):
    h = _hv_hart(p)
    p.trace.record(h, HYPERVISOR, "return_to", gprs=list(p.harts[h].gprs),
                   from_priv=PrivilegeLevel.MIDDLE, to_priv=PrivilegeLevel.HIGHEST,
                   domain_to=HYPERVISOR, ie=False)


def _hv_reads_sm(p):
    h = _hv_hart(p)
    p.trace.record(h, HYPERVISOR, "read_phys", addr=_sm(p).layout.sm_region[0], width=8,
                   priv=PrivilegeLevel.MIDDLE)


def _read_seed_after_lock(p):
    _sm(p)
    p.trace.record(None, None, "read_seed", priv=PrivilegeLevel.HIGHEST)


CATALOG: dict[str, Fault] = {f.id: f for f in [
    # hardware contract
    Fault("privilege-raise", inv.HW_PRIVILEGE_MONOTONE, AFTER,
          "a trap return that raises the privilege level", inject=_privilege_raise),
    Fault("hv-reads-sm", inv.HW_ISOLATION_SOUND, AFTER,
          "the hypervisor reads monitor memory and the access succeeds", inject=_hv_reads_sm),
    Fault("read-seed-after-lock", inv.HW_SEED_LOCK_MONOTONE, AFTER,
          "the endorsement seed is read after it was locked", inject=_read_seed_after_lock),
    Fault("exit-interrupts-off", inv.HW_HANDLER_EXIT_INTERRUPTS, BEFORE,
          "the monitor returns to a domain with interrupts still disabled",
          mutation="exit-ie-off"),
    # initialisation
    Fault("sm-priv-leak", inv.INIT_SM_EXCLUSIVE_HIGHEST, AFTER,
          "monitor code runs below the highest privilege", inject=_sm_priv_leak),
    Fault("forced-grant", inv.INIT_ISOLATION_GUARDS_SM, AFTER,
          "the hypervisor is granted the control data region", inject=_forced_grant),
    Fault("sm-region-declassified", inv.INIT_SM_IN_CONFIDENTIAL, AFTER,
          "the monitor image drops out of confidential memory", inject=_sm_region_declassified),
    Fault("unpinned-irq", inv.INIT_IRQ_PINNED_TO_SM, AFTER,
          "the monitor's interrupt is rerouted to the hypervisor", inject=_unpinned_irq),
    Fault("seed-unlocked", inv.INIT_SEED_LOCKED, AFTER,
          "the endorsement seed lock is cleared", inject=_seed_unlocked),
    Fault("late-seed-lock", inv.INIT_BOOT_ORDERING, PRE_BOOT,
          "boot hands the harts over before locking the seed", mutation="late-seed-lock"),
    Fault("sm-code-tamper", inv.INIT_SM_INTEGRITY, AFTER,
          "one byte of the monitor image is flipped", inject=_sm_code_tamper),
    # runtime state machine
    Fault("irq-in-monitor", inv.FSM_INTERRUPTS_DISABLED, BEFORE,
          "the monitor enables interrupts while handling a trap", mutation="irq-enabled-in-sm"),
    Fault("irq-not-retargeted", inv.FSM_ENTER_TO_C, BEFORE,
          "entering a CVM leaves interrupts routed to the hypervisor",
          mutation="skip-irq-retarget"),
    Fault("irq-not-restored", inv.FSM_EXIT_TO_NC, BEFORE,
          "leaving a CVM keeps the monitor's interrupt routing", mutation="skip-irq-restore"),
    Fault("context-outside-control", inv.FSM_ENTER_SAVES_CONTEXT, BEFORE,
          "domain contexts are parked in hypervisor memory", mutation="save-outside-control"),
    Fault("dirty-exit", inv.FSM_EXIT_SANITIZES, BEFORE,
          "microarchitectural state is not cleared on exit", mutation="skip-microarch-clear"),
    Fault("clobbered-restore", inv.FSM_STATE_CONFINED, BEFORE,
          "resuming a CVM overwrites registers the call does not return",
          mutation="clobbered-restore"),
    Fault("skipped-route-node", inv.FSM_NODE_PATH, BEFORE,
          "hypervisor calls bypass the routing node", mutation="skip-route-node"),
    # memory tracker
    Fault("forged-token-create", inv.MT_FIXED_TOKEN_SET, AFTER,
          "a page token is minted after initialisation", inject=_forged_token_create),
    Fault("overlapping-token", inv.MT_DISJOINT_TOKENS, AFTER,
          "a free token grows to cover its neighbour's page", inject=_overlapping_token),
    Fault("tokenless-access", inv.MT_ACCESS_VIA_TOKEN, AFTER,
          "monitor code writes tracker memory without holding a token", inject=_tokenless_access),
    Fault("duplicate-token", inv.MT_EXCLUSIVE_OWNERSHIP, AFTER,
          "a second CVM's page table receives a copy of another CVM's token",
          inject=_duplicate_token),
    # policies
    Fault("cross-cvm-grant", inv.POLICY_DATA_ISOLATION, AFTER,
          "one CVM is granted a page owned by another", inject=_cross_cvm_grant),
    Fault("leaky-view", inv.POLICY_INFORMATION_FLOW, BEFORE,
          "routed exits show the hypervisor every CVM register", mutation="leaky-view"),
    Fault("dirty-free-page", inv.POLICY_SANITIZATION, AFTER,
          "a page in the free pool holds data", inject=_dirty_free_page),
    Fault("skip-zeroize", inv.POLICY_SANITIZATION, BEFORE,
          "freed pages go back to the pool without being cleared", mutation="skip-zeroize"),
    Fault("cascade-fault", inv.POLICY_FAULT_ISOLATION, BEFORE,
          "a failing call terminates unrelated CVMs", mutation="cascade-fault"),
    # attestation
    Fault("key-leak", inv.ATTEST_KEY_CONFINED, AFTER,
          "the attestation key is copied into hypervisor memory", inject=_key_leak),
]}


def seeded_violation(platform: Platform, fault_id: str) -> Platform:
    """Inject catalog fault ``fault_id`` into ``platform`` and return it."""
    fault = CATALOG.get(fault_id)
    if fault is None:
        raise UnknownFault(f"no fault named {fault_id!r}; known: {', '.join(sorted(CATALOG))}")
    if fault.phase == PRE_BOOT and platform.monitor is not None:
        raise ScriptError(f"fault {fault_id} must be injected before boot")
    if fault.mutation is not None:
        platform.mutations = platform.mutations | {fault.mutation}
    if fault.inject is not None:
        fault.inject(platform)
    return platform


def self_test(fault_id: str | None) -> set[str]:
    """Run the standard workload with one fault (or none) and return the
    invariants the oracle reports as violated."""
    from .scenario import STANDARD_BOOT, boot_platform, run_scenario, standard_scenario

    fault = CATALOG[fault_id] if fault_id is not None else None
    boot = STANDARD_BOOT
    if fault is not None and fault.phase == PRE_BOOT:
        boot = replace(boot, faults=(fault.id,))
    p, _ = boot_platform(boot)
    oracle = Oracle(keep_events=False).feed_all(p.trace)
    if fault is not None and fault.phase == BEFORE:
        seeded_violation(p, fault.id)
    run_scenario(p, standard_scenario(boot), strict=False, oracle=oracle)
    if fault is not None and fault.phase == AFTER:
        seen = len(p.trace)
        seeded_violation(p, fault.id)
        oracle.feed_all(p.trace[seen:])
        oracle.check_state(p, STATE_CHECKS)
    return oracle.violated()
