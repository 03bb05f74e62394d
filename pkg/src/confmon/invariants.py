"""Invariant identifiers and the checks that need only a platform snapshot.

Trace-based checks live in :mod:`confmon.harness.oracle`; the two halves share
these identifiers. A state check returns a list of human-readable problems,
empty when the invariant holds.
"""
from __future__ import annotations

import hashlib
from itertools import combinations
from typing import Callable

from .hw import (
    HYPERVISOR,
    PAGE_SIZE,
    SM_DOMAIN,
    Platform,
    PrivilegeLevel,
    covered,
    is_confidential_domain,
    overlaps,
)

# hardware contract
HW_PRIVILEGE_MONOTONE = "hw.privilege-monotone"
HW_ISOLATION_SOUND = "hw.isolation-sound"
HW_SEED_LOCK_MONOTONE = "hw.seed-lock-monotone"
HW_HANDLER_EXIT_INTERRUPTS = "hw.handler-exit-interrupts"

# initialisation
INIT_SM_EXCLUSIVE_HIGHEST = "init.sm-exclusive-highest"
INIT_ISOLATION_GUARDS_SM = "init.isolation-guards-sm"
INIT_SM_IN_CONFIDENTIAL = "init.sm-in-confidential"
INIT_IRQ_PINNED_TO_SM = "init.irq-pinned-to-sm"
INIT_SEED_LOCKED = "init.seed-locked"
INIT_BOOT_ORDERING = "init.boot-ordering"
INIT_SM_INTEGRITY = "init.sm-integrity"

# runtime state machine
FSM_INTERRUPTS_DISABLED = "fsm.interrupts-disabled"
FSM_ENTER_TO_C = "fsm.enter-to-c"
FSM_EXIT_TO_NC = "fsm.exit-to-nc"
FSM_ENTER_SAVES_CONTEXT = "fsm.enter-saves-context"
FSM_EXIT_SANITIZES = "fsm.exit-sanitizes"
FSM_STATE_CONFINED = "fsm.state-confined"
FSM_NODE_PATH = "fsm.node-path"

# memory tracker
MT_FIXED_TOKEN_SET = "mt.fixed-token-set"
MT_DISJOINT_TOKENS = "mt.disjoint-tokens"
MT_ACCESS_VIA_TOKEN = "mt.access-via-token"
MT_EXCLUSIVE_OWNERSHIP = "mt.exclusive-ownership"

# security policies
POLICY_DATA_ISOLATION = "policy.data-isolation"
POLICY_INFORMATION_FLOW = "policy.information-flow"
POLICY_SANITIZATION = "policy.sanitization"
POLICY_FAULT_ISOLATION = "policy.fault-isolation"

# attestation
ATTEST_KEY_CONFINED = "attest.key-confined"

INIT_ESTABLISHED = (
    INIT_SM_EXCLUSIVE_HIGHEST,
    INIT_ISOLATION_GUARDS_SM,
    INIT_SM_IN_CONFIDENTIAL,
    INIT_IRQ_PINNED_TO_SM,
    INIT_SEED_LOCKED,
)

ALL_INVARIANTS = (
    HW_PRIVILEGE_MONOTONE, HW_ISOLATION_SOUND, HW_SEED_LOCK_MONOTONE, HW_HANDLER_EXIT_INTERRUPTS,
    INIT_SM_EXCLUSIVE_HIGHEST, INIT_ISOLATION_GUARDS_SM, INIT_SM_IN_CONFIDENTIAL,
    INIT_IRQ_PINNED_TO_SM, INIT_SEED_LOCKED, INIT_BOOT_ORDERING, INIT_SM_INTEGRITY,
    FSM_INTERRUPTS_DISABLED, FSM_ENTER_TO_C, FSM_EXIT_TO_NC, FSM_ENTER_SAVES_CONTEXT,
    FSM_EXIT_SANITIZES, FSM_STATE_CONFINED, FSM_NODE_PATH,
    MT_FIXED_TOKEN_SET, MT_DISJOINT_TOKENS, MT_ACCESS_VIA_TOKEN, MT_EXCLUSIVE_OWNERSHIP,
    POLICY_DATA_ISOLATION, POLICY_INFORMATION_FLOW, POLICY_SANITIZATION, POLICY_FAULT_ISOLATION,
    ATTEST_KEY_CONFINED,
)


def family(invariant: str) -> str:
    return invariant.split(".", 1)[0]


# --------------------------------------------------------------------- init

def check_sm_exclusive_highest(p: Platform) -> list[str]:
    out = []
    for h in p.harts:
        if h.privilege is PrivilegeLevel.HIGHEST and h.domain != SM_DOMAIN:
            out.append(f"hart {h.hart_id} runs domain {h.domain} at the highest privilege")
        if h.domain == SM_DOMAIN and h.privilege is not PrivilegeLevel.HIGHEST:
            out.append(f"hart {h.hart_id} runs monitor code below the highest privilege")
    return out


def check_isolation_guards_sm(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None:
        return []
    cfg = p.isolation
    protected = (sm.layout.sm_region, sm.layout.control_region)
    out = []
    for domain, ranges in cfg.domain_grants:
        for rng in ranges:
            if domain != SM_DOMAIN and any(overlaps(rng, r) for r in protected):
                out.append(f"grant {rng} to domain {domain} exposes monitor memory")
            if not is_confidential_domain(domain) and cfg.is_confidential(rng):
                out.append(f"grant {rng} to non-confidential domain {domain} hits confidential memory")
    for rng, owner in cfg.shared_pages:
        if any(overlaps(rng, r) for r in protected):
            out.append(f"shared page {rng} of domain {owner} overlaps monitor memory")
    return out


def check_sm_in_confidential(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None:
        return []
    out = []
    for name, rng in (("monitor region", sm.layout.sm_region),
                      ("control data region", sm.layout.control_region)):
        if not covered(rng, p.isolation.confidential_regions):
            out.append(f"{name} {rng} is not entirely confidential")
    return out


def check_irq_pinned_to_sm(p: Platform) -> list[str]:
    sm = p.monitor
    out = []
    if not p.irqc.pinned:
        out.append("no interrupt is pinned to the monitor")
    for h in range(p.hart_count):
        for irq in sorted(p.irqc.pinned):
            route = p.irqc.route(h, irq)
            if route is None or route.target is not PrivilegeLevel.HIGHEST:
                out.append(f"pinned irq {irq} on hart {h} does not reach the highest privilege")
            elif sm is not None and not sm.layout.sm_region[0] <= route.handler < sm.layout.sm_region[1]:
                out.append(f"pinned irq {irq} on hart {h} has a handler outside the monitor")
    return out


def check_seed_locked(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None:
        return []
    out = []
    if not p.endorsement.locked:
        out.append("endorsement seed is readable")
    lo, hi = sm.layout.control_region
    if not (lo <= sm.key_addr and sm.key_addr + 32 <= hi):
        out.append(f"attestation key at {sm.key_addr:#x} is outside the control data region")
    return out


def check_sm_integrity(p: Platform) -> list[str]:
    """The monitor image in memory still matches its boot measurement."""
    sm = p.monitor
    if sm is None or not sm.boot_chain:
        return []
    image = p.peek(sm.layout.sm_region[0], sm.sm_image_len)
    if hashlib.sha256(image).digest() != sm.boot_chain[0].digest:
        return ["monitor image differs from its boot measurement"]
    return []


# --------------------------------------------------------------------- fsm

def check_interrupts_disabled(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None:
        return []
    return [f"hart {h} runs the monitor with interrupts enabled"
            for h, fsm in enumerate(sm.harts)
            if fsm.node is not None and p.harts[h].interrupts_enabled]


def check_exit_sanitized(p: Platform) -> list[str]:
    """Microarchitectural residue of one domain visible to another. Not part
    of the per-step set: the oracle checks every exit in the trace instead."""
    sm = p.monitor
    if sm is None:
        return []
    out = []
    for h in p.harts:
        owner = h.microarch.taint_owner
        if owner is not None and owner != h.domain:
            out.append(f"hart {h.hart_id} runs domain {h.domain} with state left by domain {owner}")
    return out


# --------------------------------------------------------------------- tracker

def _all_tokens(p: Platform) -> list:
    sm = p.monitor
    tokens = list(sm.pool.free.values())
    for pt in sm.page_tables().values():
        tokens.extend(pt.tokens())
    return tokens


def check_fixed_token_set(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None or sm.pool is None:
        return []
    lo, hi = sm.layout.tracker_range
    expected = (hi - lo) // PAGE_SIZE
    out = []
    if sm.pool.total_created != expected:
        out.append(f"total_created is {sm.pool.total_created}, expected {expected}")
    serials = {t.serial for t in _all_tokens(p)}
    if serials != set(range(expected)):
        missing = sorted(set(range(expected)) - serials)
        extra = sorted(serials - set(range(expected)))
        out.append(f"token set changed: missing {missing}, unknown {extra}")
    return out


def check_disjoint_tokens(p: Platform) -> list[str]:
    """Brute-force pairwise check over every distinct token."""
    sm = p.monitor
    if sm is None or sm.pool is None:
        return []
    by_serial = {}
    for t in _all_tokens(p):
        by_serial.setdefault(t.serial, t)
    out = []
    for t in by_serial.values():
        if t.base % PAGE_SIZE or t.size != PAGE_SIZE:
            out.append(f"token #{t.serial} is not one aligned page")
    for a, b in combinations(by_serial.values(), 2):
        if overlaps(a.range, b.range):
            out.append(f"tokens #{a.serial} and #{b.serial} overlap")
    return out


def check_exclusive_ownership(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None or sm.pool is None:
        return []
    out = []
    page_owner: dict[int, str] = {}
    serial_home: dict[int, str] = {}

    def claim(token, where: str) -> None:
        if token.serial in serial_home:
            out.append(f"token #{token.serial} held by {serial_home[token.serial]} and {where}")
        serial_home.setdefault(token.serial, where)
        if token.page in page_owner and page_owner[token.page] != where:
            out.append(f"page {token.page} owned by {page_owner[token.page]} and {where}")
        page_owner.setdefault(token.page, where)

    for t in sm.pool.free.values():
        claim(t, "pool")
    for owner, pt in sorted(sm.page_tables().items()):
        for t in pt.tokens():
            claim(t, f"domain {owner}")
    return out


# --------------------------------------------------------------------- policies

def check_data_isolation(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None:
        return []
    out = []
    for domain, ranges in p.isolation.domain_grants:
        if not is_confidential_domain(domain):
            continue
        d = sm.cvm(domain)
        mine = [t.range for t in d.page_table.mappings.values()] if d and d.page_table else []
        for rng in ranges:
            if not covered(rng, mine):
                out.append(f"CVM {domain} is granted {rng}, which it does not own")
    for rng, owner in p.isolation.shared_pages:
        d = sm.cvm(owner)
        if d is None or rng[0] not in d.shared.values():
            out.append(f"shared page {rng} is not registered to CVM {owner}")
    return out


def check_sanitization(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None or sm.pool is None:
        return []
    return [f"free page {t.page} (token #{t.serial}) holds data"
            for t in sm.pool.free.values() if not p.page_is_zero(t.page)]


def check_key_confined(p: Platform) -> list[str]:
    sm = p.monitor
    if sm is None or not sm.public_key:
        return []
    key = p.peek(sm.key_addr, 32)
    lo, hi = sm.layout.control_region
    out = []
    for page, image in sorted(p.pages.items()):
        start = page * PAGE_SIZE
        if lo <= start < hi:
            continue
        if key in image:
            out.append(f"attestation key material found in page {page}")
    return out


STATE_CHECKS: dict[str, Callable[[Platform], list[str]]] = {
    INIT_SM_EXCLUSIVE_HIGHEST: check_sm_exclusive_highest,
    INIT_ISOLATION_GUARDS_SM: check_isolation_guards_sm,
    INIT_SM_IN_CONFIDENTIAL: check_sm_in_confidential,
    INIT_IRQ_PINNED_TO_SM: check_irq_pinned_to_sm,
    INIT_SEED_LOCKED: check_seed_locked,
    INIT_SM_INTEGRITY: check_sm_integrity,
    FSM_INTERRUPTS_DISABLED: check_interrupts_disabled,
    MT_FIXED_TOKEN_SET: check_fixed_token_set,
    MT_DISJOINT_TOKENS: check_disjoint_tokens,
    MT_EXCLUSIVE_OWNERSHIP: check_exclusive_ownership,
    POLICY_DATA_ISOLATION: check_data_isolation,
    POLICY_SANITIZATION: check_sanitization,
    ATTEST_KEY_CONFINED: check_key_confined,
}

# Checks cheap enough to run after every scheduler step; the quadratic
# disjointness scan is left to callers that want it.
STEP_CHECKS = {k: v for k, v in STATE_CHECKS.items() if k != MT_DISJOINT_TOKENS}


def check_state(p: Platform, checks: dict[str, Callable] | None = None) -> dict[str, list[str]]:
    checks = STATE_CHECKS if checks is None else checks
    found = {}
    for name, fn in checks.items():
        problems = fn(p)
        if problems:
            found[name] = problems
    return found


def hypervisor_like(domain: int | None) -> bool:
    return domain == HYPERVISOR
