"""Measured boot and monitor initialisation.

:func:`secure_boot` runs on hart 0 straight out of reset, while every other
hart is parked. It measures the images, fences off confidential memory,
creates the page-token set, pins the monitor's interrupt, derives and stores
the attestation key, locks the endorsement seed, flushes microarchitectural
state and only then hands every hart to the hypervisor at the middle
privilege.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .attestation import SCHEME, Measurement, derive_from_platform, measure
from .errors import BootSequenceError, ConfmonError
from .hw import (
    BOOT_ROM,
    HYPERVISOR,
    IRQ_EXTERNAL,
    IRQ_SM,
    IRQ_TIMER,
    PAGE_SIZE,
    IsolationConfig,
    Platform,
    PrivilegeLevel,
    Range,
)
from .invariants import INIT_ESTABLISHED, INIT_SM_INTEGRITY, STATE_CHECKS, check_state
from .monitor import HartFsm, Layout, MonitorState, WhitelistTable
from .tracker import BootCapability, init_tracker

DEFAULT_SHARED_PAGES = 4
MIN_HYPERVISOR_PAGES = 1


@dataclass(frozen=True)
class BootReport:
    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    measurements: tuple[Measurement, ...]
    sm_region: Range
    control_data_region: Range
    attestation_key_id: str
    public_key: bytes
    invariants_established: frozenset[str]
    layout: Layout
    scheme: str = SCHEME

    def to_json(self) -> dict:
        return {
            "measurements": [m.to_json() for m in self.measurements],
            "sm_region": list(self.sm_region),
            "control_data_region": list(self.control_data_region),
            "attestation_key_id": self.attestation_key_id,
            "public_key": self.public_key.hex(),
            "scheme": self.scheme,
            "invariants_established": sorted(self.invariants_established),
            "layout": self.layout.to_json(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def _pages(n_bytes: int) -> int:
    return max(1, -(-n_bytes // PAGE_SIZE))


def plan_layout(platform: Platform, sm_image: bytes, hypervisor_image: bytes,
                tracker_pages: int | None = None,
                shared_pages: int = DEFAULT_SHARED_PAGES) -> Layout:
    """Carve physical memory into ROM | monitor | control | tracker |
    shared reserve | hypervisor. The first three after the ROM form one
    contiguous confidential region."""
    total = platform.page_count
    sm_pages = _pages(len(sm_image))
    ctrl_pages = Layout.control_pages(platform.hart_count)
    hv_min = max(MIN_HYPERVISOR_PAGES, _pages(len(hypervisor_image)))
    first = BOOT_ROM[1] // PAGE_SIZE
    spare = total - first - sm_pages - ctrl_pages - shared_pages - hv_min
    if tracker_pages is None:
        tracker_pages = max(2, spare // 2)
    if tracker_pages < 1 or tracker_pages > spare:
        raise BootSequenceError("partition", f"{total} pages cannot hold the requested layout")
    sm_lo = first
    ctrl_lo = sm_lo + sm_pages
    trk_lo = ctrl_lo + ctrl_pages
    sh_lo = trk_lo + tracker_pages
    hv_lo = sh_lo + shared_pages

    def r(a: int, b: int) -> Range:
        return (a * PAGE_SIZE, b * PAGE_SIZE)

    return Layout(r(sm_lo, ctrl_lo), r(ctrl_lo, trk_lo), r(trk_lo, sh_lo), r(sh_lo, hv_lo),
                  r(hv_lo, total))


def secure_boot(platform: Platform, sm_image: bytes, hypervisor_image: bytes, *,
                tracker_pages: int | None = None, shared_pages: int = DEFAULT_SHARED_PAGES,
                whitelist: WhitelistTable | None = None) -> BootReport:
    p = platform
    step = "precondition"
    try:
        if p.monitor is not None:
            raise BootSequenceError(step, "AlreadyInitialized")
        if p.harts[0].privilege is not PrivilegeLevel.HIGHEST or any(not h.halted for h in p.harts[1:]):
            raise BootSequenceError(step, "platform is not fresh out of reset")

        step = "measure"
        chain = (measure(sm_image, "sm"), measure(hypervisor_image, "hypervisor"))
        p.trace.record(0, p.harts[0].domain, "boot_step", step=step,
                       digests=[m.digest for m in chain])

        step = "partition"
        layout = plan_layout(p, sm_image, hypervisor_image, tracker_pages, shared_pages)
        p.write_phys(0, layout.sm_region[0], sm_image)
        p.write_phys(0, layout.hypervisor_region[0], hypervisor_image)
        confidential = (layout.sm_region[0], layout.tracker_range[1])
        p.set_isolation(0, IsolationConfig.build([confidential], readonly=[BOOT_ROM]))
        sm = MonitorState(layout, whitelist or WhitelistTable.load(),
                          harts=[HartFsm() for _ in range(p.hart_count)],
                          shared_free=list(range(*layout.shared_reserve, PAGE_SIZE)),
                          boot_chain=chain, key_addr=layout.key_addr,
                          sm_image_len=len(sm_image))
        p.monitor = sm

        step = "tracker"
        # Memory survives a processor reset; a fresh token promises a zero page.
        for page in range(layout.tracker_range[0] // PAGE_SIZE, layout.tracker_range[1] // PAGE_SIZE):
            if not p.page_is_zero(page):
                p.zero_page(0, page)
        sm.pool = init_tracker(p, *layout.tracker_range, BootCapability())

        step = "interrupts"
        p.set_trap_vector(0, layout.sm_handler)
        for h in range(p.hart_count):
            p.configure_interrupt(0, IRQ_SM, PrivilegeLevel.HIGHEST, layout.sm_handler, on_hart=h)
            for irq in (IRQ_TIMER, IRQ_EXTERNAL):
                p.configure_interrupt(0, irq, PrivilegeLevel.MIDDLE, layout.hypervisor_region[0],
                                      on_hart=h)

        step = "attestation-key"
        key = derive_from_platform(p, 0, chain)
        p.write_phys(0, layout.key_addr, key.private_bytes)
        sm.public_key = key.public_bytes
        if "late-seed-lock" not in p.mutations:
            p.lock_seed(0)

        step = "sanitize"
        for h in range(p.hart_count):
            p.clear_microarch(h)

        step = "handoff"
        report = BootReport(chain, layout.sm_region, layout.control_region, key.key_id,
                            key.public_bytes, frozenset(INIT_ESTABLISHED), layout)
        p.trace.record(0, p.harts[0].domain, "boot_report", layout=layout,
                       whitelist=sm.whitelist, key_id=key.key_id, public_key=key.public_bytes,
                       measurements=list(chain))
        for h in range(p.hart_count):
            p.return_to(h, PrivilegeLevel.MIDDLE, layout.hypervisor_region[0], domain=HYPERVISOR,
                        interrupts=True)
        if "late-seed-lock" in p.mutations:
            p.lock_seed(0)
        p.trace.record(None, None, "boot_done")
    except BootSequenceError:
        raise
    except ConfmonError as exc:
        raise BootSequenceError(step, f"{type(exc).__name__}: {exc}") from exc

    missing = verify_init_invariants(p) & set(INIT_ESTABLISHED)
    if missing:
        raise BootSequenceError("verify", f"invariants not established: {sorted(missing)}")
    sm.report = report
    return report


INIT_CHECKS = {k: STATE_CHECKS[k] for k in INIT_ESTABLISHED + (INIT_SM_INTEGRITY,)}


def verify_init_invariants(platform: Platform) -> set[str]:
    """Ids of the initialisation invariants that do not hold right now."""
    return set(check_state(platform, INIT_CHECKS))
