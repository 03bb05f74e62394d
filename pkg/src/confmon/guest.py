"""Drivers for untrusted software: what the hypervisor and the guests do.

Nothing here is trusted. Register writes are the running domain editing its
own register file; everything else goes through the platform, and every entry
into the monitor is a real trap followed by :func:`confmon.calls.handle_trap`.
"""
from __future__ import annotations

from dataclasses import dataclass

from .calls import handle_trap
from .errors import (
    DomainBusy,
    DomainNotRunnable,
    FsmError,
    NotFromCvm,
    SmCallError,
    UndeclaredCall,
    UnknownDomain,
)
from .hw import HYPERVISOR, PAGE_SIZE, WORD, Platform, PrivilegeLevel, TrapCause, is_confidential_domain
from .monitor import (
    REG_CALL,
    REG_HV_STATUS,
    REG_HV_VALUE,
    REG_STATUS,
    REG_TARGET,
    REG_VALUE,
    CallKind,
    Status,
)

_ERRORS = {
    Status.UNKNOWN_DOMAIN: UnknownDomain,
    Status.NOT_RUNNABLE: DomainNotRunnable,
    Status.BUSY: DomainBusy,
    Status.NOT_FROM_CVM: NotFromCvm,
    Status.UNDECLARED_CALL: UndeclaredCall,
}


@dataclass(frozen=True)
class CallResult:
    status: int
    value: int
    running: int | None  # domain executing on the hart afterwards

    def raise_for_status(self) -> "CallResult":
        if self.status not in (Status.OK, Status.EXIT_ROUTED, Status.EXIT_INTERRUPT,
                               Status.EXIT_TERMINATED):
            status = Status(self.status)
            raise _ERRORS.get(status, SmCallError)(status, status.name)
        return self


def _hypervisor_hart(p: Platform, hart_id: int):
    hart = p.hart(hart_id)
    if hart.domain != HYPERVISOR or hart.privilege is not PrivilegeLevel.MIDDLE or hart.halted:
        raise FsmError(f"hart {hart_id} is not running the hypervisor")
    return hart


def _cvm_hart(p: Platform, hart_id: int):
    hart = p.hart(hart_id)
    if not is_confidential_domain(hart.domain) or hart.privilege is not PrivilegeLevel.LOWEST:
        raise FsmError(f"hart {hart_id} is not running a CVM")
    return hart


def _result(p: Platform, hart_id: int) -> CallResult:
    hart = p.hart(hart_id)
    if hart.domain == HYPERVISOR:
        return CallResult(hart.gprs[REG_HV_STATUS], hart.gprs[REG_HV_VALUE], HYPERVISOR)
    return CallResult(hart.gprs[REG_STATUS], hart.gprs[REG_VALUE], hart.domain)


# ---------------------------------------------------------------- hypervisor

def hypervisor_call(p: Platform, hart_id: int, call_id: int, target: int = 0,
                    regs: dict[int, int] | None = None) -> CallResult:
    hart = _hypervisor_hart(p, hart_id)
    gprs = list(hart.gprs)
    for reg, value in (regs or {}).items():
        gprs[reg] = value
    gprs[REG_CALL], gprs[REG_TARGET] = call_id, target
    hart.gprs = gprs
    p.trap(hart_id, TrapCause.ECALL)
    handle_trap(p, hart_id)
    hart = p.hart(hart_id)
    if hart.domain == HYPERVISOR:
        return CallResult(hart.gprs[REG_HV_STATUS], hart.gprs[REG_HV_VALUE], HYPERVISOR)
    return CallResult(Status.OK, 0, hart.domain)


def load_vm_image(p: Platform, hart_id: int, first_page: int, pages: list[bytes]) -> None:
    """The hypervisor writes a VM image into its own memory."""
    _hypervisor_hart(p, hart_id)
    for i, data in enumerate(pages):
        p.write_phys(hart_id, (first_page + i) * PAGE_SIZE, data.ljust(PAGE_SIZE, b"\0"))


def promote(p: Platform, hart_id: int, first_page: int, count: int) -> int:
    """Ask the monitor to turn the VM image at ``first_page`` into a CVM."""
    wl = p.monitor.whitelist
    res = hypervisor_call(p, hart_id, wl.id_of(CallKind.PROMOTE_TO_CVM), first_page,
                          {5: count})
    res.raise_for_status()
    return res.value


def resume(p: Platform, hart_id: int, cvm_id: int, answer: dict[int, int] | None = None) -> CallResult:
    """Run a CVM on this hart. ``answer`` holds the hypervisor's reply
    registers for a request the CVM routed out earlier."""
    wl = p.monitor.whitelist
    return hypervisor_call(p, hart_id, wl.id_of(CallKind.RESUME), cvm_id, answer).raise_for_status()


def terminate(p: Platform, hart_id: int, cvm_id: int) -> CallResult:
    wl = p.monitor.whitelist
    return hypervisor_call(p, hart_id, wl.id_of(CallKind.TERMINATE), cvm_id).raise_for_status()


def hv_read(p: Platform, hart_id: int, addr: int, width: int = WORD) -> bytes:
    _hypervisor_hart(p, hart_id)
    return p.read_phys(hart_id, addr, width)


def hv_write(p: Platform, hart_id: int, addr: int, data: bytes) -> None:
    _hypervisor_hart(p, hart_id)
    p.write_phys(hart_id, addr, data)


# ---------------------------------------------------------------- guests

def cvm_ecall(p: Platform, hart_id: int, call_id: int, regs: dict[int, int] | None = None) -> CallResult:
    hart = _cvm_hart(p, hart_id)
    gprs = list(hart.gprs)
    for reg, value in (regs or {}).items():
        gprs[reg] = value
    gprs[REG_CALL] = call_id
    hart.gprs = gprs
    p.trap(hart_id, TrapCause.ECALL)
    handle_trap(p, hart_id)
    return _result(p, hart_id)


def _translate(p: Platform, hart_id: int, gaddr: int) -> tuple[int, int | None] | None:
    """Hardware page walk. Returns (physical address, owning token serial),
    or None when the guest page is unmapped."""
    d = p.monitor.cvm(p.hart(hart_id).domain)
    gpn, off = divmod(gaddr, PAGE_SIZE)
    if gpn in d.shared:
        return d.shared[gpn] + off, None
    token = d.page_table.mappings.get(gpn)
    if token is None:
        return None
    entry = int.from_bytes(p.peek(d.page_table.root.base + gpn * WORD, WORD), "little")
    if entry == 0:
        return None
    return (entry - 1) * PAGE_SIZE + off, token.serial


def cvm_store(p: Platform, hart_id: int, gaddr: int, value: int, width: int = WORD) -> CallResult | None:
    """Guest store. Unmapped addresses fault into the monitor as MMIO."""
    _cvm_hart(p, hart_id)
    hit = _translate(p, hart_id, gaddr)
    if hit is None:
        p.trap(hart_id, TrapCause.GUEST_PAGE_FAULT, fault=("store", gaddr, width, value))
        handle_trap(p, hart_id)
        return _result(p, hart_id)
    phys, serial = hit
    p.write_phys(hart_id, phys, value.to_bytes(width, "little"), token=serial)
    return None


def cvm_load(p: Platform, hart_id: int, gaddr: int, width: int = WORD) -> int | CallResult:
    _cvm_hart(p, hart_id)
    hit = _translate(p, hart_id, gaddr)
    if hit is None:
        p.trap(hart_id, TrapCause.GUEST_PAGE_FAULT, fault=("load", gaddr, width, 0))
        handle_trap(p, hart_id)
        return _result(p, hart_id)
    phys, serial = hit
    return int.from_bytes(p.read_phys(hart_id, phys, width, token=serial), "little")


def cvm_share(p: Platform, hart_id: int, guest_page: int) -> CallResult:
    wl = p.monitor.whitelist
    return cvm_ecall(p, hart_id, wl.id_of(CallKind.SHARE_PAGE), {0: guest_page})


def cvm_attest(p: Platform, hart_id: int, nonce: bytes):
    """Request a report; the monitor leaves it in the CVM's report buffer."""
    if len(nonce) != 32:
        raise ValueError("nonce is 32 bytes")
    wl = p.monitor.whitelist
    cvm_id = p.hart(hart_id).domain
    regs = {i: int.from_bytes(nonce[8 * i:8 * i + 8], "little") for i in range(4)}
    res = cvm_ecall(p, hart_id, wl.id_of(CallKind.ATTEST), regs)
    res.raise_for_status()
    return p.monitor.domains[cvm_id].last_report


def cvm_terminate_self(p: Platform, hart_id: int) -> CallResult:
    wl = p.monitor.whitelist
    cvm_id = p.hart(hart_id).domain
    return cvm_ecall(p, hart_id, wl.id_of(CallKind.TERMINATE), {REG_TARGET: cvm_id})


# ---------------------------------------------------------------- interrupts

def raise_interrupt(p: Platform, hart_id: int, irq: int) -> None:
    """Deliver an interrupt. Monitor-bound ones run the full monitor path;
    hypervisor-bound ones are acknowledged by the hypervisor's handler."""
    hart = p.hart(hart_id)
    resume_pc = hart.pc
    record = p.deliver_interrupt(irq, hart_id)
    if record.new_privilege is PrivilegeLevel.HIGHEST:
        handle_trap(p, hart_id)
    else:
        p.return_to(hart_id, record.new_privilege, resume_pc, interrupts=True)
