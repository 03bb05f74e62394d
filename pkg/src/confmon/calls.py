"""Monitor-side call handling: the dispatcher behind the trap vector, the
CVM lifecycle and the calls the monitor serves itself.

``handle_trap`` runs one complete monitor invocation as a single scheduler
step: enter, route, transform, exit. Errors caused by the caller's inputs
never escape as exceptions; they come back as a status code in the caller's
registers, and no other domain is touched.
"""
from __future__ import annotations

from .attestation import AttestationKey, AttestationReport, measure, sign_report
from .errors import OutOfMemory, SmCallError, UnknownDomain
from .fsm import (
    Direction,
    FsmNode,
    _runnable_cvm,
    apply_state_transformation,
    exit_to_domain,
    goto,
    load_context,
    monitor,
    save_context,
    trap_entry,
    transition_c_to_nc,
    transition_nc_to_c,
    write_registers,
)
from .hw import HYPERVISOR, NUM_GPRS, PAGE_SIZE, SEED_LEN, Platform, TrapCause
from .monitor import (
    REG_CALL,
    REG_HV_STATUS,
    REG_HV_VALUE,
    REG_STATUS,
    REG_TARGET,
    REG_VALUE,
    SLOT_BYTES,
    CallKind,
    DomainKind,
    Lifecycle,
    MonitorState,
    SecurityDomain,
    Status,
)
from .tracker import (
    PT_ENTRIES,
    allocate,
    map_page,
    page_table_new,
    release_page_table,
    to_allocated,
    token_write_bytes,
)

REG_PROMOTE_COUNT = 5
NONCE_REGS = (0, 1, 2, 3)


def _emit(p: Platform, hart_id: int, op: str, **args) -> None:
    p.trace.record(hart_id, p.harts[hart_id].domain, op, **args)


def _lifecycle(p: Platform, hart_id: int, d: SecurityDomain, state: Lifecycle) -> None:
    old = d.lifecycle
    d.lifecycle = state
    _emit(p, hart_id, "lifecycle", target=d.id, kind=d.kind.value, old=old.value, new=state.value)


def measure_image(pages: list[bytes]) -> bytes:
    """Digest over an 8-byte page count followed by the pages in guest order."""
    return measure(len(pages).to_bytes(8, "little") + b"".join(pages), "cvm").digest


# ---------------------------------------------------------------- lifecycle operations

def promote_to_cvm(p: Platform, hart_id: int, first_page: int, count: int) -> tuple[Status, int]:
    """Copy a VM image out of hypervisor memory into fresh confidential
    pages and make it a runnable CVM. All-or-nothing: on any failure the
    pool and domain table are left exactly as they were."""
    sm = monitor(p)
    lo, hi = sm.layout.hypervisor_region
    if not (1 <= count <= PT_ENTRIES and lo <= first_page * PAGE_SIZE
            and (first_page + count) * PAGE_SIZE <= hi):
        return Status.INVALID, 0
    if not sm.free_slots:
        return Status.OUT_OF_MEMORY, 0
    vm_id = sm.next_domain
    d = SecurityDomain(vm_id, DomainKind.VM, image_pages=tuple(range(first_page, first_page + count)))
    pt = None
    images = []
    try:
        pt = page_table_new(sm.pool, vm_id, p, hart_id)
        for gpn, page in enumerate(d.image_pages):
            data = p.read_phys(hart_id, page * PAGE_SIZE, PAGE_SIZE)
            images.append(data)
            token = to_allocated(allocate(sm.pool, p, hart_id), p, hart_id)
            token_write_bytes(token, 0, data, p, hart_id)
            map_page(pt, gpn, token, p, hart_id)
    except OutOfMemory:
        if pt is not None:
            release_page_table(sm.pool, pt, p, hart_id)
        return Status.OUT_OF_MEMORY, 0
    sm.next_domain += 1
    sm.domains[vm_id] = d
    d.kind = DomainKind.CVM
    d.page_table = pt
    d.measurement = measure_image(images)
    d.slot = sm.free_slots.pop(0)
    d.image_pages = ()
    save_context(p, hart_id, vm_id, [0] * NUM_GPRS, 0)
    _lifecycle(p, hart_id, d, Lifecycle.RUNNABLE)
    _emit(p, hart_id, "promote", cvm=vm_id, pages=count, measurement=d.measurement)
    return Status.OK, vm_id


def terminate_cvm(p: Platform, hart_id: int, cvm_id: int) -> Status:
    """Return every page of a CVM to the pool (zeroized) and forget it.
    Terminating an already terminated CVM is a successful no-op."""
    sm = monitor(p)
    d = sm.cvm(cvm_id)
    if d is None:
        return Status.UNKNOWN_DOMAIN
    if d.lifecycle is Lifecycle.TERMINATED:
        return Status.OK
    if d.busy_on is not None:
        return Status.BUSY
    release_page_table(sm.pool, d.page_table, p, hart_id)
    d.page_table = None
    for gpn, addr in sorted(d.shared.items()):
        p.zero_page(hart_id, addr // PAGE_SIZE)
        sm.shared_free.append(addr)
    sm.shared_free.sort()
    d.shared = {}
    p.set_isolation(hart_id, p.isolation.without_domain(cvm_id))
    p.write_phys(hart_id, sm.slot_addr(d, p.hart_count), bytes(SLOT_BYTES))
    sm.free_slots.append(d.slot)
    sm.free_slots.sort()
    d.slot = None
    d.pending = None
    _lifecycle(p, hart_id, d, Lifecycle.TERMINATED)
    return Status.OK


def share_page(p: Platform, hart_id: int, cvm_id: int, guest_page: int) -> tuple[Status, int]:
    """Back ``guest_page`` of a CVM with a zeroed non-confidential page that
    the hypervisor can also reach. Returns the physical address."""
    sm = monitor(p)
    d = sm.cvm(cvm_id)
    if d is None or d.lifecycle is not Lifecycle.RUNNABLE:
        return Status.UNKNOWN_DOMAIN, 0
    if not 0 <= guest_page < PT_ENTRIES:
        return Status.INVALID, 0
    if guest_page in d.page_table.mappings or guest_page in d.shared:
        return Status.ALREADY_MAPPED, 0
    if not sm.shared_free:
        return Status.OUT_OF_MEMORY, 0
    addr = sm.shared_free.pop(0)
    p.zero_page(hart_id, addr // PAGE_SIZE)
    p.set_isolation(hart_id, p.isolation.with_shared((addr, addr + PAGE_SIZE), cvm_id))
    d.shared[guest_page] = addr
    _emit(p, hart_id, "share_page", cvm=cvm_id, gpn=guest_page, addr=addr)
    return Status.OK, addr


def attest(p: Platform, hart_id: int, cvm_id: int, nonce: bytes) -> AttestationReport:
    """Sign (measurement, nonce, boot chain) with the attestation key kept in
    the control data region. Must run inside the monitor."""
    sm = monitor(p)
    d = sm.cvm(cvm_id)
    if d is None or d.lifecycle is not Lifecycle.RUNNABLE:
        raise UnknownDomain(Status.UNKNOWN_DOMAIN, f"no live CVM {cvm_id}")
    key = AttestationKey(p.read_phys(hart_id, sm.key_addr, SEED_LEN))
    report = sign_report(key, d.measurement, nonce, sm.boot_chain)
    d.last_report = report
    _emit(p, hart_id, "attest", cvm=cvm_id, nonce=nonce, key_id=report.key_id)
    return report


# ---------------------------------------------------------------- dispatcher

def handle_trap(p: Platform, hart_id: int) -> None:
    """Serve the trap currently pending on ``hart_id`` from entry to exit."""
    node = trap_entry(p, hart_id)
    if node is FsmNode.NC_ENTER:
        _serve_hypervisor(p, hart_id)
    else:
        _serve_cvm(p, hart_id)


def _record_call(p: Platform, hart_id: int, caller: int, call_id: int | None,
                 target: int | None, status: Status) -> None:
    _emit(p, hart_id, "sm_call", caller=caller, call=call_id, target=target, status=status)
    if status is not Status.OK and "cascade-fault" in p.mutations:
        sm = monitor(p)
        for d in sorted(sm.domains.values(), key=lambda d: d.id):
            if d.id != caller and d.lifecycle is Lifecycle.RUNNABLE and d.busy_on is None:
                terminate_cvm(p, hart_id, d.id)


def _finish_nc(p: Platform, hart_id: int, status: Status, value: int) -> None:
    goto(p, hart_id, FsmNode.NC_TRANSFORM)
    write_registers(p, hart_id, HYPERVISOR, {REG_HV_STATUS: int(status), REG_HV_VALUE: value})
    goto(p, hart_id, FsmNode.NC_EXIT)
    exit_to_domain(p, hart_id, HYPERVISOR)


def _serve_hypervisor(p: Platform, hart_id: int) -> None:
    sm = monitor(p)
    trap = p.harts[hart_id].trap
    regs = sm.harts[hart_id].saved_gprs
    if "skip-route-node" not in p.mutations:
        goto(p, hart_id, FsmNode.NC_ROUTE)
    if trap.cause is TrapCause.INTERRUPT:
        _record_call(p, hart_id, HYPERVISOR, None, None, Status.OK)
        _finish_nc(p, hart_id, Status.OK, 0)
        return
    call_id, target = regs[REG_CALL], regs[REG_TARGET]
    spec = sm.whitelist.get(call_id)
    value = 0
    if spec is None or spec.caller == "cvm":
        status = (Status.NOT_FROM_CVM if spec is not None
                  and spec.kind in (CallKind.SHARE_PAGE, CallKind.ATTEST) else Status.UNDECLARED_CALL)
    elif spec.kind is CallKind.PROMOTE_TO_CVM:
        status, value = promote_to_cvm(p, hart_id, target, regs[REG_PROMOTE_COUNT])
    elif spec.kind is CallKind.TERMINATE:
        status = terminate_cvm(p, hart_id, target)
    elif spec.kind is CallKind.RESUME:
        try:
            _runnable_cvm(sm, target)
        except SmCallError as exc:
            status = Status(exc.status)
        else:
            _resume(p, hart_id, target, regs)
            return
    else:
        status = Status.UNDECLARED_CALL
    _record_call(p, hart_id, HYPERVISOR, call_id, target, status)
    _finish_nc(p, hart_id, status, value)


def _resume(p: Platform, hart_id: int, cvm_id: int, hv_regs: list[int]) -> None:
    sm = monitor(p)
    transition_nc_to_c(p, hart_id, cvm_id)
    d = sm.domains[cvm_id]
    if d.pending is not None:
        spec = sm.whitelist.get(d.pending)
        before = load_context(p, hart_id, cvm_id).gprs
        after = apply_state_transformation(before, spec, Direction.NC_TO_C,
                                           incoming=hv_regs, mutations=p.mutations)
        changed = {r: after[r] for r in range(NUM_GPRS) if after[r] != before[r]}
        write_registers(p, hart_id, cvm_id, changed)
        _emit(p, hart_id, "state_transform", direction=Direction.NC_TO_C.value, cvm=cvm_id,
              call=d.pending, regs=sorted(changed))
        d.pending = None
    _record_call(p, hart_id, HYPERVISOR, sm.whitelist.id_of(CallKind.RESUME), cvm_id, Status.OK)
    goto(p, hart_id, FsmNode.C_EXIT)
    exit_to_domain(p, hart_id, cvm_id)


def _finish_c(p: Platform, hart_id: int, cvm_id: int, status: Status, value: int) -> None:
    goto(p, hart_id, FsmNode.C_TRANSFORM)
    write_registers(p, hart_id, cvm_id, {REG_STATUS: int(status), REG_VALUE: value})
    goto(p, hart_id, FsmNode.C_EXIT)
    exit_to_domain(p, hart_id, cvm_id)


def _route_out(p: Platform, hart_id: int, d: SecurityDomain, call_id: int | None,
               view: list[int], reason: Status) -> None:
    """Hand the CVM's request (or just the fact it stopped) to the hypervisor."""
    transition_c_to_nc(p, hart_id)
    d.pending = call_id
    view = list(view)
    view[REG_HV_STATUS] = int(reason)
    view[REG_HV_VALUE] = d.id
    _emit(p, hart_id, "state_transform", direction=Direction.C_TO_NC.value, cvm=d.id,
          call=call_id, view=view)
    write_registers(p, hart_id, HYPERVISOR, dict(enumerate(view)))
    goto(p, hart_id, FsmNode.NC_EXIT)
    exit_to_domain(p, hart_id, HYPERVISOR)


def mmio_request(sm: MonitorState, fault: tuple) -> tuple[int, list[int]]:
    """Register image of a trapped MMIO access: (call id, registers)."""
    kind, addr, width, value = fault
    spec = sm.whitelist.by_kind(CallKind.MMIO_STORE if kind == "store" else CallKind.MMIO_LOAD)[0]
    regs = [0] * NUM_GPRS
    regs[0], regs[1], regs[2], regs[REG_CALL] = addr, width, value, spec.call_id
    return spec.call_id, regs


def _serve_cvm(p: Platform, hart_id: int) -> None:
    sm = monitor(p)
    trap = p.harts[hart_id].trap
    cvm_id = trap.from_domain
    d = sm.domains[cvm_id]
    regs = sm.harts[hart_id].saved_gprs
    goto(p, hart_id, FsmNode.C_ROUTE)

    if trap.cause is TrapCause.INTERRUPT:
        _record_call(p, hart_id, cvm_id, None, None, Status.OK)
        _route_out(p, hart_id, d, None, [0] * NUM_GPRS, Status.EXIT_INTERRUPT)
        return
    if trap.cause is TrapCause.GUEST_PAGE_FAULT:
        call_id, request = mmio_request(sm, trap.fault)
        view = apply_state_transformation(request, sm.whitelist.get(call_id), Direction.C_TO_NC,
                                          mutations=p.mutations)
        _record_call(p, hart_id, cvm_id, call_id, None, Status.OK)
        _route_out(p, hart_id, d, call_id, view, Status.EXIT_ROUTED)
        return

    call_id = regs[REG_CALL]
    spec = sm.whitelist.get(call_id)
    if spec is None or spec.caller == "hypervisor":
        _record_call(p, hart_id, cvm_id, call_id, None, Status.UNDECLARED_CALL)
        _finish_c(p, hart_id, cvm_id, Status.UNDECLARED_CALL, 0)
    elif spec.kind is CallKind.SHARE_PAGE:
        status, value = share_page(p, hart_id, cvm_id, regs[0])
        _record_call(p, hart_id, cvm_id, call_id, cvm_id, status)
        _finish_c(p, hart_id, cvm_id, status, value)
    elif spec.kind is CallKind.ATTEST:
        nonce = b"".join(regs[r].to_bytes(8, "little") for r in NONCE_REGS)
        report = attest(p, hart_id, cvm_id, nonce)
        _record_call(p, hart_id, cvm_id, call_id, cvm_id, Status.OK)
        _finish_c(p, hart_id, cvm_id, Status.OK, len(report.signature))
    elif spec.kind is CallKind.TERMINATE:
        if regs[REG_TARGET] != cvm_id:
            # a CVM may only end itself
            _record_call(p, hart_id, cvm_id, call_id, regs[REG_TARGET], Status.INVALID)
            _finish_c(p, hart_id, cvm_id, Status.INVALID, 0)
            return
        transition_c_to_nc(p, hart_id)
        status = terminate_cvm(p, hart_id, cvm_id)
        _record_call(p, hart_id, cvm_id, call_id, cvm_id, status)
        view = [0] * NUM_GPRS
        view[REG_HV_STATUS], view[REG_HV_VALUE] = int(Status.EXIT_TERMINATED), cvm_id
        _emit(p, hart_id, "state_transform", direction=Direction.C_TO_NC.value, cvm=cvm_id,
              call=call_id, view=view)
        write_registers(p, hart_id, HYPERVISOR, dict(enumerate(view)))
        goto(p, hart_id, FsmNode.NC_EXIT)
        exit_to_domain(p, hart_id, HYPERVISOR)
    else:
        view = apply_state_transformation(regs, spec, Direction.C_TO_NC, mutations=p.mutations)
        _record_call(p, hart_id, cvm_id, call_id, None, Status.OK)
        _route_out(p, hart_id, d, call_id, view, Status.EXIT_ROUTED)

