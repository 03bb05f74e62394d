"""The monitor's runtime state machine.

Each hart that traps into the monitor walks a small graph. The
non-confidential half serves the hypervisor, the confidential half serves a
CVM, and exactly two edges cross between them::

    NcEnter -> NcRoute -> NcTransform -> NcExit
                  |            ^
                  v            |
    CEnter  -> CRoute  -> CTransform  -> CExit
           (NcRoute -> CTransform and CRoute -> NcTransform)

Enter nodes park the interrupted context in the control data region. The two
crossing edges reconfigure isolation and interrupt routing. Transform nodes
write the answer registers into the parked context, and exit nodes flush the
microarchitectural buffer before restoring it.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import (
    DomainBusy,
    DomainNotRunnable,
    FsmError,
    IllegalTransition,
    NoSavedState,
    UndeclaredCall,
    UnknownCause,
    UnknownDomain,
    WrongExitNode,
)
from .hw import (
    HYPERVISOR,
    IRQS,
    NUM_GPRS,
    WORD,
    Platform,
    PrivilegeLevel,
    Route,
    TrapCause,
    is_confidential_domain,
)
from .monitor import CallSpec, Lifecycle, MonitorState, SecurityDomain, Status

SANITIZED = 0
PC_WORD = NUM_GPRS
ROUTES_WORD = NUM_GPRS + 2
CONTEXT_BYTES = (NUM_GPRS + 1) * WORD


class FsmNode(enum.Enum):
    NC_ENTER = "NcEnter"
    NC_ROUTE = "NcRoute"
    NC_TRANSFORM = "NcTransform"
    NC_EXIT = "NcExit"
    C_ENTER = "CEnter"
    C_ROUTE = "CRoute"
    C_TRANSFORM = "CTransform"
    C_EXIT = "CExit"

    @property
    def confidential(self) -> bool:
        return self.value.startswith("C")


EDGES: dict[FsmNode | None, frozenset[FsmNode]] = {
    None: frozenset({FsmNode.NC_ENTER, FsmNode.C_ENTER}),
    FsmNode.NC_ENTER: frozenset({FsmNode.NC_ROUTE}),
    FsmNode.NC_ROUTE: frozenset({FsmNode.NC_TRANSFORM, FsmNode.C_TRANSFORM}),
    FsmNode.NC_TRANSFORM: frozenset({FsmNode.NC_EXIT}),
    FsmNode.NC_EXIT: frozenset(),
    FsmNode.C_ENTER: frozenset({FsmNode.C_ROUTE}),
    FsmNode.C_ROUTE: frozenset({FsmNode.C_TRANSFORM, FsmNode.NC_TRANSFORM}),
    FsmNode.C_TRANSFORM: frozenset({FsmNode.C_EXIT}),
    FsmNode.C_EXIT: frozenset(),
}


class Direction(enum.Enum):
    NONE = "none"
    NC_TO_C = "NcToC"
    C_TO_NC = "CToNc"


@dataclass(frozen=True)
class TransitionEvent:
    from_node: FsmNode | None
    to_node: FsmNode
    direction: Direction = Direction.NONE
    actions: frozenset[str] = frozenset()


# actions each crossing must perform
NC_TO_C_ACTIONS = frozenset({"isolation-reconfig", "hypervisor-state-save", "irq-retarget-sm"})
C_TO_NC_ACTIONS = frozenset({"isolation-deny", "hypervisor-state-restore", "irq-restore"})


@dataclass
class DomainContext:
    domain: int
    gprs: list[int]
    pc: int


def monitor(p: Platform) -> MonitorState:
    if p.monitor is None:
        raise FsmError("the platform has not been booted")
    return p.monitor


def _emit(p: Platform, hart_id: int, op: str, outcome: str = "ok", **args) -> None:
    p.trace.record(hart_id, p.harts[hart_id].domain, op, outcome, **args)


def _direction(src: FsmNode | None, dst: FsmNode) -> Direction:
    if src is None or src.confidential == dst.confidential:
        return Direction.NONE
    return Direction.NC_TO_C if dst.confidential else Direction.C_TO_NC


def goto(p: Platform, hart_id: int, node: FsmNode) -> TransitionEvent:
    fsm = monitor(p).harts[hart_id]
    prev = fsm.node
    if node not in EDGES[prev] and "skip-route-node" not in p.mutations:
        raise IllegalTransition(f"hart {hart_id}: {prev} -> {node.value} is not an edge")
    fsm.node = node
    _emit(p, hart_id, "fsm_node", node=node.value, prev=prev.value if prev else None)
    return TransitionEvent(prev, node, _direction(prev, node))


# ---------------------------------------------------------------- context slots

def slot_of(p: Platform, owner: int, hart_id: int) -> int:
    sm = monitor(p)
    if owner == HYPERVISOR:
        slot = sm.layout.hart_slot(hart_id)
    else:
        d = sm.domains.get(owner)
        if d is None or d.slot is None:
            raise UnknownDomain(Status.UNKNOWN_DOMAIN, f"domain {owner} has no context slot")
        slot = sm.slot_addr(d, p.hart_count)
    if "save-outside-control" in p.mutations:
        lo, hi = sm.layout.control_region
        return sm.layout.hypervisor_region[1] - (hi - lo) + (slot - lo)
    return slot


def save_context(p: Platform, hart_id: int, owner: int, gprs: list[int], pc: int) -> int:
    slot = slot_of(p, owner, hart_id)
    blob = b"".join(g.to_bytes(WORD, "little") for g in list(gprs) + [pc])
    p.write_phys(hart_id, slot, blob)
    _emit(p, hart_id, "context_save", owner=owner, slot=slot, gprs=list(gprs), pc=pc)
    return slot


def load_context(p: Platform, hart_id: int, owner: int) -> DomainContext:
    slot = slot_of(p, owner, hart_id)
    blob = p.read_phys(hart_id, slot, CONTEXT_BYTES)
    words = [int.from_bytes(blob[i:i + WORD], "little") for i in range(0, len(blob), WORD)]
    return DomainContext(owner, words[:NUM_GPRS], words[PC_WORD])


def write_registers(p: Platform, hart_id: int, owner: int, values: dict[int, int]) -> None:
    """Overwrite selected registers of a parked context."""
    slot = slot_of(p, owner, hart_id)
    for reg in sorted(values):
        p.write_word(hart_id, slot + reg * WORD, values[reg])


# ---------------------------------------------------------------- mutual exclusion

def acquire_gate(p: Platform, hart_id: int) -> None:
    sm = monitor(p)
    prior = p.atomic_cas(hart_id, sm.layout.lock_addr, 0, hart_id + 1)
    if prior not in (0, hart_id + 1):
        raise DomainBusy(Status.BUSY, f"monitor held by hart {prior - 1}")


def release_gate(p: Platform, hart_id: int) -> None:
    p.atomic_cas(hart_id, monitor(p).layout.lock_addr, hart_id + 1, 0)


# ---------------------------------------------------------------- entry

def trap_entry(p: Platform, hart_id: int) -> FsmNode:
    """First step of every monitor invocation: pick the FSM half and park the
    interrupted context in the control data region."""
    sm = monitor(p)
    hart = p.hart(hart_id)
    trap = hart.trap
    if hart.privilege is not PrivilegeLevel.HIGHEST or trap is None:
        raise FsmError(f"hart {hart_id} is not in a monitor trap")
    if not isinstance(trap.cause, TrapCause):
        raise UnknownCause(f"unknown trap cause {trap.cause!r}")
    if trap.from_domain == HYPERVISOR:
        node = FsmNode.NC_ENTER
    elif is_confidential_domain(trap.from_domain) and sm.cvm(trap.from_domain) is not None:
        node = FsmNode.C_ENTER
    else:
        raise UnknownCause(f"trap from domain {trap.from_domain} has no handler")
    acquire_gate(p, hart_id)
    if "irq-enabled-in-sm" in p.mutations:
        p.set_interrupt_enable(hart_id, True)
    goto(p, hart_id, node)
    save_context(p, hart_id, trap.from_domain, hart.gprs, trap.from_pc)
    sm.harts[hart_id].saved_gprs = list(hart.gprs)
    return node


# ---------------------------------------------------------------- crossings

def _runnable_cvm(sm: MonitorState, cvm_id: int) -> SecurityDomain:
    d = sm.cvm(cvm_id)
    if d is None:
        raise UnknownDomain(Status.UNKNOWN_DOMAIN, f"no CVM {cvm_id}")
    if d.lifecycle is not Lifecycle.RUNNABLE:
        raise DomainNotRunnable(Status.NOT_RUNNABLE, f"CVM {cvm_id} is {d.lifecycle.value}")
    if d.busy_on is not None:
        raise DomainBusy(Status.BUSY, f"CVM {cvm_id} already runs on hart {d.busy_on}")
    return d


def data_ranges(d: SecurityDomain) -> list[tuple[int, int]]:
    return [t.range for _, t in sorted(d.page_table.mappings.items())]


def transition_nc_to_c(p: Platform, hart_id: int, cvm_id: int) -> TransitionEvent:
    """Move a hart from the hypervisor's side to a CVM's side."""
    sm = monitor(p)
    fsm = sm.harts[hart_id]
    if fsm.node is not FsmNode.NC_ROUTE and "skip-route-node" not in p.mutations:
        raise IllegalTransition(f"NC->C move from {fsm.node}")
    d = _runnable_cvm(sm, cvm_id)
    actions = set()

    # the hypervisor's registers were parked at NcEnter; add its routes
    slot = slot_of(p, HYPERVISOR, hart_id)
    for i, irq in enumerate(IRQS):
        route = p.irqc.route(hart_id, irq)
        target, handler = (route.target.value, route.handler) if route else (0, 0)
        p.write_word(hart_id, slot + (ROUTES_WORD + 2 * i) * WORD, target)
        p.write_word(hart_id, slot + (ROUTES_WORD + 2 * i + 1) * WORD, handler)
    fsm.hv_saved = True
    actions.add("hypervisor-state-save")

    p.set_isolation(hart_id, p.isolation.with_grants(cvm_id, data_ranges(d)))
    actions.add("isolation-reconfig")

    if "skip-irq-retarget" not in p.mutations:
        for irq in IRQS:
            p.configure_interrupt(hart_id, irq, PrivilegeLevel.HIGHEST, sm.layout.sm_handler)
        actions.add("irq-retarget-sm")

    fsm.running_cvm = cvm_id
    d.busy_on = hart_id
    event = goto(p, hart_id, FsmNode.C_TRANSFORM)
    event = TransitionEvent(event.from_node, event.to_node, Direction.NC_TO_C, frozenset(actions))
    _emit(p, hart_id, "transition", direction=event.direction.value, cvm=cvm_id,
          actions=sorted(actions))
    return event


def transition_c_to_nc(p: Platform, hart_id: int) -> TransitionEvent:
    """Move a hart from a CVM's side back to the hypervisor's side."""
    sm = monitor(p)
    fsm = sm.harts[hart_id]
    if not fsm.hv_saved or fsm.running_cvm is None:
        raise NoSavedState(f"hart {hart_id} has no parked hypervisor context")
    if fsm.node is not FsmNode.C_ROUTE:
        raise IllegalTransition(f"C->NC move from {fsm.node}")
    cvm_id = fsm.running_cvm
    actions = set()

    p.set_isolation(hart_id, p.isolation.with_grants(cvm_id, ()))
    actions.add("isolation-deny")

    if "skip-irq-restore" not in p.mutations:
        slot = slot_of(p, HYPERVISOR, hart_id)
        for i, irq in enumerate(IRQS):
            target = p.read_word(hart_id, slot + (ROUTES_WORD + 2 * i) * WORD)
            handler = p.read_word(hart_id, slot + (ROUTES_WORD + 2 * i + 1) * WORD)
            route = Route(PrivilegeLevel(target), handler)
            if p.irqc.route(hart_id, irq) != route:
                p.configure_interrupt(hart_id, irq, route.target, route.handler)
        actions.add("irq-restore")
    actions.add("hypervisor-state-restore")

    d = sm.domains.get(cvm_id)
    if d is not None:
        d.busy_on = None
    fsm.running_cvm = None
    fsm.hv_saved = False
    event = goto(p, hart_id, FsmNode.NC_TRANSFORM)
    event = TransitionEvent(event.from_node, event.to_node, Direction.C_TO_NC, frozenset(actions))
    _emit(p, hart_id, "transition", direction=event.direction.value, cvm=cvm_id,
          actions=sorted(actions))
    return event


# ---------------------------------------------------------------- state transformation

def apply_state_transformation(saved: list[int], call: CallSpec | None, direction: Direction,
                               *, incoming: list[int] | None = None,
                               mutations: frozenset[str] = frozenset()) -> list[int]:
    """Filter a register file crossing a domain boundary.

    Outbound (C to NC) the result holds the caller's values at the call's
    argument positions and ``SANITIZED`` everywhere else. Inbound (NC to C)
    the result is ``saved`` with only the declared result positions taken
    from ``incoming``.
    """
    if call is None:
        raise UndeclaredCall(Status.UNDECLARED_CALL, "call has no declared whitelist")
    if direction is Direction.C_TO_NC:
        if "leaky-view" in mutations:
            return list(saved)
        view = [SANITIZED] * NUM_GPRS
        for reg in call.args:
            view[reg] = saved[reg]
        return view
    if direction is Direction.NC_TO_C:
        if incoming is None:
            raise ValueError("inbound transformation needs the responder's registers")
        out = list(saved)
        regs = range(6) if "clobbered-restore" in mutations else call.results
        for reg in regs:
            out[reg] = incoming[reg]
        return out
    raise ValueError("state transformation needs a crossing direction")


# ---------------------------------------------------------------- exit

def exit_to_domain(p: Platform, hart_id: int, target: int) -> None:
    sm = monitor(p)
    fsm = sm.harts[hart_id]
    wanted = FsmNode.C_EXIT if is_confidential_domain(target) else FsmNode.NC_EXIT
    if fsm.node is not wanted:
        _emit(p, hart_id, "exit", "WrongExitNode", target=target,
              node=fsm.node.value if fsm.node else None)
        raise WrongExitNode(f"exit to domain {target} from {fsm.node}")
    ctx = load_context(p, hart_id, target)
    _emit(p, hart_id, "context_restore", owner=target, gprs=ctx.gprs, pc=ctx.pc)
    release_gate(p, hart_id)
    if "skip-microarch-clear" not in p.mutations:
        p.clear_microarch(hart_id)
    fsm.node = None
    fsm.saved_gprs = None
    level = PrivilegeLevel.LOWEST if is_confidential_domain(target) else PrivilegeLevel.MIDDLE
    p.return_to(hart_id, level, ctx.pc, domain=target,
                interrupts="exit-ie-off" not in p.mutations, gprs=ctx.gprs)
