"""Invariant oracle.

The oracle replays a trace with its own bookkeeping: which isolation config
is in force, where every interrupt is routed, each hart's privilege and
interrupt-enable bit, which FSM node each hart is on, where every page token
lives and what register file each domain last parked. It never asks the
monitor what it did. Each event is checked against that bookkeeping, and
:meth:`Oracle.check_state` adds the snapshot checks from
:mod:`confmon.invariants`.

Events may come straight from a live :class:`~confmon.trace.Trace` (argument
values are Python objects) or from a parsed trace file (plain JSON values);
both are accepted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from .. import invariants as inv
from ..fsm import EDGES, FsmNode
from ..hw import (
    HYPERVISOR,
    IRQS,
    NUM_GPRS,
    PAGE_SIZE,
    PINNED_IRQS,
    SM_DOMAIN,
    IsolationConfig,
    Platform,
    PrivilegeLevel,
    covered,
    is_confidential_domain,
    overlaps,
)
from ..monitor import (
    REG_CALL,
    REG_HV_STATUS,
    REG_HV_VALUE,
    REG_STATUS,
    REG_VALUE,
    ROUTED_KINDS,
    CallKind,
    Layout,
    WhitelistTable,
)
from ..trace import TraceEvent

HIGHEST = PrivilegeLevel.HIGHEST
MEMORY_OPS = {"read_phys": False, "write_phys": True, "atomic_cas": True,
              "dma_read": False, "dma_write": True}
KEY_BYTES = 32


@dataclass(frozen=True)
class Violation:
    invariant: str
    seq: int
    message: str


@dataclass(frozen=True)
class Verdict:
    invariant: str
    holds: bool
    counterexample: tuple[TraceEvent, ...] | None = None
    message: str = ""
    seq: int | None = None

    def to_json(self) -> dict:
        return {"invariant": self.invariant, "holds": self.holds, "seq": self.seq,
                "message": self.message}


def _priv(value: Any) -> PrivilegeLevel | None:
    if value is None or isinstance(value, PrivilegeLevel):
        return value
    if isinstance(value, str):
        return PrivilegeLevel[value]
    return PrivilegeLevel(value)


def _config(value: Any) -> IsolationConfig:
    return value if isinstance(value, IsolationConfig) else IsolationConfig.from_json(value)


def _layout(value: Any) -> Layout:
    if isinstance(value, Layout):
        return value
    return Layout(**{k: tuple(v) for k, v in value.items()})


def _whitelist(value: Any) -> WhitelistTable:
    return value if isinstance(value, WhitelistTable) else WhitelistTable.from_json(value)


@dataclass
class _Session:
    """One monitor invocation on one hart, from trap to exit."""
    cause: str
    from_domain: int | None
    fault: tuple | None = None
    saved: bool = False
    crossed_out: int | None = None  # CVM left through the C->NC edge
    lifecycle_changes: list[int] = field(default_factory=list)


class Oracle:
    def __init__(self, keep_events: bool = True):
        self.keep_events = keep_events
        self.events: list[TraceEvent] = []
        self.violations: dict[str, Violation] = {}
        self.counts: dict[str, int] = {}
        self._reset(0)

    # ---------------------------------------------------------------- bookkeeping

    def _reset(self, harts: int) -> None:
        self.harts = harts
        self.config = IsolationConfig()
        self.routes: dict[tuple[int, int], tuple[PrivilegeLevel, int]] = {
            (h, irq): (HIGHEST, 0) for h in range(harts) for irq in PINNED_IRQS}
        self.priv = {h: HIGHEST for h in range(harts)}
        self.ie = {h: False for h in range(harts)}
        self.dirty = {h: False for h in range(harts)}
        self.node: dict[int, FsmNode | None] = {h: None for h in range(harts)}
        self.session: dict[int, _Session | None] = {h: None for h in range(harts)}
        self.hv_regs: dict[int, list[int]] = {}
        self.route_snapshot: dict[int, dict] = {}
        self.c_session: dict[int, tuple[int, dict] | None] = {h: None for h in range(harts)}
        self.cvm_regs: dict[int, list[int]] = {}
        self.pending_in: dict[int, frozenset[int]] = {}
        self.token_base: dict[int, int] = {}
        self.token_where: dict[int, tuple] = {}
        self.page_token: dict[int, int] = {}
        self.locked = False
        self.boot_done = False
        self.layout: Layout | None = None
        self.whitelist: WhitelistTable | None = None

    def state_key(self) -> tuple:
        sess = tuple(sorted((h, (s.cause, s.from_domain, s.saved, s.crossed_out))
                            for h, s in self.session.items() if s is not None))
        return (
            self.config, tuple(sorted(self.routes.items())), tuple(sorted(self.priv.items())),
            tuple(sorted(self.ie.items())), tuple(sorted(self.dirty.items())),
            tuple(sorted((h, n.value if n else None) for h, n in self.node.items())), sess,
            tuple(sorted((h, tuple(v)) for h, v in self.hv_regs.items())),
            tuple(sorted((h, c[0] if c else None) for h, c in self.c_session.items())),
            tuple(sorted((c, tuple(v)) for c, v in self.cvm_regs.items())),
            tuple(sorted(self.pending_in.items())),
            tuple(sorted(self.token_where.items())), self.locked, self.boot_done,
            tuple(sorted(self.violations)),
        )

    def flag(self, invariant: str, seq: int, message: str) -> None:
        self.counts[invariant] = self.counts.get(invariant, 0) + 1
        if invariant not in self.violations:
            self.violations[invariant] = Violation(invariant, seq, message)

    # ---------------------------------------------------------------- public API

    def feed_all(self, events: Iterable[TraceEvent]) -> "Oracle":
        for e in events:
            self.feed(e)
        return self

    def feed(self, e: TraceEvent) -> None:
        if self.keep_events:
            self.events.append(e)
        h = e.hart
        a = e.args
        if h is not None and h not in self.priv and e.op != "reset":
            return
        if h is not None and "priv" in a and e.op != "reset":
            claimed = _priv(a["priv"])
            if claimed is not self.priv[h]:
                self.flag(inv.HW_PRIVILEGE_MONOTONE, e.seq,
                          f"hart {h} acts at {claimed.name} while at {self.priv[h].name}")
        if h is not None and not self.locked and self.priv[h] is not HIGHEST:
            self.flag(inv.INIT_BOOT_ORDERING, e.seq,
                      f"hart {h} runs below the highest privilege before the seed is locked")
        handler = getattr(self, "_on_" + e.op, None)
        if handler is not None:
            handler(e, h, a)

    def check_state(self, platform: Platform, checks: dict | None = None) -> dict[str, list[str]]:
        found = inv.check_state(platform, inv.STEP_CHECKS if checks is None else checks)
        seq = platform.trace.next_seq - 1
        for name, problems in found.items():
            self.flag(name, seq, problems[0])
        return found

    def violated(self) -> set[str]:
        return set(self.violations)

    def verdicts(self, invariants: Iterable[str] = inv.ALL_INVARIANTS) -> list[Verdict]:
        out = []
        for name in invariants:
            v = self.violations.get(name)
            if v is None:
                out.append(Verdict(name, True))
                continue
            prefix = tuple(e for e in self.events if e.seq <= v.seq) if self.keep_events else None
            out.append(Verdict(name, False, prefix, v.message, v.seq))
        return out

    # ---------------------------------------------------------------- platform events

    def _on_reset(self, e, h, a) -> None:
        self._reset(a["harts"])

    def _memory(self, e, h, a) -> None:
        if not e.ok:
            return
        write = MEMORY_OPS[e.op]
        width = a.get("width", 8)
        rng = (a["addr"], a["addr"] + width)
        priv = _priv(a.get("priv"))
        domain = e.domain
        if not self.config.allows(domain, priv, rng, write):
            # the hardware broke its contract; policy checks below assume it did not
            self.flag(inv.HW_ISOLATION_SOUND, e.seq,
                      f"{e.op} of {rng} by domain {domain} succeeded against the isolation config")
            return
        if h is not None and self.config.is_confidential(rng):
            self.dirty[h] = True
        if self.layout is not None and overlaps(rng, self.layout.tracker_range):
            self._check_token_access(e, rng, domain, a.get("token"))
        if priv is HIGHEST:
            return
        if not is_confidential_domain(domain) and self.config.is_confidential(rng):
            self.flag(inv.POLICY_DATA_ISOLATION, e.seq,
                      f"non-confidential domain {domain} reached confidential {rng}")
        for page in range(rng[0] // PAGE_SIZE, (rng[1] - 1) // PAGE_SIZE + 1):
            owner = self._page_owner(page)
            if owner is not None and owner != domain:
                self.flag(inv.POLICY_DATA_ISOLATION, e.seq,
                          f"domain {domain} reached page {page} owned by CVM {owner}")
        if self.layout is not None:
            key = (self.layout.key_addr, self.layout.key_addr + KEY_BYTES)
            if overlaps(rng, key):
                self.flag(inv.ATTEST_KEY_CONFINED, e.seq,
                          f"domain {domain} touched the attestation key")

    _on_read_phys = _on_write_phys = _on_atomic_cas = _on_dma_read = _on_dma_write = _memory

    def _check_token_access(self, e, rng, domain, token) -> None:
        if token is None:
            self.flag(inv.MT_ACCESS_VIA_TOKEN, e.seq, f"{e.op} of {rng} carries no page token")
            return
        base = self.token_base.get(token)
        if base is None or not covered(rng, [(base, base + PAGE_SIZE)]):
            self.flag(inv.MT_ACCESS_VIA_TOKEN, e.seq, f"token #{token} does not cover {rng}")
            return
        if is_confidential_domain(domain):
            where = self.token_where.get(token)
            if not (where and where[0] == "map" and where[1] == domain):
                self.flag(inv.MT_ACCESS_VIA_TOKEN, e.seq,
                          f"CVM {domain} used token #{token} it does not hold")

    def _page_owner(self, page: int) -> int | None:
        serial = self.page_token.get(page)
        if serial is None:
            return None
        where = self.token_where.get(serial)
        if where and where[0] in ("map", "root"):
            return where[1]
        return None

    def _on_read_seed(self, e, h, a) -> None:
        if not e.ok:
            return
        if self.locked:
            self.flag(inv.HW_SEED_LOCK_MONOTONE, e.seq, "seed read succeeded after the lock")
        if _priv(a.get("priv")) is not HIGHEST:
            self.flag(inv.ATTEST_KEY_CONFINED, e.seq, "seed read below the highest privilege")

    def _on_lock_seed(self, e, h, a) -> None:
        self.locked = True

    def _on_set_isolation(self, e, h, a) -> None:
        if e.ok:
            self.config = _config(a["config"])

    def _on_configure_interrupt(self, e, h, a) -> None:
        if e.ok:
            self.routes[(a["on_hart"], a["irq"])] = (_priv(a["target"]), a["handler"])

    def _on_trap(self, e, h, a) -> None:
        self.priv[h] = HIGHEST
        self.ie[h] = False
        fault = tuple(a["fault"]) if a.get("fault") is not None else None
        self.session[h] = _Session(a["cause"], a.get("from_domain"), fault)

    def _on_deliver_interrupt(self, e, h, a) -> None:
        if not e.ok:
            return
        to = _priv(a["to_priv"])
        route = self.routes.get((h, a["irq"]))
        if route is None or route[0] is not to:
            self.flag(inv.HW_PRIVILEGE_MONOTONE, e.seq,
                      f"irq {a['irq']} delivered at {to.name} against its route")
        if not self.boot_done:
            self.flag(inv.INIT_BOOT_ORDERING, e.seq, "interrupt delivered before boot finished")
        self.priv[h] = to
        self.ie[h] = False
        if to is HIGHEST:
            self.session[h] = _Session("interrupt", a.get("from_domain"))

    def _on_set_interrupt_enable(self, e, h, a) -> None:
        self.ie[h] = bool(a["enabled"])
        if self.ie[h] and self.session[h] is not None:
            self.flag(inv.FSM_INTERRUPTS_DISABLED, e.seq,
                      f"hart {h} enabled interrupts inside the monitor")

    def _on_clear_microarch(self, e, h, a) -> None:
        self.dirty[h] = False

    def _on_return_to(self, e, h, a) -> None:
        if not e.ok:
            return
        src, dst = _priv(a["from_priv"]), _priv(a["to_priv"])
        if dst > src:
            self.flag(inv.HW_PRIVILEGE_MONOTONE, e.seq, f"return raised {src.name} to {dst.name}")
        if dst is not HIGHEST and not a["ie"]:
            self.flag(inv.HW_HANDLER_EXIT_INTERRUPTS, e.seq,
                      f"hart {h} left a handler with interrupts disabled")
        if src is HIGHEST and dst is not HIGHEST and self.dirty[h]:
            self.flag(inv.FSM_EXIT_SANITIZES, e.seq,
                      f"hart {h} left the highest privilege with microarchitectural residue")
        session = self.session[h]
        if session is not None and src is HIGHEST:
            self._check_exit(e, h, a, session)
        elif src is HIGHEST and self.boot_done:
            self.flag(inv.FSM_NODE_PATH, e.seq, f"hart {h} left the monitor outside the FSM")
        self.priv[h] = dst
        self.ie[h] = bool(a["ie"])
        self.session[h] = None
        self.node[h] = None

    # ---------------------------------------------------------------- monitor events

    def _on_boot_report(self, e, h, a) -> None:
        self.layout = _layout(a["layout"])
        self.whitelist = _whitelist(a["whitelist"])

    def _on_boot_done(self, e, h, a) -> None:
        self.boot_done = True

    def _on_fsm_node(self, e, h, a) -> None:
        node = FsmNode(a["node"])
        prev = self.node[h]
        if node not in EDGES[prev]:
            self.flag(inv.FSM_NODE_PATH, e.seq,
                      f"hart {h}: {prev.value if prev else 'outside'} -> {node.value}")
        self.node[h] = node
        if node is FsmNode.NC_ENTER and self.c_session[h] is None:
            self.route_snapshot[h] = {irq: self.routes.get((h, irq)) for irq in IRQS}

    def _on_context_save(self, e, h, a) -> None:
        lo, hi = self.layout.control_region if self.layout else (0, 0)
        slot = a["slot"]
        if not (lo <= slot and slot + (NUM_GPRS + 1) * 8 <= hi):
            self.flag(inv.FSM_ENTER_SAVES_CONTEXT, e.seq,
                      f"context of domain {a['owner']} parked at {slot:#x}, outside the control region")
        owner, gprs = a["owner"], list(a["gprs"])
        session = self.session[h]
        if session is not None and owner == session.from_domain:
            session.saved = True
        if owner == HYPERVISOR:
            self.hv_regs[h] = gprs
        else:
            self.cvm_regs[owner] = gprs

    def _on_transition(self, e, h, a) -> None:
        if a["direction"] == "NcToC":
            self.c_session[h] = (a["cvm"], self.route_snapshot.get(h, {}))
        else:
            session = self.session[h]
            if session is not None:
                session.crossed_out = a["cvm"]

    def _on_lifecycle(self, e, h, a) -> None:
        session = self.session.get(h)
        if session is not None:
            session.lifecycle_changes.append(a["target"])
        if a["new"] == "Terminated":
            self.pending_in.pop(a["target"], None)
            self.cvm_regs.pop(a["target"], None)

    # token ledger: pool -> held -> root/map -> held -> pool

    def _move(self, e, serial: int, expect: tuple, to: tuple) -> None:
        where = self.token_where.get(serial)
        if where is None or where[:len(expect)] != expect:
            self.flag(inv.MT_EXCLUSIVE_OWNERSHIP, e.seq,
                      f"token #{serial} moved to {to} from {where}, expected {expect}")
        self.token_where[serial] = to

    def _on_token_create(self, e, h, a) -> None:
        serial = a["serial"]
        if self.boot_done or serial in self.token_base:
            self.flag(inv.MT_FIXED_TOKEN_SET, e.seq, f"token #{serial} created outside initialisation")
            return
        self.token_base[serial] = a["base"]
        self.token_where[serial] = ("pool",)
        self.page_token[a["base"] // PAGE_SIZE] = serial

    def _on_token_allocate(self, e, h, a) -> None:
        self._move(e, a["serial"], ("pool",), ("held",))

    def _on_pt_new(self, e, h, a) -> None:
        self._move(e, a["serial"], ("held",), ("root", a["owner"]))

    def _on_pt_map(self, e, h, a) -> None:
        self._move(e, a["serial"], ("held",), ("map", a["owner"], a["gpn"]))

    def _on_pt_unmap(self, e, h, a) -> None:
        self._move(e, a["serial"], ("map", a["owner"], a["gpn"]), ("held",))

    def _on_pt_drop(self, e, h, a) -> None:
        self._move(e, a["serial"], ("root", a["owner"]), ("held",))

    def _on_token_free(self, e, h, a) -> None:
        self._move(e, a["serial"], ("held",), ("pool",))

    # ---------------------------------------------------------------- exit checks

    def _call_spec(self, call_id: int):
        return self.whitelist.get(call_id) if self.whitelist else None

    def _outbound(self, session: _Session, cvm: int) -> tuple[frozenset[int], list[int], frozenset[int]]:
        """(visible positions, their source values, positions the answer may fill)."""
        regs = self.cvm_regs.get(cvm, [0] * NUM_GPRS)
        if session.cause == "guest_page_fault" and session.fault and self.whitelist:
            kind, addr, width, value = session.fault
            spec = self.whitelist.by_kind(CallKind.MMIO_STORE if kind == "store" else CallKind.MMIO_LOAD)[0]
            src = [0] * NUM_GPRS
            src[0], src[1], src[2], src[REG_CALL] = addr, width, value, spec.call_id
            return spec.args, src, spec.results
        if session.cause == "ecall":
            spec = self._call_spec(regs[REG_CALL])
            if spec is not None and spec.kind in ROUTED_KINDS:
                return spec.args, regs, spec.results
        return frozenset(), regs, frozenset()

    def _check_exit(self, e, h, a, session: _Session) -> None:
        target = a["domain_to"]
        gprs = list(a["gprs"])
        node = self.node[h]
        to_cvm = is_confidential_domain(target)
        wanted = FsmNode.C_EXIT if to_cvm else FsmNode.NC_EXIT
        if node is not wanted:
            self.flag(inv.FSM_NODE_PATH, e.seq,
                      f"hart {h} exited to domain {target} from {node.value if node else 'no node'}")
        if not session.saved:
            self.flag(inv.FSM_ENTER_SAVES_CONTEXT, e.seq,
                      f"hart {h} exited without parking domain {session.from_domain}")

        status = None
        if to_cvm:
            self._check_enter_c(e, h, target)
            base = self.cvm_regs.get(target, [0] * NUM_GPRS)
            if session.from_domain == target:
                allowed = frozenset({REG_STATUS, REG_VALUE})
                status = gprs[REG_STATUS]
            else:
                allowed = self.pending_in.get(target, frozenset())
            leaked = [i for i in range(NUM_GPRS) if i not in allowed and gprs[i] != base[i]]
            if leaked:
                self.flag(inv.FSM_STATE_CONFINED, e.seq,
                          f"CVM {target} resumed with registers {leaked} changed")
            self.cvm_regs[target] = gprs
            self.pending_in.pop(target, None)
        elif session.crossed_out is not None:
            cvm = session.crossed_out
            self._check_exit_nc(e, h, cvm)
            visible, src, answer = self._outbound(session, cvm)
            leaked = [i for i in range(NUM_GPRS)
                      if i not in (REG_HV_STATUS, REG_HV_VALUE)
                      and gprs[i] != (src[i] if i in visible else 0)]
            if leaked:
                self.flag(inv.POLICY_INFORMATION_FLOW, e.seq,
                          f"hypervisor view of CVM {cvm} differs from the filtered request at {leaked}")
            self.pending_in[cvm] = frozenset(answer)
            self.hv_regs[h] = gprs
        else:
            base = self.hv_regs.get(h, [0] * NUM_GPRS)
            changed = [i for i in range(NUM_GPRS)
                       if i not in (REG_HV_STATUS, REG_HV_VALUE) and gprs[i] != base[i]]
            if changed:
                self.flag(inv.FSM_STATE_CONFINED, e.seq,
                          f"hypervisor restored with registers {changed} changed")
            if session.from_domain == HYPERVISOR:
                status = gprs[REG_HV_STATUS]
            self.hv_regs[h] = gprs
        if status and session.lifecycle_changes:
            self.flag(inv.POLICY_FAULT_ISOLATION, e.seq,
                      f"failed call (status {status}) changed the lifecycle of "
                      f"{sorted(set(session.lifecycle_changes))}")

    def _check_enter_c(self, e, h, cvm: int) -> None:
        wrong = [irq for irq in IRQS
                 if (self.routes.get((h, irq)) or (None,))[0] is not HIGHEST]
        if wrong:
            self.flag(inv.FSM_ENTER_TO_C, e.seq,
                      f"CVM {cvm} entered on hart {h} with irqs {wrong} not routed to the monitor")
        if not self.config.grants_for(cvm):
            self.flag(inv.FSM_ENTER_TO_C, e.seq, f"CVM {cvm} entered without its memory grant")

    def _check_exit_nc(self, e, h, cvm: int) -> None:
        saved = self.c_session[h]
        self.c_session[h] = None
        snapshot = saved[1] if saved else {}
        now = {irq: self.routes.get((h, irq)) for irq in IRQS}
        if snapshot != now:
            changed = sorted(i for i in IRQS if snapshot.get(i) != now[i])
            self.flag(inv.FSM_EXIT_TO_NC, e.seq,
                      f"hypervisor resumed on hart {h} with irq routes {changed} not restored")
        if self.config.grants_for(cvm):
            self.flag(inv.FSM_EXIT_TO_NC, e.seq, f"CVM {cvm} keeps its grant after leaving hart {h}")
