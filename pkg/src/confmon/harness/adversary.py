"""Adversary and victim actions.

The adversary controls all untrusted software: the hypervisor on every hart,
devices doing DMA, and any CVM it owns. Every action here decomposes into
ordinary platform operations or the untrusted drivers in :mod:`confmon.guest`;
none of them touches monitor state directly. Fault injection, which does, is
kept apart in :mod:`confmon.harness.faults`.

Actions print and parse as one line each::

    action StartStopInterruptCvm(hart=0, cvm=16, op=start, r0=7)
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Any

from .. import guest
from ..errors import AccessDenied, ScriptError
from ..hw import (
    HYPERVISOR,
    IRQ_TIMER,
    PAGE_SIZE,
    WORD,
    Platform,
    PrivilegeLevel,
    is_confidential_domain,
)
from ..monitor import REG_TARGET, CallKind, Lifecycle


class ActionKind(enum.Enum):
    # threat-model actions of the untrusted side
    ARBITRARY_HYPERCALL = "ArbitraryHypercall"
    INTERRUPT_INJECTION = "InterruptInjection"
    MALICIOUS_SHARED_INPUT = "MaliciousSharedInput"
    START_STOP_INTERRUPT_CVM = "StartStopInterruptCvm"
    READ_PROBE = "ReadProbe"
    WRITE_PROBE = "WriteProbe"
    DMA_PROBE = "DmaProbe"
    IMPERSONATION_ATTEMPT = "ImpersonationAttempt"
    # setup and victim behaviour
    PROMOTE = "Promote"
    CVM_STORE = "CvmStore"
    CVM_LOAD = "CvmLoad"
    CVM_CALL = "CvmCall"
    CVM_SHARE = "CvmShare"
    CVM_ATTEST = "CvmAttest"
    CVM_MMIO = "CvmMmio"
    CVM_EXIT = "CvmExit"
    # monitor corruption, for oracle self-tests
    FAULT = "Fault"


THREAT_KINDS = frozenset(list(ActionKind)[:8])
IMAGE_OFFSET_PAGES = 1  # VM images are staged one page into hypervisor memory
_LINE = re.compile(r"^action\s+(\w+)\s*\((.*)\)\s*$")


@dataclass(frozen=True)
class AdversaryAction:
    kind: ActionKind
    params: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def make(cls, kind: ActionKind | str, **params) -> "AdversaryAction":
        return cls(ActionKind(kind), tuple(sorted(params.items())))

    def get(self, name: str, default: Any = None) -> Any:
        return dict(self.params).get(name, default)

    def need(self, name: str) -> Any:
        value = self.get(name)
        if value is None:
            raise ScriptError(f"{self.kind.value} needs {name}=")
        return value

    def regs(self) -> dict[int, int]:
        """Register operands given as r0=..., r15=..."""
        return {int(k[1:]): v for k, v in self.params if re.fullmatch(r"r\d+", k)}

    def to_line(self) -> str:
        args = ", ".join(f"{k}={_fmt(v)}" for k, v in self.params)
        return f"action {self.kind.value}({args})"

    @classmethod
    def parse(cls, line: str) -> "AdversaryAction":
        m = _LINE.match(line.strip())
        if not m:
            raise ScriptError(f"not an action record: {line.strip()!r}")
        try:
            kind = ActionKind(m.group(1))
        except ValueError:
            raise ScriptError(f"unknown action kind {m.group(1)!r}") from None
        params = {}
        body = m.group(2).strip()
        for item in filter(None, (s.strip() for s in body.split(","))):
            key, sep, raw = item.partition("=")
            if not sep or not key.strip().isidentifier():
                raise ScriptError(f"bad argument {item!r} in {line.strip()!r}")
            params[key.strip()] = _value(raw.strip())
        return cls.make(kind, **params)


def _fmt(v: Any) -> str:
    return str(v)


def _value(raw: str) -> Any:
    try:
        return int(raw, 0)
    except ValueError:
        return raw


@dataclass
class ActionOutcome:
    action: AdversaryAction
    result: str
    allowed: int = 0
    denied: int = 0
    details: dict = field(default_factory=dict)


# ---------------------------------------------------------------- context helpers

def runs_hypervisor(p: Platform, h: int) -> bool:
    hart = p.harts[h]
    return hart.domain == HYPERVISOR and hart.privilege is PrivilegeLevel.MIDDLE and not hart.halted


def running_cvm(p: Platform, h: int) -> int | None:
    hart = p.harts[h]
    if is_confidential_domain(hart.domain) and hart.privilege is PrivilegeLevel.LOWEST:
        return hart.domain
    return None


def live_cvms(p: Platform) -> list[int]:
    return sorted(d.id for d in p.monitor.domains.values()
                  if d.lifecycle is not Lifecycle.TERMINATED and d.page_table is not None)


def confidential_pages(p: Platform) -> list[int]:
    pages = set()
    for lo, hi in p.isolation.confidential_regions:
        pages.update(range(lo // PAGE_SIZE, -(-hi // PAGE_SIZE)))
    return sorted(pages)


def _hart(p: Platform, a: AdversaryAction) -> int:
    h = a.get("hart", 0)
    if not isinstance(h, int) or not 0 <= h < p.hart_count:
        raise ScriptError(f"{a.kind.value}: no hart {h!r}")
    return h


def _hv_hart(p: Platform, a: AdversaryAction) -> int:
    h = _hart(p, a)
    if not runs_hypervisor(p, h):
        raise ScriptError(f"{a.kind.value}: hart {h} is not running the hypervisor")
    return h


def _cvm_hart(p: Platform, a: AdversaryAction) -> int:
    h = _hart(p, a)
    if running_cvm(p, h) is None:
        raise ScriptError(f"{a.kind.value}: hart {h} is not running a CVM")
    return h


def _status(res) -> str:
    return f"status={int(res.status)} value={int(res.value)}"


def _probe_pages(p: Platform, a: AdversaryAction) -> list[int]:
    which = a.get("pages", "all")
    if which == "all":
        return confidential_pages(p)
    if isinstance(which, int):
        return [which]
    raise ScriptError(f"{a.kind.value}: pages must be 'all' or a page number")


def image_pages(cvm_index: int, count: int) -> list[bytes]:
    return [f"cvm-image {cvm_index} page {i}".encode() for i in range(count)]


# ---------------------------------------------------------------- the actions

def _arbitrary_hypercall(p, a):
    h = _hv_hart(p, a)
    res = guest.hypervisor_call(p, h, a.need("call"), a.get("target", 0), a.regs())
    return ActionOutcome(a, _status(res))


def _interrupt(p, a):
    h = _hart(p, a)
    if p.harts[h].halted:
        raise ScriptError(f"hart {h} is halted")
    guest.raise_interrupt(p, h, a.get("irq", IRQ_TIMER))
    return ActionOutcome(a, f"delivered running={p.harts[h].domain}")


def _resume(p, h, cvm, answer):
    res = guest.hypervisor_call(p, h, p.monitor.whitelist.id_of(CallKind.RESUME), cvm, answer)
    return _status(res) if res.running == HYPERVISOR else f"running={res.running}"


def _malicious_shared_input(p, a):
    h = _hv_hart(p, a)
    cvm = a.need("cvm")
    value = a.get("value", 0x4141414141414141)
    d = p.monitor.cvm(cvm)
    written = 0
    if d is not None:
        for addr in sorted(d.shared.values()):
            guest.hv_write(p, h, addr, value.to_bytes(WORD, "little") * (PAGE_SIZE // WORD))
            written += 1
    result = _resume(p, h, cvm, {r: value for r in range(16)})
    return ActionOutcome(a, result, details={"shared_pages_written": written})


def _start_stop_interrupt(p, a):
    op = a.get("op", "start")
    if op == "interrupt":
        cvm = a.need("cvm")
        harts = [h for h in range(p.hart_count) if running_cvm(p, h) == cvm]
        if not harts:
            raise ScriptError(f"CVM {cvm} is not running")
        guest.raise_interrupt(p, harts[0], a.get("irq", IRQ_TIMER))
        return ActionOutcome(a, f"interrupted on hart {harts[0]}")
    h = _hv_hart(p, a)
    cvm = a.need("cvm")
    if op == "start":
        return ActionOutcome(a, _resume(p, h, cvm, a.regs()))
    if op == "stop":
        res = guest.hypervisor_call(p, h, p.monitor.whitelist.id_of(CallKind.TERMINATE), cvm)
        return ActionOutcome(a, _status(res))
    raise ScriptError(f"StartStopInterruptCvm: op must be start, stop or interrupt, not {op!r}")


def _memory_probe(p, a, write: bool):
    h = _hv_hart(p, a)
    out = ActionOutcome(a, "")
    pattern = a.get("value", 0x5A5A5A5A5A5A5A5A).to_bytes(WORD, "little")
    for page in _probe_pages(p, a):
        try:
            if write:
                p.write_phys(h, page * PAGE_SIZE, pattern)
            else:
                p.read_phys(h, page * PAGE_SIZE, PAGE_SIZE)
            out.allowed += 1
        except AccessDenied:
            out.denied += 1
    out.result = f"allowed={out.allowed} denied={out.denied}"
    return out


def _dma_probe(p, a):
    out = ActionOutcome(a, "")
    write = bool(a.get("write", 0))
    for page in _probe_pages(p, a):
        try:
            if write:
                p.dma_write(page * PAGE_SIZE, b"\xa5" * WORD)
            else:
                p.dma_read(page * PAGE_SIZE, PAGE_SIZE)
            out.allowed += 1
        except AccessDenied:
            out.denied += 1
    out.result = f"allowed={out.allowed} denied={out.denied}"
    return out


def _impersonation(p, a):
    """The hypervisor issues CVM-only calls naming a victim, or a CVM tries
    to terminate a different CVM."""
    h = _hart(p, a)
    victim = a.need("cvm")
    wl = p.monitor.whitelist
    if runs_hypervisor(p, h):
        results = []
        for kind in (CallKind.ATTEST, CallKind.SHARE_PAGE):
            res = guest.hypervisor_call(p, h, wl.id_of(kind), victim)
            results.append(int(res.status))
        return ActionOutcome(a, "statuses=" + "/".join(map(str, results)))
    if running_cvm(p, h) is not None:
        res = guest.cvm_ecall(p, h, wl.id_of(CallKind.TERMINATE), {REG_TARGET: victim})
        return ActionOutcome(a, _status(res))
    raise ScriptError(f"ImpersonationAttempt: hart {h} runs no untrusted software")


def _promote(p, a):
    h = _hv_hart(p, a)
    count = a.get("pages", 1)
    lo = p.monitor.layout.hypervisor_region[0] // PAGE_SIZE + IMAGE_OFFSET_PAGES
    index = p.monitor.next_domain
    guest.load_vm_image(p, h, lo, image_pages(index, count))
    wl = p.monitor.whitelist
    res = guest.hypervisor_call(p, h, wl.id_of(CallKind.PROMOTE_TO_CVM), lo, {5: count})
    return ActionOutcome(a, _status(res))


def _cvm_store(p, a):
    h = _cvm_hart(p, a)
    res = guest.cvm_store(p, h, a.get("addr", 0), a.get("value", 1))
    return ActionOutcome(a, "stored" if res is None else _status(res))


def _cvm_load(p, a):
    h = _cvm_hart(p, a)
    res = guest.cvm_load(p, h, a.get("addr", 0))
    return ActionOutcome(a, f"value={res}" if isinstance(res, int) else _status(res))


def _cvm_call(p, a):
    h = _cvm_hart(p, a)
    return ActionOutcome(a, _status(guest.cvm_ecall(p, h, a.need("call"), a.regs())))


def _cvm_share(p, a):
    h = _cvm_hart(p, a)
    return ActionOutcome(a, _status(guest.cvm_share(p, h, a.get("gpn", 1))))


def _cvm_attest(p, a):
    h = _cvm_hart(p, a)
    nonce = a.get("nonce", 0).to_bytes(32, "little")
    report = guest.cvm_attest(p, h, nonce)
    return ActionOutcome(a, f"key_id={report.key_id}")


def _cvm_mmio(p, a):
    h = _cvm_hart(p, a)
    addr = a.get("addr", 0x100000)
    if a.get("op", "load") == "store":
        res = guest.cvm_store(p, h, addr, a.get("value", 0))
    else:
        res = guest.cvm_load(p, h, addr)
    return ActionOutcome(a, f"value={res}" if isinstance(res, int) else _status(res))


def _cvm_exit(p, a):
    h = _cvm_hart(p, a)
    return ActionOutcome(a, _status(guest.cvm_terminate_self(p, h)))


def _fault(p, a):
    from .faults import seeded_violation
    seeded_violation(p, a.need("name"))
    return ActionOutcome(a, "injected")


_HANDLERS = {
    ActionKind.ARBITRARY_HYPERCALL: _arbitrary_hypercall,
    ActionKind.INTERRUPT_INJECTION: _interrupt,
    ActionKind.MALICIOUS_SHARED_INPUT: _malicious_shared_input,
    ActionKind.START_STOP_INTERRUPT_CVM: _start_stop_interrupt,
    ActionKind.READ_PROBE: lambda p, a: _memory_probe(p, a, False),
    ActionKind.WRITE_PROBE: lambda p, a: _memory_probe(p, a, True),
    ActionKind.DMA_PROBE: _dma_probe,
    ActionKind.IMPERSONATION_ATTEMPT: _impersonation,
    ActionKind.PROMOTE: _promote,
    ActionKind.CVM_STORE: _cvm_store,
    ActionKind.CVM_LOAD: _cvm_load,
    ActionKind.CVM_CALL: _cvm_call,
    ActionKind.CVM_SHARE: _cvm_share,
    ActionKind.CVM_ATTEST: _cvm_attest,
    ActionKind.CVM_MMIO: _cvm_mmio,
    ActionKind.CVM_EXIT: _cvm_exit,
    ActionKind.FAULT: _fault,
}


def apply_action(p: Platform, action: AdversaryAction) -> ActionOutcome:
    """Perform one action. Raises ScriptError if it cannot be taken in the
    current state (wrong context on the hart, bad parameters)."""
    if p.monitor is None:
        raise ScriptError("the platform has not booted")
    return _HANDLERS[action.kind](p, action)


__all__ = [
    "ActionKind", "ActionOutcome", "AdversaryAction", "THREAT_KINDS", "apply_action",
    "confidential_pages", "live_cvms", "running_cvm", "runs_hypervisor",
]
