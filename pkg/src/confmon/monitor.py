"""Security monitor state: domain table, per-hart FSM slots, memory layout
and the call whitelist table.

Register conventions (16 general purpose registers):

* register 7 carries the call id on every environment call;
* a CVM passes arguments in registers 0-5 and receives status in register 0
  and a value in register 1;
* the hypervisor names the target domain of an SM call in register 6 and
  receives status in register 15 and a value in register 14.

The whitelist table says, per call id, which registers may cross a domain
boundary outbound (``args``) and which may be written back (``results``).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .hw import NUM_GPRS, PAGE_SIZE, Range

REG_CALL = 7
REG_TARGET = 6
REG_HV_VALUE = 14
REG_HV_STATUS = 15
REG_STATUS = 0
REG_VALUE = 1
HV_RETURN_REGS = frozenset({REG_HV_VALUE, REG_HV_STATUS})

SLOT_BYTES = 256
KEY_OFFSET = 64
HART_SLOTS_OFFSET = 512
MAX_CVMS = 8


class Status(enum.IntEnum):
    OK = 0
    UNKNOWN_DOMAIN = 1
    NOT_RUNNABLE = 2
    BUSY = 3
    OUT_OF_MEMORY = 4
    ALREADY_MAPPED = 5
    NOT_FROM_CVM = 6
    UNDECLARED_CALL = 7
    INVALID = 8
    # exit reasons reported to the hypervisor when a resumed CVM comes back
    EXIT_ROUTED = 0x10
    EXIT_INTERRUPT = 0x11
    EXIT_TERMINATED = 0x12


class CallKind(enum.Enum):
    PROMOTE_TO_CVM = "PromoteToCvm"
    RESUME = "Resume"
    TERMINATE = "Terminate"
    SHARE_PAGE = "SharePage"
    HYPERCALL = "Hypercall"
    MMIO_LOAD = "MmioLoad"
    MMIO_STORE = "MmioStore"
    ATTEST = "Attest"


ROUTED_KINDS = frozenset({CallKind.HYPERCALL, CallKind.MMIO_LOAD, CallKind.MMIO_STORE})


@dataclass(frozen=True)
class CallSpec:
    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    call_id: int
    name: str
    kind: CallKind
    caller: str  # "hypervisor", "cvm" or "any"
    args: frozenset[int]
    results: frozenset[int]

    def to_json(self) -> dict:
        return {"id": self.call_id, "name": self.name, "kind": self.kind.value,
                "caller": self.caller, "args": sorted(self.args), "results": sorted(self.results)}


class WhitelistTable:
    """Static call table. Unknown ids are simply absent."""

    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    def __init__(self, calls: list[CallSpec]):
        self.calls = {c.call_id: c for c in calls}
        if len(self.calls) != len(calls):
            raise ConfigError("duplicate call id in whitelist table")
        self._validate()

    def _validate(self) -> None:
        for spec in self.calls.values():
            for reg in spec.args | spec.results:
                if not 0 <= reg < NUM_GPRS:
                    raise ConfigError(f"call {spec.name}: register {reg} out of range")
            if spec.caller == "cvm":
                if spec.args & HV_RETURN_REGS:
                    raise ConfigError(f"call {spec.name}: registers 14/15 are reserved")
                if spec.results & {REG_TARGET, REG_CALL}:
                    raise ConfigError(f"call {spec.name}: results may not use registers 6/7")
            if spec.caller not in ("hypervisor", "cvm", "any"):
                raise ConfigError(f"call {spec.name}: unknown caller {spec.caller!r}")

    def get(self, call_id: int) -> CallSpec | None:
        return self.calls.get(call_id)

    def by_kind(self, kind: CallKind) -> list[CallSpec]:
        return [c for c in self.calls.values() if c.kind is kind]

    def id_of(self, kind: CallKind) -> int:
        return min(c.call_id for c in self.by_kind(kind))

    def to_json(self) -> dict:
        return {"version": 1, "registers": NUM_GPRS,
                "calls": [self.calls[k].to_json() for k in sorted(self.calls)]}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "WhitelistTable":
        if data.get("registers", NUM_GPRS) != NUM_GPRS:
            raise ConfigError(f"whitelist table is for {data['registers']} registers")
        try:
            calls = [CallSpec(int(c["id"]), c["name"], CallKind(c["kind"]), c.get("caller", "cvm"),
                              frozenset(c["args"]), frozenset(c["results"]))
                     for c in data["calls"]]
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad whitelist table: {exc}") from None
        return cls(calls)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "WhitelistTable":
        if path is None:
            text = resources.files("confmon.data").joinpath("whitelist.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_json(json.loads(text))


class DomainKind(enum.Enum):
    HYPERVISOR = "Hypervisor"
    VM = "Vm"
    CVM = "Cvm"


class Lifecycle(enum.Enum):
    CREATED = "Created"
    RUNNABLE = "Runnable"
    TERMINATED = "Terminated"


@dataclass
class SecurityDomain:
    id: int
    kind: DomainKind
    lifecycle: Lifecycle = Lifecycle.CREATED
    page_table: Any = None  # tracker.PageTable once promoted
    measurement: bytes | None = None
    shared: dict[int, int] = field(default_factory=dict)  # guest page -> physical address
    image_pages: tuple[int, ...] = ()
    slot: int | None = None
    busy_on: int | None = None
    pending: int | None = None  # call id of a routed request awaiting its answer
    last_report: Any = None

    def state_key(self) -> tuple:
        pt = self.page_table.state_key() if self.page_table is not None else None
        return (self.id, self.kind, self.lifecycle, pt, self.measurement,
                tuple(sorted(self.shared.items())), self.image_pages, self.slot,
                self.busy_on, self.pending)


@dataclass
class HartFsm:
    node: Any = None  # fsm.FsmNode while the monitor runs on this hart
    hv_saved: bool = False  # hypervisor context parked in this hart's slot by an NC->C move
    running_cvm: int | None = None
    saved_gprs: list[int] | None = None  # context captured at the last enter node

    def state_key(self) -> tuple:
        return (self.node, self.hv_saved, self.running_cvm)


@dataclass(frozen=True)
class Layout:
    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    sm_region: Range
    control_region: Range
    tracker_range: Range
    shared_reserve: Range
    hypervisor_region: Range

    @property
    def lock_addr(self) -> int:
        return self.control_region[0]

    @property
    def key_addr(self) -> int:
        return self.control_region[0] + KEY_OFFSET

    def hart_slot(self, hart_id: int) -> int:
        return self.control_region[0] + HART_SLOTS_OFFSET + hart_id * SLOT_BYTES

    def cvm_slot(self, index: int, hart_count: int) -> int:
        return self.hart_slot(hart_count) + index * SLOT_BYTES

    @staticmethod
    def control_pages(hart_count: int) -> int:
        need = HART_SLOTS_OFFSET + (hart_count + MAX_CVMS) * SLOT_BYTES
        return -(-need // PAGE_SIZE)

    @property
    def sm_handler(self) -> int:
        return self.sm_region[0]

    def to_json(self) -> dict:
        return {"sm_region": list(self.sm_region), "control_region": list(self.control_region),
                "tracker_range": list(self.tracker_range),
                "shared_reserve": list(self.shared_reserve),
                "hypervisor_region": list(self.hypervisor_region)}


@dataclass
class MonitorState:
    layout: Layout
    whitelist: WhitelistTable
    pool: Any = None  # tracker.TokenPool
    domains: dict[int, SecurityDomain] = field(default_factory=dict)
    harts: list[HartFsm] = field(default_factory=list)
    shared_free: list[int] = field(default_factory=list)  # physical page addresses
    free_slots: list[int] = field(default_factory=lambda: list(range(MAX_CVMS)))
    next_domain: int = 16
    boot_chain: tuple = ()
    public_key: bytes = b""
    key_addr: int = 0
    sm_image_len: int = 0
    report: Any = None  # boot.BootReport

    def cvm(self, domain_id: int) -> SecurityDomain | None:
        d = self.domains.get(domain_id)
        return d if d is not None and d.kind is DomainKind.CVM else None

    def slot_addr(self, domain: SecurityDomain, hart_count: int) -> int:
        return self.layout.cvm_slot(domain.slot, hart_count)

    def page_tables(self) -> dict[int, Any]:
        return {d.id: d.page_table for d in self.domains.values() if d.page_table is not None}

    def state_key(self) -> tuple:
        return (self.pool.state_key() if self.pool is not None else None,
                tuple(d.state_key() for _, d in sorted(self.domains.items())),
                tuple(h.state_key() for h in self.harts),
                tuple(self.shared_free), tuple(self.free_slots), self.next_domain, self.key_addr)
