"""Simulated hardware platform.

The platform enforces the hardware contract the security monitor relies on:
three ordered privilege levels, an immutable boot ROM, a memory isolation
component that can fence off confidential memory from harts and devices, a way
to flush microarchitectural state, an interrupt controller whose
highest-privilege routes only the highest privilege may touch, a lockable
endorsement seed, an atomic compare-and-swap and a random number generator.

Every operation is a single indivisible step and appends one record to
``Platform.trace``. Memory is a sparse map of immutable page images so that
cloning a platform (as the explorer does for every branch) is cheap.
"""
from __future__ import annotations

import copy
import enum
import hashlib
import random
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import (
    AccessDenied,
    ConfigError,
    Misaligned,
    OutOfRange,
    PinnedInterrupt,
    PrivilegeViolation,
    SeedLocked,
    UnroutedInterrupt,
)
from .trace import OK, Trace

PAGE_SIZE = 4096
WORD = 8
WORD_MASK = (1 << 64) - 1
NUM_GPRS = 16
SCRATCH_WORDS = 4
SEED_LEN = 32

BOOT_ROM = (0, PAGE_SIZE)
BOOT_ROM_IMAGE = b"CRTM-boot-rom-v1"

# Security domains. Every id at or above FIRST_GUEST is a confidential VM.
SM_DOMAIN = 0
HYPERVISOR = 1
DMA = 2
FIRST_GUEST = 16
NON_CONFIDENTIAL = frozenset({HYPERVISOR, DMA})

# Interrupt lines. IRQ_SM is the software interrupt that always reaches the
# monitor; the others are delegated to the hypervisor after boot.
IRQ_SM = 0
IRQ_TIMER = 1
IRQ_EXTERNAL = 2
IRQS = (IRQ_SM, IRQ_TIMER, IRQ_EXTERNAL)
PINNED_IRQS = frozenset({IRQ_SM})

# Deliberately broken behaviours a test can switch on through
# ``Platform.mutations`` to check that the oracle notices.
MUTATIONS = frozenset({
    "duplicate-token", "skip-zeroize", "irq-enabled-in-sm", "skip-route-node",
    "save-outside-control", "skip-irq-retarget", "skip-irq-restore", "leaky-view",
    "clobbered-restore", "skip-microarch-clear", "exit-ie-off", "cascade-fault",
    "late-seed-lock",
})

Range = tuple[int, int]


class PrivilegeLevel(enum.IntEnum):
    LOWEST = 0
    MIDDLE = 1
    HIGHEST = 2


class TrapCause(enum.Enum):
    ECALL = "ecall"
    GUEST_PAGE_FAULT = "guest_page_fault"
    INTERRUPT = "interrupt"


def page_of(addr: int) -> int:
    return addr // PAGE_SIZE


def page_range(page: int) -> Range:
    return (page * PAGE_SIZE, (page + 1) * PAGE_SIZE)


def overlaps(a: Range, b: Range) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def covered(rng: Range, ranges: Iterable[Range]) -> bool:
    """True when every byte of ``rng`` lies in the union of ``ranges``."""
    lo, hi = rng
    for start, end in sorted(ranges):
        if start > lo:
            return False
        if end > lo:
            lo = end
            if lo >= hi:
                return True
    return lo >= hi


def pairwise_disjoint(ranges: Iterable[Range]) -> bool:
    ordered = sorted(ranges)
    return all(a[1] <= b[0] for a, b in zip(ordered, ordered[1:]))


def is_confidential_domain(domain: int | None) -> bool:
    return domain is not None and domain >= FIRST_GUEST


@dataclass(frozen=True)
class IsolationConfig:
    """Access-control state of the memory isolation component.

    ``domain_grants`` and ``shared_pages`` are kept as sorted tuples so the
    config is hashable and serialises deterministically.
    """

    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    confidential_regions: tuple[Range, ...] = ()
    domain_grants: tuple[tuple[int, tuple[Range, ...]], ...] = ()
    shared_pages: tuple[tuple[Range, int], ...] = ()
    readonly: tuple[Range, ...] = (BOOT_ROM,)

    @classmethod
    def build(cls, confidential_regions=(), domain_grants=None, shared_pages=None,
              readonly=(BOOT_ROM,)) -> "IsolationConfig":
        grants = domain_grants or {}
        shared = shared_pages or {}
        return cls(
            confidential_regions=tuple(sorted(confidential_regions)),
            domain_grants=tuple(sorted((d, tuple(sorted(r))) for d, r in grants.items() if r)),
            shared_pages=tuple(sorted(shared.items())),
            readonly=tuple(sorted(readonly)),
        )

    def grants(self) -> dict[int, tuple[Range, ...]]:
        return dict(self.domain_grants)

    def grants_for(self, domain: int) -> tuple[Range, ...]:
        for d, ranges in self.domain_grants:
            if d == domain:
                return ranges
        return ()

    def shared_for(self, cvm: int) -> tuple[Range, ...]:
        return tuple(r for r, owner in self.shared_pages if owner == cvm)

    def with_grants(self, domain: int, ranges: Iterable[Range]) -> "IsolationConfig":
        grants = self.grants()
        grants[domain] = tuple(ranges)
        return IsolationConfig.build(self.confidential_regions, grants,
                                     dict(self.shared_pages), self.readonly)

    def without_domain(self, domain: int) -> "IsolationConfig":
        grants = self.grants()
        grants.pop(domain, None)
        shared = {r: o for r, o in self.shared_pages if o != domain}
        return IsolationConfig.build(self.confidential_regions, grants, shared, self.readonly)

    def with_shared(self, rng: Range, cvm: int) -> "IsolationConfig":
        shared = dict(self.shared_pages)
        shared[rng] = cvm
        return IsolationConfig.build(self.confidential_regions, self.grants(), shared,
                                     self.readonly)

    def is_confidential(self, rng: Range) -> bool:
        return any(overlaps(rng, r) for r in self.confidential_regions)

    def validate(self) -> None:
        """Raise ConfigError unless the config is internally consistent."""
        if not pairwise_disjoint(self.confidential_regions):
            raise ConfigError("confidential regions overlap")
        shared = [r for r, _ in self.shared_pages]
        if not pairwise_disjoint(shared):
            raise ConfigError("shared pages overlap")
        for rng in shared:
            if rng[0] % PAGE_SIZE or rng[1] - rng[0] != PAGE_SIZE:
                raise ConfigError(f"shared range {rng} is not one aligned page")
            if self.is_confidential(rng):
                raise ConfigError(f"shared range {rng} lies in confidential memory")
        owned: list[tuple[Range, int]] = []
        for domain, ranges in self.domain_grants:
            if not pairwise_disjoint(ranges):
                raise ConfigError(f"grants to domain {domain} overlap each other")
            for rng in ranges:
                if is_confidential_domain(domain):
                    if not (covered(rng, self.confidential_regions) or covered(rng, shared)):
                        raise ConfigError(f"grant {rng} to CVM {domain} leaves confidential memory")
                    for other_rng, other in owned:
                        if overlaps(rng, other_rng):
                            raise ConfigError(
                                f"grant {rng} to CVM {domain} overlaps grant to CVM {other}")
                    owned.append((rng, domain))
                elif self.is_confidential(rng) and not covered(rng, shared):
                    raise ConfigError(
                        f"grant {rng} to non-confidential domain {domain} hits confidential memory")

    def allows(self, domain: int | None, privilege: PrivilegeLevel | None,
               rng: Range, write: bool) -> bool:
        if write and any(overlaps(rng, r) for r in self.readonly):
            return False
        if privilege is PrivilegeLevel.HIGHEST:
            return True
        own = self.grants_for(domain) if domain is not None else ()
        if own and covered(rng, own):
            return True
        if is_confidential_domain(domain):
            return covered(rng, self.shared_for(domain))
        return not self.is_confidential(rng)

    def to_json(self) -> dict[str, Any]:
        return {
            "confidential_regions": [list(r) for r in self.confidential_regions],
            "domain_grants": {str(d): [list(r) for r in rs] for d, rs in self.domain_grants},
            "shared_pages": [[r[0], r[1], o] for r, o in self.shared_pages],
            "readonly": [list(r) for r in self.readonly],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "IsolationConfig":
        return cls.build(
            [tuple(r) for r in data["confidential_regions"]],
            {int(d): [tuple(r) for r in rs] for d, rs in data["domain_grants"].items()},
            {(s, e): o for s, e, o in data["shared_pages"]},
            [tuple(r) for r in data["readonly"]],
        )


@dataclass
class MicroArchState:
    """Explicit stand-in for caches and buffers: any confidential access
    leaves a non-zero footprint tagged with the accessing domain."""

    scratch: list[int] = field(default_factory=lambda: [0] * SCRATCH_WORDS)
    taint_owner: int | None = None

    def touch(self, domain: int | None, addr: int, value: int) -> None:
        self.scratch[(addr // WORD) % SCRATCH_WORDS] = ((value ^ addr) & WORD_MASK) | 1
        self.taint_owner = domain

    def clear(self) -> None:
        self.scratch = [0] * SCRATCH_WORDS
        self.taint_owner = None

    @property
    def clean(self) -> bool:
        return self.taint_owner is None and not any(self.scratch)


@dataclass
class TrapInfo:
    cause: TrapCause
    from_domain: int | None
    from_privilege: PrivilegeLevel
    from_pc: int
    irq: int | None = None
    fault: tuple | None = None  # (kind, guest addr, width, value) for guest page faults


@dataclass
class HartContext:
    hart_id: int
    privilege: PrivilegeLevel = PrivilegeLevel.HIGHEST
    domain: int | None = SM_DOMAIN
    gprs: list[int] = field(default_factory=lambda: [0] * NUM_GPRS)
    pc: int = BOOT_ROM[0]
    interrupts_enabled: bool = False
    microarch: MicroArchState = field(default_factory=MicroArchState)
    halted: bool = False
    trap: TrapInfo | None = None


@dataclass(frozen=True)
class Route:
    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    target: PrivilegeLevel
    handler: int


@dataclass
class InterruptController:
    # routes are hart-local (one core-local controller per hart)
    routes: dict[tuple[int, int], Route] = field(default_factory=dict)
    pinned: frozenset[int] = PINNED_IRQS

    def route(self, hart_id: int, irq: int) -> Route | None:
        return self.routes.get((hart_id, irq))

    def hart_routes(self, hart_id: int) -> dict[int, Route]:
        return {irq: r for (h, irq), r in self.routes.items() if h == hart_id}


@dataclass
class EndorsementDevice:
    seed: bytes
    locked: bool = False


@dataclass(frozen=True)
class DeliveryRecord:
    irq: int
    hart_id: int
    old_privilege: PrivilegeLevel
    new_privilege: PrivilegeLevel
    handler: int


def _zero_page() -> bytes:
    return bytes(PAGE_SIZE)


ZERO_PAGE = _zero_page()


class Platform:
    """One simulated machine. Mutate it only through its methods."""

    def __init__(self, mem_size: int, hart_count: int, rng_seed: int,
                 endorsement_seed: bytes | None = None):
        if mem_size <= 0 or mem_size % PAGE_SIZE:
            raise ConfigError(f"memory size {mem_size} is not a positive multiple of {PAGE_SIZE}")
        if mem_size < 2 * PAGE_SIZE:
            raise ConfigError("need at least the boot ROM page and one more")
        if hart_count < 1:
            raise ConfigError("need at least one hart")
        if endorsement_seed is None:
            endorsement_seed = hashlib.sha256(b"endorsement-seed:%d" % rng_seed).digest()
        if len(endorsement_seed) != SEED_LEN:
            raise ConfigError(f"endorsement seed must be {SEED_LEN} bytes")
        self.mem_size = mem_size
        self.hart_count = hart_count
        self.rng_seed = rng_seed
        self.pages: dict[int, bytes] = {}
        self.harts: list[HartContext] = []
        self.isolation = IsolationConfig()
        self.irqc = InterruptController()
        self.endorsement = EndorsementDevice(endorsement_seed)
        self.rng = random.Random(rng_seed)
        self.trace = Trace()
        self.trap_vector = BOOT_ROM[0]
        # Security monitor state lives here once boot has run (see boot.py).
        self.monitor: Any = None
        # Names of deliberately broken behaviours, for mutation testing.
        self.mutations: frozenset[str] = frozenset()
        self.pages[0] = BOOT_ROM_IMAGE + bytes(PAGE_SIZE - len(BOOT_ROM_IMAGE))
        self._reset_state()

    def _reset_state(self) -> None:
        self.harts = [HartContext(h) for h in range(self.hart_count)]
        for hart in self.harts[1:]:
            hart.halted = True
        self.isolation = IsolationConfig()
        self.irqc = InterruptController()
        for h in range(self.hart_count):
            for irq in self.irqc.pinned:
                self.irqc.routes[(h, irq)] = Route(PrivilegeLevel.HIGHEST, BOOT_ROM[0])
        self.endorsement.locked = False
        self.trap_vector = BOOT_ROM[0]
        self.monitor = None
        self.trace.record(None, None, "reset", harts=self.hart_count, mem_size=self.mem_size,
                          config=self.isolation)

    def reset(self) -> None:
        """Processor reset: harts, isolation, interrupts and the seed lock
        return to power-on state. Memory contents survive."""
        self._reset_state()

    # ------------------------------------------------------------------ helpers

    @property
    def page_count(self) -> int:
        return self.mem_size // PAGE_SIZE

    def hart(self, hart_id: int) -> HartContext:
        try:
            return self.harts[hart_id]
        except IndexError:
            raise ConfigError(f"no hart {hart_id}") from None

    def _emit(self, hart_id: int | None, op: str, outcome: str = OK, **args):
        domain = self.harts[hart_id].domain if hart_id is not None else None
        return self.trace.record(hart_id, domain, op, outcome, **args)

    def _check_bounds(self, addr: int, width: int) -> None:
        if addr < 0 or width <= 0 or addr + width > self.mem_size:
            raise OutOfRange(f"[{addr:#x}, +{width}) outside memory")

    def peek(self, addr: int, width: int) -> bytes:
        """Raw read with no checks and no trace record. Oracle and test use only."""
        out = bytearray()
        while width:
            page, off = divmod(addr, PAGE_SIZE)
            n = min(width, PAGE_SIZE - off)
            out += self.pages.get(page, ZERO_PAGE)[off:off + n]
            addr += n
            width -= n
        return bytes(out)

    def poke(self, addr: int, data: bytes) -> None:
        """Raw write with no checks and no trace record. Fault injection only."""
        while data:
            page, off = divmod(addr, PAGE_SIZE)
            n = min(len(data), PAGE_SIZE - off)
            old = self.pages.get(page, ZERO_PAGE)
            new = old[:off] + data[:n] + old[off + n:]
            if new == ZERO_PAGE:
                self.pages.pop(page, None)
            else:
                self.pages[page] = new
            addr += n
            data = data[n:]

    def page_is_zero(self, page: int) -> bool:
        image = self.pages.get(page)
        return image is None or image == ZERO_PAGE

    def zero_page(self, hart_id: int, page: int, token: int | None = None) -> None:
        """Clear one whole page. Same access rules and tracing as write_phys."""
        self.write_phys(hart_id, page * PAGE_SIZE, ZERO_PAGE, token=token)

    def _taint(self, hart: HartContext, rng: Range, data: bytes) -> None:
        if self.isolation.is_confidential(rng):
            hart.microarch.touch(hart.domain, rng[0], int.from_bytes(data[:WORD].ljust(WORD, b"\0"), "little"))

    # ------------------------------------------------------------------ memory

    def read_phys(self, hart_id: int, addr: int, width: int, *, token: int | None = None) -> bytes:
        hart = self.hart(hart_id)
        args = dict(addr=addr, width=width, priv=hart.privilege)
        if token is not None:
            args["token"] = token
        try:
            self._check_bounds(addr, width)
        except OutOfRange:
            self._emit(hart_id, "read_phys", "OutOfRange", **args)
            raise
        rng = (addr, addr + width)
        if not self.isolation.allows(hart.domain, hart.privilege, rng, write=False):
            self._emit(hart_id, "read_phys", "AccessDenied", **args)
            raise AccessDenied(f"hart {hart_id} domain {hart.domain} read {rng}")
        data = self.peek(addr, width)
        self._taint(hart, rng, data)
        self._emit(hart_id, "read_phys", OK, **args)
        return data

    def write_phys(self, hart_id: int, addr: int, data: bytes, *, token: int | None = None) -> None:
        hart = self.hart(hart_id)
        width = len(data)
        args = dict(addr=addr, width=width, priv=hart.privilege)
        if token is not None:
            args["token"] = token
        try:
            self._check_bounds(addr, width)
        except OutOfRange:
            self._emit(hart_id, "write_phys", "OutOfRange", **args)
            raise
        rng = (addr, addr + width)
        if not self.isolation.allows(hart.domain, hart.privilege, rng, write=True):
            self._emit(hart_id, "write_phys", "AccessDenied", **args)
            raise AccessDenied(f"hart {hart_id} domain {hart.domain} write {rng}")
        self.poke(addr, data)
        self._taint(hart, rng, data)
        self._emit(hart_id, "write_phys", OK, **args)

    def read_word(self, hart_id: int, addr: int, *, token: int | None = None) -> int:
        return int.from_bytes(self.read_phys(hart_id, addr, WORD, token=token), "little")

    def write_word(self, hart_id: int, addr: int, value: int, *, token: int | None = None) -> None:
        self.write_phys(hart_id, addr, (value & WORD_MASK).to_bytes(WORD, "little"), token=token)

    def dma_read(self, addr: int, width: int) -> bytes:
        """Device-originated read; the device is a non-confidential pseudo-domain."""
        args = dict(addr=addr, width=width)
        try:
            self._check_bounds(addr, width)
        except OutOfRange:
            self.trace.record(None, DMA, "dma_read", "OutOfRange", **args)
            raise
        if not self.isolation.allows(DMA, None, (addr, addr + width), write=False):
            self.trace.record(None, DMA, "dma_read", "AccessDenied", **args)
            raise AccessDenied(f"DMA read [{addr:#x}, +{width})")
        self.trace.record(None, DMA, "dma_read", OK, **args)
        return self.peek(addr, width)

    def dma_write(self, addr: int, data: bytes) -> None:
        args = dict(addr=addr, width=len(data))
        try:
            self._check_bounds(addr, len(data))
        except OutOfRange:
            self.trace.record(None, DMA, "dma_write", "OutOfRange", **args)
            raise
        if not self.isolation.allows(DMA, None, (addr, addr + len(data)), write=True):
            self.trace.record(None, DMA, "dma_write", "AccessDenied", **args)
            raise AccessDenied(f"DMA write [{addr:#x}, +{len(data)})")
        self.poke(addr, data)
        self.trace.record(None, DMA, "dma_write", OK, **args)

    def atomic_cas(self, hart_id: int, addr: int, expected: int, new: int) -> int:
        hart = self.hart(hart_id)
        args = dict(addr=addr, expected=expected, new=new, priv=hart.privilege)
        if addr % WORD:
            self._emit(hart_id, "atomic_cas", "Misaligned", **args)
            raise Misaligned(f"CAS at {addr:#x}")
        self._check_bounds(addr, WORD)
        rng = (addr, addr + WORD)
        if not self.isolation.allows(hart.domain, hart.privilege, rng, write=True):
            self._emit(hart_id, "atomic_cas", "AccessDenied", **args)
            raise AccessDenied(f"CAS at {addr:#x}")
        prior = int.from_bytes(self.peek(addr, WORD), "little")
        if prior == expected:
            self.poke(addr, (new & WORD_MASK).to_bytes(WORD, "little"))
        self._emit(hart_id, "atomic_cas", OK, prior=prior, **args)
        return prior

    # ------------------------------------------------------------------ privileged configuration

    def set_isolation(self, hart_id: int, config: IsolationConfig) -> None:
        hart = self.hart(hart_id)
        if hart.privilege is not PrivilegeLevel.HIGHEST:
            self._emit(hart_id, "set_isolation", "PrivilegeViolation", priv=hart.privilege)
            raise PrivilegeViolation(f"hart {hart_id} at {hart.privilege.name} cannot reconfigure isolation")
        if not covered(BOOT_ROM, config.readonly):
            self._emit(hart_id, "set_isolation", "ConfigError", priv=hart.privilege)
            raise ConfigError("the boot ROM must stay read-only")
        try:
            config.validate()
        except ConfigError:
            self._emit(hart_id, "set_isolation", "ConfigError", priv=hart.privilege)
            raise
        self.isolation = config
        self._emit(hart_id, "set_isolation", OK, priv=hart.privilege, config=config)

    def configure_interrupt(self, hart_id: int, irq: int, target: PrivilegeLevel, handler: int,
                            on_hart: int | None = None) -> None:
        hart = self.hart(hart_id)
        on_hart = hart_id if on_hart is None else on_hart
        self.hart(on_hart)
        args = dict(irq=irq, target=target, handler=handler, on_hart=on_hart, priv=hart.privilege)
        if irq not in IRQS:
            self._emit(hart_id, "configure_interrupt", "ConfigError", **args)
            raise ConfigError(f"unknown interrupt {irq}")
        current = self.irqc.route(on_hart, irq)
        touches_highest = target is PrivilegeLevel.HIGHEST or (
            current is not None and current.target is PrivilegeLevel.HIGHEST)
        if touches_highest and hart.privilege is not PrivilegeLevel.HIGHEST:
            self._emit(hart_id, "configure_interrupt", "PrivilegeViolation", **args)
            raise PrivilegeViolation(f"hart {hart_id} cannot retarget irq {irq}")
        if target.value > hart.privilege.value:
            self._emit(hart_id, "configure_interrupt", "PrivilegeViolation", **args)
            raise PrivilegeViolation(f"cannot route irq {irq} above the caller's privilege")
        if irq in self.irqc.pinned and target is not PrivilegeLevel.HIGHEST:
            self._emit(hart_id, "configure_interrupt", "PinnedInterrupt", **args)
            raise PinnedInterrupt(f"irq {irq} is pinned to the highest privilege")
        self.irqc.routes[(on_hart, irq)] = Route(target, handler)
        self._emit(hart_id, "configure_interrupt", OK, **args)

    def set_trap_vector(self, hart_id: int, addr: int) -> None:
        hart = self.hart(hart_id)
        if hart.privilege is not PrivilegeLevel.HIGHEST:
            self._emit(hart_id, "set_trap_vector", "PrivilegeViolation", addr=addr, priv=hart.privilege)
            raise PrivilegeViolation("trap vector is machine-level state")
        self.trap_vector = addr
        self._emit(hart_id, "set_trap_vector", OK, addr=addr, priv=hart.privilege)

    # ------------------------------------------------------------------ control transfer

    def _enter(self, hart: HartContext, target: PrivilegeLevel, pc: int) -> None:
        hart.privilege = target
        hart.pc = pc
        hart.interrupts_enabled = False
        hart.halted = False
        if target is PrivilegeLevel.HIGHEST:
            hart.domain = SM_DOMAIN
        elif is_confidential_domain(hart.domain) or hart.domain == SM_DOMAIN:
            # A lower-privilege handler is untrusted, non-confidential code.
            hart.domain = HYPERVISOR

    def deliver_interrupt(self, irq: int, hart_id: int = 0) -> DeliveryRecord:
        hart = self.hart(hart_id)
        route = self.irqc.route(hart_id, irq)
        if route is None:
            self._emit(hart_id, "deliver_interrupt", "UnroutedInterrupt", irq=irq)
            raise UnroutedInterrupt(f"irq {irq} has no route on hart {hart_id}")
        old = hart.privilege
        from_domain = hart.domain
        hart.trap = TrapInfo(TrapCause.INTERRUPT, hart.domain, old, hart.pc, irq=irq)
        self._emit(hart_id, "deliver_interrupt", OK, irq=irq, from_priv=old, to_priv=route.target,
                   from_domain=from_domain, handler=route.handler)
        self._enter(hart, route.target, route.handler)
        return DeliveryRecord(irq, hart_id, old, route.target, route.handler)

    def trap(self, hart_id: int, cause: TrapCause, fault: tuple | None = None) -> None:
        """Synchronous exception (environment call or guest page fault).
        Always taken at the highest privilege on the monitor's trap vector."""
        hart = self.hart(hart_id)
        old = hart.privilege
        hart.trap = TrapInfo(cause, hart.domain, old, hart.pc, fault=fault)
        args = dict(cause=cause.value, from_priv=old, to_priv=PrivilegeLevel.HIGHEST,
                    from_domain=hart.domain)
        if fault is not None:
            args["fault"] = list(fault)
        self._emit(hart_id, "trap", OK, **args)
        self._enter(hart, PrivilegeLevel.HIGHEST, self.trap_vector)

    def return_to(self, hart_id: int, target: PrivilegeLevel, pc: int, *, domain: int | None = None,
                  interrupts: bool = True, gprs: list[int] | None = None) -> None:
        """Trap return (mret/sret). Lowers or keeps privilege; only the highest
        privilege may re-mark the hart's security domain."""
        hart = self.hart(hart_id)
        old = hart.privilege
        new_domain = hart.domain if domain is None else domain
        args = dict(from_priv=old, to_priv=target, domain_to=new_domain, ie=interrupts)
        if target.value > old.value:
            self._emit(hart_id, "return_to", "PrivilegeViolation", **args)
            raise PrivilegeViolation("trap return cannot raise privilege")
        if new_domain != hart.domain and old is not PrivilegeLevel.HIGHEST:
            self._emit(hart_id, "return_to", "PrivilegeViolation", **args)
            raise PrivilegeViolation("only the highest privilege can mark a thread's domain")
        if gprs is not None:
            if len(gprs) != NUM_GPRS:
                raise ConfigError(f"register file has {NUM_GPRS} entries")
            hart.gprs = [g & WORD_MASK for g in gprs]
        self._emit(hart_id, "return_to", OK, gprs=list(hart.gprs), **args)
        hart.privilege = target
        hart.domain = new_domain
        hart.pc = pc
        hart.interrupts_enabled = interrupts
        hart.halted = False
        hart.trap = None

    def set_interrupt_enable(self, hart_id: int, enabled: bool) -> None:
        hart = self.hart(hart_id)
        hart.interrupts_enabled = enabled
        self._emit(hart_id, "set_interrupt_enable", OK, enabled=enabled, priv=hart.privilege)

    def clear_microarch(self, hart_id: int) -> None:
        self.hart(hart_id).microarch.clear()
        self._emit(hart_id, "clear_microarch", OK)

    def halt(self, hart_id: int) -> None:
        self.hart(hart_id).halted = True
        self._emit(hart_id, "halt", OK)

    # ------------------------------------------------------------------ seed, rng

    def read_seed(self, hart_id: int) -> bytes:
        hart = self.hart(hart_id)
        if self.endorsement.locked:
            self._emit(hart_id, "read_seed", "SeedLocked", priv=hart.privilege)
            raise SeedLocked("endorsement seed is locked until reset")
        if hart.privilege is not PrivilegeLevel.HIGHEST:
            self._emit(hart_id, "read_seed", "PrivilegeViolation", priv=hart.privilege)
            raise PrivilegeViolation("endorsement seed is readable only at the highest privilege")
        self._emit(hart_id, "read_seed", OK, priv=hart.privilege)
        return self.endorsement.seed

    def lock_seed(self, hart_id: int) -> None:
        hart = self.hart(hart_id)
        self.endorsement.locked = True
        self._emit(hart_id, "lock_seed", OK, priv=hart.privilege)

    def rng_next(self) -> int:
        value = self.rng.getrandbits(64)
        self.trace.record(None, None, "rng_next")
        return value

    # ------------------------------------------------------------------ cloning

    def clone(self) -> "Platform":
        """Independent copy sharing only immutable page images."""
        trace = self.trace
        self.trace = Trace(trace.next_seq)
        rng = random.Random()
        rng.setstate(self.rng.getstate())  # far cheaper than deep-copying the state tuple
        try:
            twin = copy.deepcopy(self, {id(self.rng): rng})
        finally:
            self.trace = trace
        return twin

    def state_key(self) -> tuple:
        """Hashable summary of everything except the trace and sequence numbers."""
        harts = tuple(
            (h.privilege, h.domain, tuple(h.gprs), h.pc, h.interrupts_enabled,
             tuple(h.microarch.scratch), h.microarch.taint_owner, h.halted)
            for h in self.harts)
        routes = tuple(sorted((k, r.target, r.handler) for k, r in self.irqc.routes.items()))
        return (tuple(sorted(self.pages.items())), self.isolation, routes, harts,
                self.endorsement.locked, self.trap_vector)


def create_platform(mem_size: int, hart_count: int, rng_seed: int,
                    endorsement_seed: bytes | None = None) -> Platform:
    return Platform(mem_size, hart_count, rng_seed, endorsement_seed)
