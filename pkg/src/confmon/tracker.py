"""Confidential-page tracker built on linear page tokens.

A :class:`PageToken` stands for exclusive logical ownership of one physical
page. Tokens are created once, by :func:`init_tracker` during boot, and after
that can only be moved: every hand-over returns a fresh handle and kills the
old one, so a stale reference fails loudly instead of aliasing the page.

A token is either ``UNALLOCATED`` (sitting in the pool, page known to be zero)
or ``ALLOCATED`` (owned by some monitor component). Both transitions clear the
page.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator

from .errors import (
    AlreadyInitialized,
    AlreadyMapped,
    LinearityError,
    Misaligned,
    NotMapped,
    OutOfBounds,
    OutOfMemory,
)
from .hw import PAGE_SIZE, SM_DOMAIN, WORD, Platform

PT_ENTRIES = PAGE_SIZE // WORD


class TokenState(enum.Enum):
    UNALLOCATED = "UnAllocated"
    ALLOCATED = "Allocated"


class PageToken:
    __slots__ = ("base", "size", "state", "serial", "_live")

    def __init__(self, base: int, serial: int, state: TokenState = TokenState.UNALLOCATED,
                 size: int = PAGE_SIZE):
        self.base = base
        self.size = size
        self.state = state
        self.serial = serial
        self._live = True

    @property
    def live(self) -> bool:
        return self._live

    @property
    def page(self) -> int:
        return self.base // PAGE_SIZE

    @property
    def range(self) -> tuple[int, int]:
        return (self.base, self.base + self.size)

    def _check(self, state: TokenState | None = None) -> None:
        if not self._live:
            raise LinearityError(f"token #{self.serial} was moved or consumed")
        if state is not None and self.state is not state:
            raise LinearityError(f"token #{self.serial} is {self.state.value}, expected {state.value}")

    def _move(self, state: TokenState | None = None) -> "PageToken":
        self._check()
        self._live = False
        return PageToken(self.base, self.serial, state or self.state, self.size)

    def __deepcopy__(self, memo):
        twin = PageToken(self.base, self.serial, self.state, self.size)
        twin._live = self._live
        return twin

    def __repr__(self) -> str:
        flag = "" if self._live else " dead"
        return f"<PageToken #{self.serial} {self.base:#x} {self.state.value}{flag}>"


class BootCapability:
    """One-shot permission to create the token set, handed out by boot."""

    def __init__(self):
        self.used = False


@dataclass
class TokenPool:
    start: int
    end: int
    free: dict[int, PageToken] = field(default_factory=dict)
    total_created: int = 0

    def __len__(self) -> int:
        return len(self.free)

    def __iter__(self) -> Iterator[PageToken]:
        return iter(sorted(self.free.values(), key=lambda t: t.base))

    def state_key(self) -> tuple:
        return tuple(sorted((t.serial, t.base) for t in self.free.values()))


def _record(platform: Platform, hart_id: int, op: str, **args) -> None:
    platform.trace.record(hart_id, SM_DOMAIN, op, **args)


def init_tracker(platform: Platform, start: int, end: int, capability: BootCapability,
                 hart_id: int = 0) -> TokenPool:
    if capability.used or getattr(platform.monitor, "pool", None) is not None:
        raise AlreadyInitialized("the token set can only be created once per boot")
    if start % PAGE_SIZE or end % PAGE_SIZE or end <= start:
        raise Misaligned(f"tracker range [{start:#x}, {end:#x}) is empty or unaligned")
    capability.used = True
    pool = TokenPool(start, end)
    for serial, base in enumerate(range(start, end, PAGE_SIZE)):
        pool.free[serial] = PageToken(base, serial)
        _record(platform, hart_id, "token_create", serial=serial, base=base)
    pool.total_created = len(pool.free)
    return pool


def allocate(pool: TokenPool, platform: Platform | None = None, hart_id: int = 0) -> PageToken:
    if not pool.free:
        raise OutOfMemory("no free confidential pages")
    serial = min(pool.free, key=lambda s: pool.free[s].base)
    if platform is not None and "duplicate-token" in platform.mutations:
        token = PageToken(pool.free[serial].base, serial)
    else:
        token = pool.free.pop(serial)._move()
    if platform is not None:
        _record(platform, hart_id, "token_allocate", serial=token.serial)
    return token


def _zeroize(platform: Platform, hart_id: int, token: PageToken) -> None:
    platform.zero_page(hart_id, token.page, token=token.serial)


def to_allocated(token: PageToken, platform: Platform, hart_id: int = 0) -> PageToken:
    token._check(TokenState.UNALLOCATED)
    _zeroize(platform, hart_id, token)
    moved = token._move(TokenState.ALLOCATED)
    _record(platform, hart_id, "token_state", serial=moved.serial, state=moved.state.value)
    return moved


def deallocate(pool: TokenPool, token: PageToken, platform: Platform, hart_id: int = 0) -> None:
    token._check(TokenState.ALLOCATED)
    if "skip-zeroize" not in platform.mutations:
        _zeroize(platform, hart_id, token)
    moved = token._move(TokenState.UNALLOCATED)
    _record(platform, hart_id, "token_state", serial=moved.serial, state=moved.state.value)
    pool.free[moved.serial] = moved
    _record(platform, hart_id, "token_free", serial=moved.serial)


def _bounds(token: PageToken, offset: int, width: int) -> int:
    if offset < 0 or offset + width > token.size:
        raise OutOfBounds(f"offset {offset}+{width} outside token #{token.serial}")
    return token.base + offset


def token_read(token: PageToken, offset: int, platform: Platform, hart_id: int = 0,
               width: int = WORD) -> int:
    token._check(TokenState.ALLOCATED)
    addr = _bounds(token, offset, width)
    data = platform.read_phys(hart_id, addr, width, token=token.serial)
    return int.from_bytes(data, "little")


def token_write(token: PageToken, offset: int, value: int, platform: Platform,
                hart_id: int = 0, width: int = WORD) -> None:
    token._check(TokenState.ALLOCATED)
    addr = _bounds(token, offset, width)
    platform.write_phys(hart_id, addr, value.to_bytes(width, "little"), token=token.serial)


def token_write_bytes(token: PageToken, offset: int, data: bytes, platform: Platform,
                      hart_id: int = 0) -> None:
    token._check(TokenState.ALLOCATED)
    addr = _bounds(token, offset, len(data))
    platform.write_phys(hart_id, addr, data, token=token.serial)


def token_read_bytes(token: PageToken, offset: int, width: int, platform: Platform,
                     hart_id: int = 0) -> bytes:
    token._check(TokenState.ALLOCATED)
    addr = _bounds(token, offset, width)
    return platform.read_phys(hart_id, addr, width, token=token.serial)


@dataclass
class PageTable:
    """Guest page number to physical page map for one domain.

    Entries live in the root page as a flat array of words; entry ``n`` holds
    ``physical page number + 1`` (zero means unmapped). The Python dict keeps
    the tokens themselves, which is what confers ownership.
    """

    root: PageToken
    owner: int
    mappings: dict[int, PageToken] = field(default_factory=dict)

    def tokens(self) -> Iterator[PageToken]:
        yield self.root
        yield from self.mappings.values()

    def pages(self) -> set[int]:
        return {t.page for t in self.tokens()}

    def state_key(self) -> tuple:
        return (self.owner, self.root.serial,
                tuple(sorted((g, t.serial) for g, t in self.mappings.items())))


def page_table_new(pool: TokenPool, owner: int, platform: Platform, hart_id: int = 0) -> PageTable:
    root = to_allocated(allocate(pool, platform, hart_id), platform, hart_id)
    _record(platform, hart_id, "pt_new", owner=owner, serial=root.serial)
    return PageTable(root._move(), owner)


def map_page(pt: PageTable, guest_page: int, token: PageToken, platform: Platform,
             hart_id: int = 0) -> None:
    token._check(TokenState.ALLOCATED)
    if not 0 <= guest_page < PT_ENTRIES:
        raise OutOfBounds(f"guest page {guest_page} outside the table")
    if guest_page in pt.mappings:
        raise AlreadyMapped(f"guest page {guest_page} already mapped")
    token_write(pt.root, guest_page * WORD, token.page + 1, platform, hart_id)
    pt.mappings[guest_page] = token._move()
    _record(platform, hart_id, "pt_map", owner=pt.owner, gpn=guest_page, serial=token.serial)


def unmap_page(pt: PageTable, guest_page: int, platform: Platform, hart_id: int = 0) -> PageToken:
    if guest_page not in pt.mappings:
        raise NotMapped(f"guest page {guest_page} not mapped")
    token_write(pt.root, guest_page * WORD, 0, platform, hart_id)
    token = pt.mappings.pop(guest_page)._move()
    _record(platform, hart_id, "pt_unmap", owner=pt.owner, gpn=guest_page, serial=token.serial)
    return token


def translate(pt: PageTable, guest_page: int, platform: Platform, hart_id: int = 0) -> int:
    if not 0 <= guest_page < PT_ENTRIES:
        raise NotMapped(f"guest page {guest_page} outside the table")
    entry = token_read(pt.root, guest_page * WORD, platform, hart_id)
    if entry == 0:
        raise NotMapped(f"guest page {guest_page} not mapped")
    return (entry - 1) * PAGE_SIZE


def release_page_table(pool: TokenPool, pt: PageTable, platform: Platform, hart_id: int = 0) -> int:
    """Unmap and return every page, root last. Returns the number of tokens freed."""
    freed = 0
    for gpn in sorted(pt.mappings):
        deallocate(pool, unmap_page(pt, gpn, platform, hart_id), platform, hart_id)
        freed += 1
    root = pt.root._move()
    _record(platform, hart_id, "pt_drop", owner=pt.owner, serial=root.serial)
    deallocate(pool, root, platform, hart_id)
    return freed + 1


@dataclass(frozen=True)
class LedgerRow:
    serial: int
    base: int
    state: str
    owner: str

    def to_json(self) -> dict:
        return {"serial": self.serial, "base": self.base, "state": self.state, "owner": self.owner}


def token_ledger(pool: TokenPool, tables: dict[int, PageTable]) -> list[LedgerRow]:
    """Every token the monitor knows of, with where it currently lives."""
    rows = [LedgerRow(t.serial, t.base, t.state.value, "pool") for t in pool]
    for owner, pt in sorted(tables.items()):
        rows.append(LedgerRow(pt.root.serial, pt.root.base, pt.root.state.value, f"{owner}:root"))
        for gpn, t in sorted(pt.mappings.items()):
            rows.append(LedgerRow(t.serial, t.base, t.state.value, f"{owner}:{gpn}"))
    return sorted(rows, key=lambda r: (r.serial, r.owner))
