from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from confmon.errors import (
    AlreadyInitialized,
    AlreadyMapped,
    LinearityError,
    Misaligned,
    NotMapped,
    OutOfBounds,
    OutOfMemory,
)
from confmon.hw import PAGE_SIZE, WORD, create_platform
from confmon.tracker import (
    BootCapability,
    TokenState,
    allocate,
    deallocate,
    init_tracker,
    map_page,
    page_table_new,
    release_page_table,
    to_allocated,
    token_ledger,
    token_read,
    token_write,
    translate,
    unmap_page,
)
from drivers import tracker_steps

LO = 4 * PAGE_SIZE


def pool_of(pages=4):
    p = create_platform((4 + pages + 1) * PAGE_SIZE, 1, 0)
    return p, init_tracker(p, LO, LO + pages * PAGE_SIZE, BootCapability())


def test_init_creates_one_token_per_page():
    p, pool = pool_of(5)
    assert pool.total_created == len(pool) == 5
    assert [t.base for t in pool] == [LO + i * PAGE_SIZE for i in range(5)]
    assert sum(e.op == "token_create" for e in p.trace) == 5


def test_capability_is_single_use():
    p = create_platform(16 * PAGE_SIZE, 1, 0)
    cap = BootCapability()
    init_tracker(p, LO, LO + PAGE_SIZE, cap)
    with pytest.raises(AlreadyInitialized):
        init_tracker(p, LO, LO + PAGE_SIZE, cap)


@pytest.mark.parametrize("lo,hi", [(LO + 1, LO + PAGE_SIZE), (LO, LO), (LO, LO + 100)])
def test_misaligned_range(lo, hi):
    p = create_platform(16 * PAGE_SIZE, 1, 0)
    with pytest.raises(Misaligned):
        init_tracker(p, lo, hi, BootCapability())


def test_allocate_until_empty():
    p, pool = pool_of(2)
    a, b = allocate(pool, p), allocate(pool, p)
    assert {a.serial, b.serial} == {0, 1}
    with pytest.raises(OutOfMemory):
        allocate(pool, p)


def test_state_transitions_zero_the_page():
    p, pool = pool_of(1)
    tok = to_allocated(allocate(pool, p), p)
    assert tok.state is TokenState.ALLOCATED
    token_write(tok, 8, 0xDEAD, p)
    assert not p.page_is_zero(tok.page)
    deallocate(pool, tok, p)
    assert p.page_is_zero(LO // PAGE_SIZE)
    assert len(pool) == 1


def test_moved_token_is_dead():
    p, pool = pool_of(1)
    raw = allocate(pool, p)
    tok = to_allocated(raw, p)
    assert not raw.live
    with pytest.raises(LinearityError):
        to_allocated(raw, p)
    deallocate(pool, tok, p)
    with pytest.raises(LinearityError):
        token_read(tok, 0, p)


def test_unallocated_token_cannot_be_used():
    p, pool = pool_of(1)
    raw = allocate(pool, p)
    with pytest.raises(LinearityError):
        token_read(raw, 0, p)
    with pytest.raises(LinearityError):
        deallocate(pool, raw, p)


@pytest.mark.parametrize("offset", [-8, PAGE_SIZE - 4, PAGE_SIZE])
def test_out_of_bounds(offset):
    p, pool = pool_of(1)
    tok = to_allocated(allocate(pool, p), p)
    with pytest.raises(OutOfBounds):
        token_write(tok, offset, 1, p)


def test_page_table_map_translate_unmap():
    p, pool = pool_of(4)
    pt = page_table_new(pool, 16, p)
    data = to_allocated(allocate(pool, p), p)
    base = data.base
    map_page(pt, 3, data, p)
    assert not data.live
    assert translate(pt, 3, p) == base
    with pytest.raises(AlreadyMapped):
        map_page(pt, 3, to_allocated(allocate(pool, p), p), p)
    back = unmap_page(pt, 3, p)
    assert back.base == base
    with pytest.raises(NotMapped):
        translate(pt, 3, p)
    with pytest.raises(NotMapped):
        unmap_page(pt, 3, p)


def test_release_returns_everything():
    p, pool = pool_of(4)
    pt = page_table_new(pool, 16, p)
    for gpn in range(2):
        map_page(pt, gpn, to_allocated(allocate(pool, p), p), p)
    assert len(pool) == 1
    assert release_page_table(pool, pt, p) == 3
    assert len(pool) == 4
    assert all(p.page_is_zero(t.page) for t in pool)


def test_ledger_lists_every_token_once():
    p, pool = pool_of(4)
    pt = page_table_new(pool, 16, p)
    map_page(pt, 0, to_allocated(allocate(pool, p), p), p)
    rows = token_ledger(pool, {16: pt})
    assert [r.serial for r in rows] == [0, 1, 2, 3]
    assert {r.owner for r in rows} == {"pool", "16:root", "16:0"}


def test_duplicate_token_mutation_is_caught_by_the_driver():
    run = tracker_steps(50, seed=3, mutations=("duplicate-token",))
    assert any("serials" in v for v in run.violations)


@given(st.integers(0, 2**16))
def test_random_sequences_keep_invariants(seed):
    run = tracker_steps(150, seed)
    assert run.violations == []


@given(st.lists(st.integers(0, PAGE_SIZE // WORD - 1), min_size=1, max_size=20), st.integers(0, 2**64 - 1))
def test_write_read_roundtrip(slots, value):
    p, pool = pool_of(1)
    tok = to_allocated(allocate(pool, p), p)
    for s in slots:
        token_write(tok, s * WORD, value, p)
        assert token_read(tok, s * WORD, p) == value
