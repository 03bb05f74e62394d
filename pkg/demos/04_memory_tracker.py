# The memory tracker
#
# Confidential memory is handed out as page tokens. A token is created once
# per page at boot and then only moves: from the free pool, into a page
# table, back to the pool. Using a token after it has moved raises
# LinearityError, which is how the model enforces single ownership.

from confmon.errors import LinearityError
from confmon.hw import PAGE_SIZE, create_platform
from confmon.tracker import (
    BootCapability,
    allocate,
    deallocate,
    init_tracker,
    map_page,
    page_table_new,
    release_page_table,
    to_allocated,
    token_ledger,
    token_write,
)

LO = 4 * PAGE_SIZE
p = create_platform(16 * PAGE_SIZE, 1, 0)
pool = init_tracker(p, LO, LO + 6 * PAGE_SIZE, BootCapability())
print("tokens created:", pool.total_created)

# Allocate a page, write to it, and hand it to a page table.

page = to_allocated(allocate(pool, p), p)
token_write(page, 0, 0x1234, p)
table = page_table_new(pool, 16, p)
map_page(table, 0, page, p)

# The handle we held is now dead.

try:
    token_write(page, 0, 1, p)
except LinearityError as exc:
    print("stale handle:", exc)

# The ledger lists every token exactly once with its current owner.

for row in token_ledger(pool, {16: table}):
    print(row)

# Releasing the table returns both pages, zeroed.

print("returned", release_page_table(pool, table, p), "tokens")
print("pool pages all zero:", all(p.page_is_zero(t.page) for t in pool))

# Deallocating zeroes too, so no data survives a round trip.

t = to_allocated(allocate(pool, p), p)
token_write(t, 8, 0xFF, p)
deallocate(pool, t, p)
print("pool size", len(pool), "of", pool.total_created)
