# Life of a confidential VM
#
# The hypervisor stages an image in its own memory and asks the monitor to
# promote it. The monitor copies the pages into confidential memory, measures
# them and gives the new CVM an id. From then on the hypervisor can only run,
# answer and terminate it.

from confmon import guest
from confmon.harness.scenario import BootConfig, boot_platform
from confmon.hw import PAGE_SIZE

p, _ = boot_platform(BootConfig(harts=1, mem_pages=48, seed=3))
stage = p.monitor.layout.hypervisor_region[0] // PAGE_SIZE + 1
guest.load_vm_image(p, 0, stage, [b"kernel", b"initrd"])
cvm = guest.promote(p, 0, stage, 2)
print("promoted CVM", cvm, "measurement", p.monitor.domains[cvm].measurement.hex()[:32])

# Running it moves the hart into the CVM at the lowest privilege level.

guest.resume(p, 0, cvm)
guest.cvm_store(p, 0, 0x10, 0x5EC12E7)
print("CVM reads back", hex(guest.cvm_load(p, 0, 0x10)))

# A routed hypercall. The CVM fills many registers, but the hypervisor only
# sees the ones the whitelist declares for console_putchar (r0 and the call
# id in r7). r15 carries the exit reason and r14 the CVM id.

guest.cvm_ecall(p, 0, 16, {0: ord("A"), 3: 0xDEAD, 9: 0xBEEF})
print("hypervisor view:", [hex(r) for r in p.harts[0].gprs])

# The answer goes back through the same filter. console_putchar returns r0
# only, so the hypervisor's other registers never reach the CVM.

guest.resume(p, 0, cvm, {0: 1, 3: 0xBAD})
print("CVM r0, r3 after the answer:", p.harts[0].gprs[0], hex(p.harts[0].gprs[3]))

# Loads from unmapped guest addresses become MMIO requests routed the same way.

guest.cvm_load(p, 0, 0x40_0000)
print("MMIO request seen by the hypervisor: addr", hex(p.harts[0].gprs[0]), "width", p.harts[0].gprs[1])

# Terminating returns every page to the pool, zeroed, before anything else
# can be granted.

pages = [t.page for t in p.monitor.domains[cvm].page_table.tokens()]
guest.terminate(p, 0, cvm)
print("former pages all zero:", all(p.page_is_zero(pg) for pg in pages))
