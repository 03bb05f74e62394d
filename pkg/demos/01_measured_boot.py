# Measured boot
#
# A platform comes out of reset with every hart at the highest privilege
# level and the endorsement seed readable. Secure boot partitions memory,
# measures the monitor and hypervisor images, derives the attestation key
# from the seed, locks the seed and only then hands the harts to the
# hypervisor at the middle privilege level.

from dataclasses import asdict

from confmon import verify_init_invariants
from confmon.harness.scenario import BootConfig, boot_platform
from confmon.hw import PAGE_SIZE

platform, report = boot_platform(BootConfig(harts=2, mem_pages=64, seed=11))

# The layout is a row of page-aligned regions. Everything from the monitor
# image up to the end of the tracker range is confidential.

for name, (lo, hi) in asdict(report.layout).items():
    print(f"{name:18} pages {lo // PAGE_SIZE:3} .. {hi // PAGE_SIZE:3}")
print("confidential:", platform.isolation.confidential_regions)

# The boot chain: one digest per stage, in order. The attestation key is a
# function of the seed and this chain, so a different hypervisor image gives
# a different key.

for m in report.measurements:
    print(f"measured {m.subject:10} {m.digest.hex()[:32]}...")
print("attestation key id", report.attestation_key_id)

# The initialisation invariants are re-checked against the live platform.
# An empty set means all of them hold.

print("broken invariants:", verify_init_invariants(platform) or "none")

# Lock ordering is visible in the trace: the seed lock comes before the
# first event anywhere below the highest privilege level.

events = platform.trace.events()
lock = next(i for i, e in enumerate(events) if e.op == "lock_seed")
handoff = next(i for i, e in enumerate(events) if e.op == "return_to")
print(f"seed locked at event {lock}, first hand-off at event {handoff}")

# Tampering with one byte of the monitor image after boot is caught.

platform.poke(platform.monitor.layout.sm_region[0], b"\xff")
print("after tampering:", sorted(verify_init_invariants(platform)))
