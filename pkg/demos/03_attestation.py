# Remote attestation
#
# A CVM asks for a report binding its measurement to a caller-chosen nonce
# and to the boot chain. The report is signed with the platform's Ed25519
# attestation key, which never leaves the monitor's control region.

from dataclasses import replace

from confmon import guest, verify_report
from confmon.harness.scenario import BootConfig, boot_platform
from confmon.hw import PAGE_SIZE


def attested_platform(seed: int, nonce: bytes):
    p, boot = boot_platform(BootConfig(harts=1, mem_pages=48, seed=seed))
    stage = p.monitor.layout.hypervisor_region[0] // PAGE_SIZE + 1
    guest.load_vm_image(p, 0, stage, [b"service"])
    cvm = guest.promote(p, 0, stage, 1)
    guest.resume(p, 0, cvm)
    return boot, guest.cvm_attest(p, 0, nonce)


nonce = bytes(range(32))
boot, report = attested_platform(1, nonce)
print(report.to_json())

# A verifier that trusts the platform's public key checks the report.

print("verifies:", verify_report(boot.public_key, report))

# Changing any single field breaks the signature.

for field, value in [("nonce", bytes(32)), ("measurement", bytes(32)),
                     ("boot_chain", report.boot_chain[:1])]:
    print(f"{field} changed -> verifies:", verify_report(boot.public_key, replace(report, **{field: value})))

# A second platform with a different endorsement seed has a different key.
# Its reports do not verify under the first platform's key, and vice versa.

other_boot, other = attested_platform(2, nonce)
print("cross verification:", verify_report(boot.public_key, other),
      verify_report(other_boot.public_key, report))
