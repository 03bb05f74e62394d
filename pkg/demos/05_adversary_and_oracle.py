# Adversaries and the invariant oracle
#
# Scenarios are plain text: a boot header and one action per line. The
# untrusted side can issue arbitrary hypercalls, inject interrupts, probe
# memory, use DMA, and try to impersonate a CVM. Every trace event goes
# through an oracle that judges all the invariants.

from confmon.harness.faults import CATALOG, self_test
from confmon.harness.scenario import BootConfig, Scenario, parse_scenario, replay, standard_scenario

result = replay(standard_scenario())
print(f"{len(result.executed)} actions, {len(result.trace)} events, ok={result.ok}")
for outcome in result.outcomes:
    if outcome.action.kind.value.endswith("Probe"):
        print(" ", outcome.action.to_line(), "->", outcome.result)

# A build where routed exits show the hypervisor every register. The oracle
# flags the leak, and the run yields the shortest failing prefix as a new
# scenario.

leaky = Scenario(BootConfig(harts=2, mem_pages=64, seed=11, tracker_pages=12,
                            mutations=("leaky-view",)), standard_scenario().actions)
bad = replay(leaky)
print("violated:", bad.violated())
cx = bad.counterexample()
print(cx.dumps())

# The counterexample replays on its own.

print("replayed:", replay(parse_scenario(cx.dumps())).violated())

# The oracle is tested by injecting known faults. Each one must trip exactly
# the invariant it targets.

for fault_id in ("hv-reads-sm", "duplicate-token", "key-leak", "skip-zeroize"):
    print(f"{fault_id:18} -> {sorted(self_test(fault_id))}  (target {CATALOG[fault_id].target})")
