"""The eight acceptance criteria, each at its stated size and tolerance.

Every test records a one-line verdict. pytest prints them in the terminal
summary, and running this file directly prints them as it goes.
"""
from __future__ import annotations

import random
import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from confmon.attestation import verify_report  # noqa: E402
from confmon.boot import verify_init_invariants  # noqa: E402
from confmon.harness.adversary import ActionKind, AdversaryAction, apply_action  # noqa: E402
from confmon.harness.explore import ExploreConfig, bounded_explore  # noqa: E402
from confmon.harness.faults import CATALOG, self_test  # noqa: E402
from confmon.harness.scenario import (  # noqa: E402
    STANDARD_BOOT,
    BootConfig,
    boot_platform,
    run_scenario,
    standard_scenario,
)
from confmon.invariants import ALL_INVARIANTS, MT_EXCLUSIVE_OWNERSHIP  # noqa: E402
from drivers import (  # noqa: E402
    first_sub_highest,
    mutate_report,
    probe_sweeps,
    random_boot_config,
    routing_events,
    tracker_steps,
)

RESULTS: dict[int, tuple[bool, str]] = {}
MT = tuple(i for i in ALL_INVARIANTS if i.startswith("mt."))


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    if __name__ == "__main__":
        print(summary_line(n), flush=True)


def summary_line(n: int) -> str:
    ok, detail = RESULTS[n]
    return f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def test_1_token_uniqueness_exhaustive():
    cfg = ExploreConfig(harts=2, cvms=2, pages=8, depth=14)
    clean = bounded_explore(cfg, MT)
    bad = bounded_explore(replace(cfg, mutations=("duplicate-token",)), MT)
    cx = bad.counterexamples.get(MT_EXCLUSIVE_OWNERSHIP)
    ok = clean.passed and MT_EXCLUSIVE_OWNERSHIP in bad.violated() and cx is not None \
        and len(cx.actions) <= cfg.depth
    record(1, ok, f"clean: {clean.states_visited} states to depth {cfg.depth} "
                  f"(saturated at {clean.depth_reached}), PASS={clean.passed}; duplicate-token: "
                  f"FAIL with {len(cx.actions) if cx else '-'}-step counterexample")
    assert clean.passed, clean.violated()
    assert MT_EXCLUSIVE_OWNERSHIP in bad.violated()
    assert cx is not None and len(cx.actions) <= cfg.depth


def test_2_tracker_invariants_randomised():
    run = tracker_steps(100_000, seed=2024)
    record(2, not run.violations, f"{run.steps} steps, {len(run.violations)} violations")
    assert run.steps == 100_000
    assert run.violations == []


def test_3_initialisation_randomised():
    rng = random.Random(77)
    bad = []
    for i in range(100):
        cfg, sm, hv = random_boot_config(rng)
        p, _ = boot_platform(cfg, sm, hv)
        events = p.trace.events()
        lock = next(j for j, e in enumerate(events) if e.op == "lock_seed")
        broken = verify_init_invariants(p)
        first = first_sub_highest(events)
        if broken or first is None or lock >= first:
            bad.append((i, sorted(broken), lock, first))
    record(3, not bad, f"100 random boots, {len(bad)} with a broken invariant or late seed lock")
    assert bad == []


def test_4_routed_exit_sanitisation():
    run = routing_events(10_000, seed=4)
    record(4, run.events == 10_000 and not run.mismatches,
           f"{run.events} crossings {dict(sorted(run.kinds.items()))}, {len(run.mismatches)} mismatches")
    assert run.events == 10_000
    assert run.mismatches == []


def test_5_confidentiality_sweeps():
    attempts = denied = freed = 0
    leaks, dirty, flagged = [], [], set()
    for seed in range(20):
        run = probe_sweeps(seed)
        attempts += run.attempts
        denied += run.denied
        freed += run.freed_pages
        leaks += run.leaks
        dirty += run.dirty_after_terminate
        flagged |= run.oracle_violations
    ok = attempts > 0 and denied == attempts and not dirty and not flagged
    record(5, ok, f"{denied}/{attempts} probes denied, {freed} freed pages checked, "
                  f"{len(dirty)} non-zero")
    assert leaks == [] and denied == attempts
    assert dirty == []
    assert flagged == set()


def _attested(seed: int, nonces: list[int]):
    p, boot = boot_platform(BootConfig(harts=1, mem_pages=40, seed=seed, tracker_pages=8))
    apply_action(p, AdversaryAction.make(ActionKind.PROMOTE, hart=0, pages=2))
    apply_action(p, AdversaryAction.make(ActionKind.START_STOP_INTERRUPT_CVM, hart=0, cvm=16, op="start"))
    reports = []
    for nonce in nonces:
        apply_action(p, AdversaryAction.make(ActionKind.CVM_ATTEST, hart=0, nonce=nonce))
        reports.append(p.monitor.domains[16].last_report)
    return boot.public_key, reports


def test_6_attestation():
    rng = random.Random(6)
    key, honest = _attested(1, [rng.getrandbits(256) for _ in range(10)])
    honest_ok = all(verify_report(key, r) for r in honest)
    accepts = 0
    for _ in range(1000):
        _, mutant = mutate_report(rng.choice(honest), rng)
        accepts += verify_report(key, mutant)
    cross = 0
    for a in range(8):
        pk_a, (rep_a,) = _attested(100 + a, [a])
        for b in range(8):
            if a != b:
                pk_b, _ = _attested(100 + b, [b])
                cross += verify_report(pk_b, rep_a)
    ok = honest_ok and accepts == 0 and cross == 0
    record(6, ok, f"{len(honest)} honest reports verify={honest_ok}, 1000 mutants with {accepts} accepts, "
                  f"{cross} cross-seed accepts in 56 pairs")
    assert honest_ok
    assert accepts == 0
    assert cross == 0


def test_7_oracle_self_test():
    families = {f.target.split(".")[0] for f in CATALOG.values()}
    wrong = {}
    baseline = self_test(None)
    for fault_id, fault in sorted(CATALOG.items()):
        tripped = self_test(fault_id)
        if tripped != {fault.target}:
            wrong[fault_id] = sorted(tripped)
    ok = not baseline and not wrong and len(CATALOG) >= 8 and families >= {"hw", "init", "fsm", "mt", "policy",
                                                                         "attest"}
    record(7, ok, f"{len(CATALOG) - len(wrong)}/{len(CATALOG)} faults trip exactly their target, "
                  f"{len(families)} families, clean run flags {sorted(baseline) or 'nothing'}")
    assert baseline == set()
    assert wrong == {}
    assert len(CATALOG) >= 8 and families >= {"hw", "init", "fsm", "mt", "policy", "attest"}


def _run_once(boot: BootConfig, seed: int) -> tuple[str, str]:
    p, report = boot_platform(boot)
    result = run_scenario(p, replace(standard_scenario(), boot=boot), seed=seed)
    return "".join(e.to_line() + "\n" for e in result.trace), report.dumps()


def test_8_determinism():
    configs = [(STANDARD_BOOT, 1), (replace(STANDARD_BOOT, seed=99), 7),
               (replace(STANDARD_BOOT, mutations=("leaky-view",)), 3)]
    diffs = []
    for boot, seed in configs:
        (t1, r1), (t2, r2) = _run_once(boot, seed), _run_once(boot, seed)
        if t1.encode() != t2.encode() or r1.encode() != r2.encode():
            diffs.append(boot.to_line())
    record(8, not diffs, f"{len(configs)} configurations run twice, {len(diffs)} differ")
    assert diffs == []


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
