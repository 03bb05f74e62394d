"""Scenario scripts: boot a platform, play actions, judge the trace.

A script is plain text. Blank lines and ``#`` comments are ignored; an
optional ``boot`` header fixes the platform, and every other line is an
action record::

    boot harts=2 mem_pages=64 seed=7 tracker_pages=12
    action Promote(hart=0, pages=2)
    action StartStopInterruptCvm(hart=0, cvm=16, op=start)
    action ReadProbe(hart=1, pages=all)

Counterexamples found by :func:`run_scenario` and the explorer are written
in the same format, with scheduler-chosen victim steps spelled out, so
replaying one needs no seed.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..boot import BootReport, secure_boot
from ..errors import ScriptError
from ..hw import MUTATIONS, PAGE_SIZE, WORD, Platform, create_platform
from ..invariants import STATE_CHECKS
from ..monitor import WhitelistTable
from ..trace import TraceEvent
from .adversary import ActionKind, ActionOutcome, AdversaryAction, apply_action, running_cvm
from .oracle import Oracle, Verdict

DEFAULT_SM_IMAGE = b"confmon security monitor, reference image\n" * 16
DEFAULT_HV_IMAGE = b"untrusted hypervisor, reference image\n" * 8


@dataclass(frozen=True)
class BootConfig:
    harts: int = 2
    mem_pages: int = 64
    seed: int = 0
    tracker_pages: int | None = None
    shared_pages: int = 4
    mutations: tuple[str, ...] = ()
    faults: tuple[str, ...] = ()  # faults that must be in place before boot

    def to_line(self) -> str:
        parts = [f"harts={self.harts}", f"mem_pages={self.mem_pages}", f"seed={self.seed}"]
        if self.tracker_pages is not None:
            parts.append(f"tracker_pages={self.tracker_pages}")
        if self.shared_pages != 4:
            parts.append(f"shared_pages={self.shared_pages}")
        if self.mutations:
            parts.append("mutations=" + ",".join(self.mutations))
        if self.faults:
            parts.append("faults=" + ",".join(self.faults))
        return "boot " + " ".join(parts)

    @classmethod
    def parse(cls, line: str) -> "BootConfig":
        words = line.split()
        if not words or words[0] != "boot":
            raise ScriptError(f"not a boot header: {line!r}")
        fields: dict = {}
        for word in words[1:]:
            key, sep, raw = word.partition("=")
            if not sep:
                raise ScriptError(f"bad boot option {word!r}")
            if key in ("mutations", "faults"):
                fields[key] = tuple(x for x in raw.split(",") if x)
            elif key in ("harts", "mem_pages", "seed", "tracker_pages", "shared_pages"):
                try:
                    fields[key] = int(raw, 0)
                except ValueError:
                    raise ScriptError(f"boot option {key} needs an integer, got {raw!r}") from None
            else:
                raise ScriptError(f"unknown boot option {key!r}")
        return cls(**fields)


@dataclass(frozen=True)
class Scenario:
    boot: BootConfig = BootConfig()
    actions: tuple[AdversaryAction, ...] = ()

    def dumps(self) -> str:
        return "\n".join([self.boot.to_line(), *(a.to_line() for a in self.actions)]) + "\n"


def parse_scenario(text: str) -> Scenario:
    boot = BootConfig()
    actions = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("boot"):
                if actions:
                    raise ScriptError("the boot header must come before any action")
                boot = BootConfig.parse(line)
            else:
                actions.append(AdversaryAction.parse(line))
        except ScriptError as exc:
            raise ScriptError(f"line {n}: {exc}") from None
    return Scenario(boot, tuple(actions))


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ScriptError(f"cannot read {path}: {exc}") from None
    return parse_scenario(text)


def boot_platform(config: BootConfig = BootConfig(), sm_image: bytes = DEFAULT_SM_IMAGE,
                  hypervisor_image: bytes = DEFAULT_HV_IMAGE,
                  whitelist: WhitelistTable | None = None) -> tuple[Platform, BootReport]:
    from .faults import seeded_violation

    unknown = set(config.mutations) - MUTATIONS
    if unknown:
        raise ScriptError(f"unknown mutation(s): {', '.join(sorted(unknown))}")
    p = create_platform(config.mem_pages * PAGE_SIZE, config.harts, config.seed)
    p.mutations = frozenset(config.mutations)
    for fault in config.faults:
        seeded_violation(p, fault)
    report = secure_boot(p, sm_image, hypervisor_image, tracker_pages=config.tracker_pages,
                         shared_pages=config.shared_pages, whitelist=whitelist)
    return p, report


@dataclass
class ScenarioResult:
    trace: list[TraceEvent]
    verdicts: list[Verdict]
    outcomes: list[ActionOutcome] = field(default_factory=list)
    executed: list[AdversaryAction] = field(default_factory=list)
    skipped: list[tuple[AdversaryAction, str]] = field(default_factory=list)
    boot: BootConfig | None = None
    first_violation_at: int | None = None  # index into ``executed``

    @property
    def ok(self) -> bool:
        return all(v.holds for v in self.verdicts)

    def violated(self) -> list[str]:
        return [v.invariant for v in self.verdicts if not v.holds]

    def counterexample(self) -> Scenario | None:
        if self.first_violation_at is None:
            return None
        return Scenario(self.boot or BootConfig(), tuple(self.executed[:self.first_violation_at + 1]))


def _victim_step(p: Platform, h: int, rng: random.Random) -> AdversaryAction:
    """A benign guest memory access chosen by the scheduler."""
    d = p.monitor.cvm(running_cvm(p, h))
    gpns = sorted(d.page_table.mappings)
    addr = rng.choice(gpns) * PAGE_SIZE + rng.randrange(PAGE_SIZE // WORD) * WORD
    if rng.random() < 0.5:
        return AdversaryAction.make(ActionKind.CVM_STORE, hart=h, addr=addr,
                                    value=rng.getrandbits(32))
    return AdversaryAction.make(ActionKind.CVM_LOAD, hart=h, addr=addr)


def run_scenario(platform: Platform, script, seed: int | None = None, *, strict: bool = True,
                 oracle: Oracle | None = None, boot: BootConfig | None = None) -> ScenarioResult:
    """Play ``script`` (a Scenario or a sequence of actions) on a booted
    platform.

    Every trace event goes through the oracle as it is produced, and the
    snapshot checks run after every action. With a ``seed``, the scheduler
    interleaves victim steps on harts that are running a CVM. With
    ``strict=False``, actions that do not apply in the current state are
    skipped and listed instead of raising ScriptError.
    """
    if platform.monitor is None:
        raise ScriptError("run_scenario needs a booted platform")
    if isinstance(script, Scenario):
        boot = boot or script.boot
        script = script.actions
    oracle = oracle or Oracle().feed_all(platform.trace)
    fed = len(platform.trace)
    oracle.check_state(platform, STATE_CHECKS)
    rng = random.Random(seed) if seed is not None else None
    result = ScenarioResult([], [], boot=boot)

    def step(action: AdversaryAction) -> None:
        nonlocal fed
        try:
            outcome = apply_action(platform, action)
        except ScriptError as exc:
            if strict:
                raise
            result.skipped.append((action, str(exc)))
            return
        finally:
            oracle.feed_all(platform.trace[fed:])
            fed = len(platform.trace)
        result.outcomes.append(outcome)
        result.executed.append(action)
        oracle.check_state(platform, STATE_CHECKS)
        if oracle.violations and result.first_violation_at is None:
            result.first_violation_at = len(result.executed) - 1

    for action in script:
        step(action)
        if rng is not None:
            for h in range(platform.hart_count):
                if running_cvm(platform, h) is not None and rng.random() < 0.5:
                    step(_victim_step(platform, h, rng))

    result.trace = platform.trace.events()
    result.verdicts = oracle.verdicts()
    return result


def replay(scenario: Scenario | str, *, strict: bool = True,
           whitelist: WhitelistTable | None = None) -> ScenarioResult:
    """Boot a fresh platform as the header says and re-run the actions."""
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    p, _ = boot_platform(scenario.boot, whitelist=whitelist)
    return run_scenario(p, scenario, strict=strict)


# A workload touching every monitor path: two CVMs on two harts, memory
# traffic, routed hypercalls and MMIO with answers, sharing, attestation,
# adversarial probes and calls, a short-lived third CVM, an undeclared call
# and finally a timer interrupt.
STANDARD_BOOT = BootConfig(harts=2, mem_pages=64, seed=11, tracker_pages=12)
STANDARD_WORKLOAD = """
action Promote(hart=0, pages=2)
action Promote(hart=1, pages=1)
action StartStopInterruptCvm(hart=0, cvm=16, op=start)
action StartStopInterruptCvm(hart=1, cvm=17, op=start)
action CvmStore(hart=0, addr=8, value=0xabc)
action CvmLoad(hart=0, addr=8)
action CvmCall(hart=0, call=16, r0=0x41, r1=11, r2=12, r3=13, r4=14, r5=15)
action StartStopInterruptCvm(hart=0, cvm=16, op=start, r0=1)
action CvmShare(hart=1, gpn=4)
action CvmAttest(hart=1, nonce=0x1234)
action CvmMmio(hart=1, op=load, addr=0x100000)
action StartStopInterruptCvm(hart=1, cvm=17, op=start, r1=77)
action CvmCall(hart=1, call=18, r0=1, r1=2, r2=3, r9=99)
action MaliciousSharedInput(hart=1, cvm=17, value=0x4141)
action CvmMmio(hart=1, op=store, addr=0x100008, value=5)
action ReadProbe(hart=1, pages=all)
action StartStopInterruptCvm(hart=0, cvm=16, op=interrupt)
action ReadProbe(hart=0, pages=all)
action WriteProbe(hart=0, pages=all)
action DmaProbe(pages=all)
action DmaProbe(pages=all, write=1)
action ImpersonationAttempt(hart=0, cvm=17)
action ArbitraryHypercall(hart=0, call=99, target=17)
action Promote(hart=0, pages=1)
action StartStopInterruptCvm(hart=0, cvm=18, op=stop)
action StartStopInterruptCvm(hart=0, cvm=16, op=start)
action CvmCall(hart=0, call=99)
action InterruptInjection(hart=0, irq=1)
action InterruptInjection(hart=1, irq=1)
"""


def standard_scenario(boot: BootConfig = STANDARD_BOOT) -> Scenario:
    return replace(parse_scenario(STANDARD_WORKLOAD), boot=boot)
