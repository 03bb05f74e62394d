"""Bounded exhaustive exploration.

Starting from a freshly booted platform, the explorer applies every enabled
action on every hart, in every order, up to a depth bound. States are
deduplicated on a canonical key covering memory, isolation config, interrupt
routes, hart registers, the monitor's domain table and token ledger, and the
oracle's own bookkeeping, so interleavings that meet again are expanded once.

When only memory-tracker invariants are asked for, the key shrinks to their
cone of influence (token ledger, domain table, hart occupancy), which is what
makes the two-hart, two-VM configuration finish at depth 14.

The search is breadth-first. That keeps the first counterexample for each
invariant as short as possible, and makes the number of states visited a
function of the configuration alone.
"""
from __future__ import annotations

import copy
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from ..errors import ConfigError, ScriptError, StateSpaceBudgetExceeded
from ..hw import FIRST_GUEST, IRQ_TIMER, MUTATIONS, PAGE_SIZE, Platform
from ..invariants import ALL_INVARIANTS, STATE_CHECKS
from ..monitor import Layout
from .adversary import ActionKind, AdversaryAction, apply_action, live_cvms, running_cvm, runs_hypervisor
from .oracle import Oracle, Verdict
from .scenario import DEFAULT_HV_IMAGE, DEFAULT_SM_IMAGE, BootConfig, Scenario, boot_platform, replay

MAX_HARTS = 2
MAX_CVMS = 2
MAX_PAGES = 8
DEFAULT_BUDGET = 2_000_000
SHARED_PAGES = 2
UNDECLARED_CALL = 99
ROUTED_CALL = 18  # block_request: three argument registers, two results
LEDGER_FAMILY = "mt."


@dataclass(frozen=True)
class ExploreConfig:
    harts: int = 1
    cvms: int = 1
    pages: int = 4  # confidential pages managed by the tracker
    depth: int = 12
    mutations: tuple[str, ...] = ()
    seed: int = 0
    max_states: int = DEFAULT_BUDGET

    def validate(self) -> None:
        if not 1 <= self.harts <= MAX_HARTS:
            raise ConfigError(f"harts must be 1..{MAX_HARTS}")
        if not 0 <= self.cvms <= MAX_CVMS:
            raise ConfigError(f"cvms must be 0..{MAX_CVMS}")
        if not 1 <= self.pages <= MAX_PAGES:
            raise ConfigError(f"pages must be 1..{MAX_PAGES}")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        unknown = set(self.mutations) - MUTATIONS
        if unknown:
            raise ConfigError(f"unknown mutation(s): {', '.join(sorted(unknown))}")

    def boot_config(self) -> BootConfig:
        sm_pages = -(-len(DEFAULT_SM_IMAGE) // PAGE_SIZE)
        hv_pages = 1 + 2  # hypervisor image, plus room to stage a one-page VM image
        total = 1 + sm_pages + Layout.control_pages(self.harts) + self.pages + SHARED_PAGES + hv_pages
        assert len(DEFAULT_HV_IMAGE) <= PAGE_SIZE
        return BootConfig(harts=self.harts, mem_pages=total, seed=self.seed,
                          tracker_pages=self.pages, shared_pages=SHARED_PAGES,
                          mutations=tuple(sorted(self.mutations)))


@dataclass
class ExploreResult:
    config: ExploreConfig
    states_visited: int
    transitions: int
    depth_reached: int
    verdicts: list[Verdict]
    counterexamples: dict[str, Scenario] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v.holds for v in self.verdicts)

    def violated(self) -> list[str]:
        return [v.invariant for v in self.verdicts if not v.holds]

    @property
    def counterexample(self) -> Scenario | None:
        """The shortest counterexample found (ties broken by invariant order)."""
        if not self.counterexamples:
            return None
        return min(self.counterexamples.values(), key=lambda s: len(s.actions))


def enabled_actions(p: Platform, cfg: ExploreConfig) -> list[AdversaryAction]:
    """Every action the explorer tries from this state, in a fixed order."""
    sm = p.monitor
    make = AdversaryAction.make
    out: list[AdversaryAction] = []
    live = live_cvms(p)
    for h in range(p.hart_count):
        if runs_hypervisor(p, h):
            if sm.next_domain - FIRST_GUEST < cfg.cvms:
                out.append(make(ActionKind.PROMOTE, hart=h, pages=1))
            for c in live:
                d = sm.domains[c]
                if d.busy_on is None:
                    out.append(make(ActionKind.START_STOP_INTERRUPT_CVM, hart=h, cvm=c, op="start",
                                    r0=7, r1=8))
                    if d.shared:
                        out.append(make(ActionKind.MALICIOUS_SHARED_INPUT, hart=h, cvm=c, value=0x41))
                out.append(make(ActionKind.START_STOP_INTERRUPT_CVM, hart=h, cvm=c, op="stop"))
            out.append(make(ActionKind.READ_PROBE, hart=h, pages="all"))
            out.append(make(ActionKind.WRITE_PROBE, hart=h, pages="all"))
            out.append(make(ActionKind.ARBITRARY_HYPERCALL, hart=h, call=UNDECLARED_CALL))
            if live:
                out.append(make(ActionKind.IMPERSONATION_ATTEMPT, hart=h, cvm=live[0]))
        elif (c := running_cvm(p, h)) is not None:
            d = sm.domains[c]
            out.append(make(ActionKind.CVM_STORE, hart=h, addr=0, value=c))
            out.append(make(ActionKind.CVM_CALL, hart=h, call=ROUTED_CALL, r0=1, r1=2, r2=3, r3=4))
            out.append(make(ActionKind.CVM_MMIO, hart=h, op="load", addr=0x100000))
            if 1 not in d.shared:
                out.append(make(ActionKind.CVM_SHARE, hart=h, gpn=1))
            out.append(make(ActionKind.CVM_ATTEST, hart=h, nonce=1))
            out.append(make(ActionKind.CVM_CALL, hart=h, call=UNDECLARED_CALL))
            out.append(make(ActionKind.INTERRUPT_INJECTION, hart=h, irq=IRQ_TIMER))
            out.append(make(ActionKind.CVM_EXIT, hart=h))
            for other in live:
                if other != c:
                    out.append(make(ActionKind.IMPERSONATION_ATTEMPT, hart=h, cvm=other))
    out.append(make(ActionKind.DMA_PROBE, pages="all"))
    return out


@dataclass
class _Node:
    platform: Platform
    oracle: Oracle
    path: tuple[AdversaryAction, ...]


def ledger_only(invariants) -> bool:
    """True when at least one invariant is requested and all of them are
    memory-tracker ones."""
    names = tuple(invariants)
    return bool(names) and all(name.startswith(LEDGER_FAMILY) for name in names)


def _state_key(node: _Node, ledger: bool = False) -> tuple:
    p = node.platform
    if ledger:
        # Cone of influence of the tracker invariants: the token ledger, the
        # domain table and who runs where. Memory contents and register
        # values never decide a tracker operation, so states differing only
        # there are merged.
        o = node.oracle
        harts = tuple((h.privilege, h.domain, h.halted, h.interrupts_enabled) for h in p.harts)
        return (p.monitor.state_key(), harts, p.isolation, tuple(sorted(o.token_where.items())),
                tuple(sorted(o.violations)))
    return (p.state_key(), p.monitor.state_key(), node.oracle.state_key())


def _step(node: _Node, action: AdversaryAction, checks=STATE_CHECKS) -> _Node | None:
    p = node.platform.clone()
    oracle = copy.deepcopy(node.oracle)
    try:
        apply_action(p, action)
    except ScriptError:
        return None
    oracle.feed_all(p.trace.drain())
    oracle.check_state(p, checks)
    return _Node(p, oracle, node.path + (action,))


def _checks(invariants) -> dict:
    if ledger_only(invariants):
        return {k: f for k, f in STATE_CHECKS.items() if k in invariants}
    return STATE_CHECKS


def _expand(args) -> list[tuple[_Node, tuple]]:
    node, cfg, invariants = args
    ledger, checks = ledger_only(invariants), _checks(invariants)
    children = []
    for action in enabled_actions(node.platform, cfg):
        child = _step(node, action, checks)
        if child is not None:
            children.append((child, _state_key(child, ledger)))
    return children


def _root(cfg: ExploreConfig) -> tuple[_Node, BootConfig]:
    boot = cfg.boot_config()
    p, _ = boot_platform(boot)
    oracle = Oracle(keep_events=False).feed_all(p.trace.drain())
    oracle.check_state(p, STATE_CHECKS)
    return _Node(p, oracle, ()), boot


def bounded_explore(cfg: ExploreConfig, invariants=ALL_INVARIANTS, *, workers: int = 1,
                    stop_at_first: bool = True) -> ExploreResult:
    """Enumerate every interleaving of enabled actions up to ``cfg.depth``.

    States whose trace or snapshot violates an invariant are not expanded;
    the path that reached them becomes that invariant's counterexample. With
    ``stop_at_first`` the search ends after the first depth level that
    produced a violation, so every counterexample reported is minimal.
    """
    cfg.validate()
    root, boot = _root(cfg)
    invariants = tuple(invariants)
    wanted = set(invariants)
    ledger = ledger_only(invariants)
    seen = {_state_key(root, ledger)}
    found: dict[str, tuple[AdversaryAction, ...]] = {}
    transitions = 0
    depth_reached = 0
    for name in root.oracle.violated() & wanted:
        found[name] = ()
    frontier = [] if found else [root]
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for depth in range(1, cfg.depth + 1):
            if not frontier:
                break
            depth_reached = depth
            if pool is not None:
                batches = pool.map(_expand, [(n, cfg, invariants) for n in frontier], chunksize=16)
            else:
                batches = map(_expand, [(n, cfg, invariants) for n in frontier])
            nxt = []
            for parent, children in zip(frontier, batches):
                for child, key in children:
                    transitions += 1
                    if key in seen:
                        continue
                    seen.add(key)
                    if len(seen) > cfg.max_states:
                        raise StateSpaceBudgetExceeded(len(seen))
                    new = (child.oracle.violated() - parent.oracle.violated()) & wanted
                    for name in sorted(new):
                        found.setdefault(name, child.path)
                    if child.oracle.violated() & wanted:
                        continue
                    nxt.append(child)
            frontier = nxt
            if found and stop_at_first:
                break
    finally:
        if pool is not None:
            pool.shutdown()

    counterexamples = {name: Scenario(boot, path) for name, path in found.items()}
    verdicts = []
    for name in invariants:
        if name not in found:
            verdicts.append(Verdict(name, True))
            continue
        run = replay(counterexamples[name])
        v = next(v for v in run.verdicts if v.invariant == name)
        verdicts.append(Verdict(name, False, v.counterexample, v.message, v.seq))
    return ExploreResult(cfg, len(seen), transitions, depth_reached, verdicts, counterexamples)


def random_walks(cfg: ExploreConfig, walks: int, seed: int = 0) -> dict[str, Scenario]:
    """Random schedules over the explorer's action set, each ``cfg.depth``
    steps long. Returns the first counterexample seen for each invariant."""
    cfg.validate()
    rng = random.Random(seed)
    root, boot = _root(cfg)
    found: dict[str, Scenario] = {}
    for _ in range(walks):
        node = root
        for _ in range(cfg.depth):
            actions = enabled_actions(node.platform, cfg)
            child = _step(node, rng.choice(actions))
            if child is None:
                continue
            for name in sorted(child.oracle.violated() - node.oracle.violated()):
                found.setdefault(name, Scenario(boot, child.path))
            node = child
            if node.oracle.violated():
                break
    return found
