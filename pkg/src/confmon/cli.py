"""Command-line front end.

Exit codes are the same for every subcommand: 0 when all invariants hold,
1 when one is violated, 2 for unreadable or malformed input, 3 when the
explorer runs out of its state budget.

Traces go to ``--trace`` when given, otherwise into the directory named by
``CONFMON_TRACE_DIR`` when that is set, otherwise nowhere.
"""
from __future__ import annotations

import argparse
import os
import secrets
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, ConfmonError, ScriptError, StateSpaceBudgetExceeded
from .harness.explore import DEFAULT_BUDGET, ExploreConfig, bounded_explore
from .harness.faults import CATALOG, self_test
from .harness.oracle import Oracle, Verdict
from .harness.scenario import Scenario, boot_platform, load_scenario, run_scenario, standard_scenario
from .hw import MUTATIONS
from .invariants import ALL_INVARIANTS
from .monitor import WhitelistTable
from .trace import dumps, loads

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_INPUT = 2
EXIT_BUDGET = 3
TRACE_DIR_ENV = "CONFMON_TRACE_DIR"


def _err(message: str) -> None:
    print(f"confmon: {message}", file=sys.stderr)


def _print_verdicts(verdicts: list[Verdict], *, quiet_passes: bool = False) -> None:
    for v in verdicts:
        if v.holds:
            if not quiet_passes:
                print(f"  PASS  {v.invariant}")
        else:
            at = f" (trace seq {v.seq})" if v.seq is not None else ""
            print(f"  FAIL  {v.invariant}{at}: {v.message}")


def _emit_counterexample(scenario: Scenario, path: str | None) -> None:
    text = scenario.dumps()
    print("counterexample:")
    for line in text.splitlines():
        print(f"  {line}")
    if path:
        Path(path).write_text(text)
        print(f"counterexample written to {path}")


def _trace_path(explicit: str | None, stem: str, seed: int) -> Path | None:
    if explicit:
        return Path(explicit)
    directory = os.environ.get(TRACE_DIR_ENV)
    if directory:
        return Path(directory) / f"{stem}-seed{seed}.trace"
    return None


def _load_whitelist(path: str | None) -> WhitelistTable | None:
    return WhitelistTable.load(path) if path else None


# ---------------------------------------------------------------- subcommands

def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
        whitelist = _load_whitelist(args.whitelist)
        platform, _ = boot_platform(scenario.boot, whitelist=whitelist)
    except (ScriptError, ConfigError, OSError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    seed = args.seed
    if seed is None:
        seed = secrets.randbits(32)
        print(f"seed {seed} (pass --seed {seed} to repeat this run)")
    try:
        result = run_scenario(platform, scenario, seed=seed)
    except ScriptError as exc:
        _err(f"scenario does not apply: {exc}")
        return EXIT_INPUT
    path = _trace_path(args.trace, Path(args.scenario).stem, seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(result.trace))
        print(f"trace ({len(result.trace)} events) written to {path}")
    print(f"{len(result.executed)} actions, {len(result.trace)} trace events")
    _print_verdicts(result.verdicts, quiet_passes=not args.verbose)
    if result.ok:
        print("all invariants hold")
        return EXIT_OK
    _emit_counterexample(result.counterexample(), args.counterexample)
    return EXIT_VIOLATION


def cmd_explore(args: argparse.Namespace) -> int:
    cfg = ExploreConfig(harts=args.harts, cvms=args.cvms, pages=args.pages, depth=args.depth,
                        mutations=tuple(args.mutation), seed=args.seed, max_states=args.max_states)
    invariants = tuple(args.invariant) if args.invariant else ALL_INVARIANTS
    unknown = set(invariants) - set(ALL_INVARIANTS)
    if unknown:
        _err(f"unknown invariant(s): {', '.join(sorted(unknown))}")
        return EXIT_INPUT
    try:
        result = bounded_explore(cfg, invariants, workers=args.workers)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except StateSpaceBudgetExceeded as exc:
        _err(f"state budget exceeded after {exc.states_visited} states")
        print(f"states visited: {exc.states_visited}")
        return EXIT_BUDGET
    print(f"states visited: {result.states_visited}")
    print(f"transitions: {result.transitions}")
    print(f"depth reached: {result.depth_reached} of {cfg.depth}")
    _print_verdicts(result.verdicts)
    if result.passed:
        print("PASS")
        return EXIT_OK
    print("FAIL")
    _emit_counterexample(result.counterexample, args.counterexample)
    return EXIT_VIOLATION


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.file)
        if args.without_mutations:
            scenario = replace(scenario, boot=replace(scenario.boot, mutations=()))
        platform, _ = boot_platform(scenario.boot, whitelist=_load_whitelist(args.whitelist))
        result = run_scenario(platform, scenario)
    except (ScriptError, ConfigError, OSError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    print(f"replayed {len(result.executed)} actions")
    _print_verdicts(result.verdicts, quiet_passes=True)
    if result.ok:
        print("all invariants hold")
        return EXIT_OK
    return EXIT_VIOLATION


def cmd_check(args: argparse.Namespace) -> int:
    try:
        events = loads(Path(args.trace).read_text())
    except (ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    oracle = Oracle(keep_events=True).feed_all(events)
    print(f"checked {len(events)} trace events")
    verdicts = oracle.verdicts()
    _print_verdicts(verdicts, quiet_passes=not args.verbose)
    if all(v.holds for v in verdicts):
        print("all trace invariants hold")
        return EXIT_OK
    return EXIT_VIOLATION


def cmd_selftest(args: argparse.Namespace) -> int:
    ids = args.fault or sorted(CATALOG)
    unknown = set(ids) - set(CATALOG)
    if unknown:
        _err(f"unknown fault(s): {', '.join(sorted(unknown))}")
        return EXIT_INPUT
    failures = 0
    baseline = self_test(None)
    print(f"{'ok' if not baseline else 'BAD'}  (no fault) -> {sorted(baseline) or 'nothing'}")
    failures += bool(baseline)
    for fault_id in ids:
        tripped = self_test(fault_id)
        want = CATALOG[fault_id].target
        good = tripped == {want}
        failures += not good
        print(f"{'ok' if good else 'BAD'}  {fault_id} -> {', '.join(sorted(tripped)) or 'nothing'}")
    return EXIT_OK if failures == 0 else EXIT_VIOLATION


def cmd_demo(args: argparse.Namespace) -> int:
    print("Booting two harts, running the reference workload under the oracle.")
    scenario = standard_scenario()
    platform, report = boot_platform(scenario.boot)
    print(f"  monitor measured as {report.measurements[0].digest[:16]}...")
    print(f"  attestation key {report.attestation_key_id}")
    result = run_scenario(platform, scenario, seed=args.seed)
    print(f"  {len(result.executed)} actions, {len(result.trace)} trace events, "
          f"violations: {', '.join(result.violated()) or 'none'}")

    print("Exploring every interleaving for one hart, one VM, four pages, depth 8.")
    explored = bounded_explore(ExploreConfig(harts=1, cvms=1, pages=4, depth=8))
    print(f"  {explored.states_visited} states, {'PASS' if explored.passed else 'FAIL'}")

    print("Same search with the deallocation zeroing removed.")
    broken = bounded_explore(ExploreConfig(harts=1, cvms=1, pages=4, depth=8,
                                           mutations=("skip-zeroize",)))
    print(f"  violated: {', '.join(broken.violated())}")
    if broken.counterexample is not None:
        _emit_counterexample(broken.counterexample, None)
    return EXIT_OK if result.ok and explored.passed and not broken.passed else EXIT_VIOLATION


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confmon", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="boot a platform and play a scenario script")
    run.add_argument("scenario", help="scenario script")
    run.add_argument("--seed", type=int, help="scheduler seed (random and printed if omitted)")
    run.add_argument("--trace", help=f"write the trace here (default: ${TRACE_DIR_ENV})")
    run.add_argument("--whitelist", help="whitelist table JSON replacing the built-in one")
    run.add_argument("--counterexample", help="also write a counterexample script here")
    run.add_argument("-v", "--verbose", action="store_true", help="list passing invariants too")
    run.set_defaults(func=cmd_run)

    exp = sub.add_parser("explore", help="exhaustive bounded exploration")
    exp.add_argument("--harts", type=int, default=1)
    exp.add_argument("--cvms", type=int, default=1)
    exp.add_argument("--pages", type=int, default=4, help="tracker pages")
    exp.add_argument("--depth", type=int, default=12)
    exp.add_argument("--workers", type=int, default=1, help="worker processes")
    exp.add_argument("--mutation", action="append", default=[], choices=sorted(MUTATIONS),
                     help="build the model with this defect (repeatable)")
    exp.add_argument("--invariant", action="append", default=[],
                     help="check only this invariant (repeatable; default all)")
    exp.add_argument("--seed", type=int, default=0, help="platform seed")
    exp.add_argument("--max-states", type=int, default=DEFAULT_BUDGET)
    exp.add_argument("--counterexample", help="write the counterexample script here")
    exp.set_defaults(func=cmd_explore)

    rep = sub.add_parser("replay", help="re-run a scenario or counterexample script")
    rep.add_argument("file")
    rep.add_argument("--without-mutations", action="store_true",
                     help="replay on the fixed build, ignoring the header's mutations")
    rep.add_argument("--whitelist", help="whitelist table JSON replacing the built-in one")
    rep.set_defaults(func=cmd_replay)

    chk = sub.add_parser("check", help="judge a saved trace with the trace oracle")
    chk.add_argument("trace")
    chk.add_argument("-v", "--verbose", action="store_true", help="list passing invariants too")
    chk.set_defaults(func=cmd_check)

    st = sub.add_parser("selftest", help="inject catalogued faults and confirm the oracle trips")
    st.add_argument("--fault", action="append", help="fault id (repeatable; default all)")
    st.set_defaults(func=cmd_selftest)

    demo = sub.add_parser("demo", help="short tour of boot, oracle and explorer")
    demo.add_argument("--seed", type=int, default=1)
    demo.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfmonError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
