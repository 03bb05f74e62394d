from __future__ import annotations

import pytest

from confmon.errors import ConfigError, StateSpaceBudgetExceeded
from confmon.harness.explore import (
    ExploreConfig,
    bounded_explore,
    enabled_actions,
    ledger_only,
    random_walks,
)
from confmon.harness.scenario import boot_platform, replay
from confmon.invariants import ALL_INVARIANTS

MT = tuple(i for i in ALL_INVARIANTS if i.startswith("mt."))


def test_depth_zero_is_the_boot_state():
    r = bounded_explore(ExploreConfig(depth=0))
    assert (r.states_visited, r.transitions, r.depth_reached) == (1, 0, 0)
    assert r.passed


def test_small_space_passes_everything():
    r = bounded_explore(ExploreConfig(1, 1, 4, 6))
    assert r.passed, r.violated()
    assert r.states_visited > 50 and r.depth_reached == 6


def test_exploration_is_deterministic():
    a = bounded_explore(ExploreConfig(1, 1, 4, 4))
    b = bounded_explore(ExploreConfig(1, 1, 4, 4))
    assert (a.states_visited, a.transitions) == (b.states_visited, b.transitions)


def test_mutation_gives_minimal_replayable_counterexample():
    r = bounded_explore(ExploreConfig(1, 1, 4, 8, mutations=("skip-zeroize",)))
    assert r.violated() == ["policy.sanitization"]
    cx = r.counterexample
    assert len(cx.actions) <= 8
    assert "policy.sanitization" in replay(cx).violated()
    # one step shorter is clean
    shorter = type(cx)(cx.boot, cx.actions[:-1])
    assert "policy.sanitization" not in replay(shorter).violated()


def test_budget():
    with pytest.raises(StateSpaceBudgetExceeded):
        bounded_explore(ExploreConfig(1, 1, 4, 8, max_states=20))


@pytest.mark.parametrize("cfg", [ExploreConfig(harts=3), ExploreConfig(cvms=3),
                                 ExploreConfig(pages=0), ExploreConfig(depth=-1),
                                 ExploreConfig(mutations=("bogus",))])
def test_bad_configs(cfg):
    with pytest.raises(ConfigError):
        bounded_explore(cfg)


def test_ledger_mode_selection():
    assert ledger_only(MT)
    assert not ledger_only(ALL_INVARIANTS)
    assert not ledger_only(())


def test_ledger_mode_finds_tracker_bugs():
    r = bounded_explore(ExploreConfig(1, 2, 4, 10, mutations=("duplicate-token",)), MT)
    assert "mt.exclusive-ownership" in r.violated()
    assert "mt.exclusive-ownership" in replay(r.counterexamples["mt.exclusive-ownership"]).violated()


def test_enabled_actions_are_ordered_and_nonempty():
    cfg = ExploreConfig(2, 2, 8, 3)
    p, _ = boot_platform(cfg.boot_config())
    acts = enabled_actions(p, cfg)
    assert acts and acts == enabled_actions(p, cfg)


def test_random_walks_agree_with_search():
    cfg = ExploreConfig(1, 1, 4, 8, mutations=("skip-zeroize",))
    found = random_walks(cfg, 40, seed=1)
    assert set(found) == {"policy.sanitization"}
    assert random_walks(ExploreConfig(1, 1, 4, 8), 20, seed=1) == {}


def _projected_reach(cfg: ExploreConfig, merge_on_projection: bool) -> set:
    """Tracker-relevant projections of every state within ``cfg.depth``,
    searching either over full states or over the projections themselves."""
    from confmon.harness.explore import _root, _state_key, _step

    root, _ = _root(cfg)
    seen = {_state_key(root, merge_on_projection)}
    reach = {_state_key(root, True)[:-1]}
    frontier = [root]
    for _ in range(cfg.depth):
        nxt = []
        for node in frontier:
            for action in enabled_actions(node.platform, cfg):
                child = _step(node, action)
                if child is None:
                    continue
                key = _state_key(child, merge_on_projection)
                if key not in seen:
                    seen.add(key)
                    reach.add(_state_key(child, True)[:-1])
                    nxt.append(child)
        frontier = nxt
    return reach


def test_projected_search_reaches_what_full_search_reaches():
    # the ledger-only key must not lose tracker states that only a full search would find
    cfg = ExploreConfig(1, 2, 4, 5)
    assert _projected_reach(cfg, True) == _projected_reach(cfg, False)
