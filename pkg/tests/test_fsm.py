from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from confmon import guest
from confmon.errors import IllegalTransition, UndeclaredCall, WrongExitNode
from confmon.fsm import (
    EDGES,
    Direction,
    FsmNode,
    apply_state_transformation,
    exit_to_domain,
    goto,
)
from confmon.harness.adversary import ActionKind
from confmon.hw import HYPERVISOR, NUM_GPRS, PrivilegeLevel
from confmon.monitor import Status, WhitelistTable
from conftest import act
from oracles import outbound_baseline, raw_whitelist

WL = raw_whitelist()
regfile = st.lists(st.integers(0, 2**64 - 1), min_size=NUM_GPRS, max_size=NUM_GPRS)
call_ids = st.sampled_from(sorted(WL))


TABLE = WhitelistTable.load()


def spec(p, call_id):
    return p.monitor.whitelist.get(call_id)


def test_edge_table_shape():
    assert EDGES[None] == {FsmNode.NC_ENTER, FsmNode.C_ENTER}
    # only the route nodes may cross the boundary
    for src, dsts in EDGES.items():
        for dst in dsts:
            if src is not None and src.confidential != dst.confidential:
                assert src in (FsmNode.NC_ROUTE, FsmNode.C_ROUTE)
    assert not EDGES[FsmNode.NC_EXIT] and not EDGES[FsmNode.C_EXIT]


def test_goto_rejects_non_edges(booted):
    p, _ = booted
    goto(p, 0, FsmNode.NC_ENTER)
    with pytest.raises(IllegalTransition):
        goto(p, 0, FsmNode.NC_EXIT)
    ev = goto(p, 0, FsmNode.NC_ROUTE)
    assert ev.direction is Direction.NONE
    ev = goto(p, 0, FsmNode.C_TRANSFORM)
    assert ev.direction is Direction.NC_TO_C


def test_exit_from_wrong_node(booted):
    p, _ = booted
    goto(p, 0, FsmNode.NC_ENTER)
    with pytest.raises(WrongExitNode):
        exit_to_domain(p, 0, HYPERVISOR)
    assert p.trace[-1].outcome == "WrongExitNode"


def test_undeclared_call_has_no_transformation():
    with pytest.raises(UndeclaredCall):
        apply_state_transformation([0] * NUM_GPRS, None, Direction.C_TO_NC)


@given(regfile, call_ids)
def test_outbound_matches_baseline(regs, call_id):
    view = apply_state_transformation(regs, TABLE.get(call_id), Direction.C_TO_NC)
    # the baseline also stamps r14/r15, which the monitor does after filtering
    assert view[:14] == outbound_baseline(regs, call_id, 16, 0)[:14]
    for r in range(NUM_GPRS):
        assert view[r] == (regs[r] if r in WL[call_id]["args"] else 0)


@given(regfile, regfile, call_ids)
def test_inbound_touches_only_results(saved, incoming, call_id):
    out = apply_state_transformation(saved, TABLE.get(call_id), Direction.NC_TO_C, incoming=incoming)
    for r in range(NUM_GPRS):
        assert out[r] == (incoming[r] if r in WL[call_id]["results"] else saved[r])


def test_mutations_break_the_filter(booted):
    p, _ = booted
    regs = list(range(1, NUM_GPRS + 1))
    leaky = apply_state_transformation(regs, spec(p, 16), Direction.C_TO_NC,
                                       mutations=frozenset({"leaky-view"}))
    assert leaky == regs
    clobbered = apply_state_transformation([0] * NUM_GPRS, spec(p, 16), Direction.NC_TO_C,
                                           incoming=regs, mutations=frozenset({"clobbered-restore"}))
    assert clobbered[:6] == regs[:6]


def test_inbound_needs_incoming(booted):
    p, _ = booted
    with pytest.raises(ValueError):
        apply_state_transformation([0] * NUM_GPRS, spec(p, 16), Direction.NC_TO_C)


def test_cvm_runs_at_lowest_and_hypervisor_at_middle(running):
    p, _ = running
    assert p.harts[0].privilege is PrivilegeLevel.LOWEST and p.harts[0].domain == 16
    assert p.harts[1].privilege is PrivilegeLevel.MIDDLE and p.harts[1].domain == HYPERVISOR


def test_routed_call_reaches_hypervisor_filtered(running):
    p, _ = running
    res = guest.cvm_ecall(p, 0, 16, {0: ord("A"), 3: 0xDEAD, 12: 0xBEEF})
    assert res.running == HYPERVISOR and res.status == Status.EXIT_ROUTED and res.value == 16
    regs = p.harts[0].gprs
    assert regs[0] == ord("A") and regs[7] == 16
    assert regs[3] == 0 and regs[12] == 0


def test_answer_updates_only_result_registers(running):
    p, _ = running
    guest.cvm_ecall(p, 0, 17, {2: 222, 5: 555})
    guest.resume(p, 0, 16, {0: 7, 1: 8, 2: 9})
    regs = p.harts[0].gprs
    assert p.harts[0].domain == 16
    assert (regs[0], regs[1], regs[2], regs[5]) == (7, 8, 222, 555)


def test_interrupt_while_cvm_runs_exits_with_empty_view(running):
    p, _ = running
    act(p, ActionKind.INTERRUPT_INJECTION, hart=0, irq=1)
    regs = p.harts[0].gprs
    assert p.harts[0].domain == HYPERVISOR
    assert regs[15] == Status.EXIT_INTERRUPT and regs[14] == 16
    assert regs[:14] == [0] * 14


def test_every_crossing_performs_its_actions(running):
    p, _ = running
    guest.cvm_ecall(p, 0, 17)
    guest.resume(p, 0, 16)
    crossings = [e for e in p.trace if e.op == "transition"]
    assert crossings
    for e in crossings:
        want = {"NcToC": {"isolation-reconfig", "hypervisor-state-save", "irq-retarget-sm"},
                "CToNc": {"isolation-deny", "hypervisor-state-restore", "irq-restore"}}
        assert set(e.args["actions"]) == want[e.args["direction"]]


def test_microarch_clean_after_every_exit(running):
    p, _ = running
    guest.cvm_ecall(p, 0, 16)
    assert p.harts[0].microarch.clean
    guest.resume(p, 0, 16)
    assert p.harts[0].microarch.clean
