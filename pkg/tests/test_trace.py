from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from confmon.trace import Trace, TraceEvent, dumps, loads


def test_roundtrip_of_a_boot_trace(booted):
    p, _ = booted
    text = p.trace.dumps()
    again = loads(text)
    assert dumps(again) == text
    assert [e.seq for e in again] == list(range(len(again)))


def test_one_json_object_per_line(booted):
    p, _ = booted
    lines = p.trace.dumps().splitlines()
    rec = json.loads(lines[0])
    assert set(rec) == {"seq", "hart", "domain", "op", "args", "outcome"}


def test_sequence_numbers_are_consecutive():
    t = Trace()
    for op in "abc":
        t.record(0, 1, op)
    assert [e.seq for e in t] == [0, 1, 2]
    assert t.drain()[-1].op == "c" and len(t) == 0
    assert t.record(None, None, "d").seq == 3


def test_bytes_are_hex_encoded():
    t = Trace()
    e = t.record(0, 0, "x", digest=b"\x01\xff")
    assert loads(e.to_line())[0].args["digest"] == "01ff"


@pytest.mark.parametrize("text", ["not json", '{"seq": 1}', "[1, 2]"])
def test_malformed_lines_rejected(text):
    with pytest.raises(ValueError, match="line 1"):
        loads(text)


def test_blank_lines_ignored():
    assert loads("\n\n") == []


scalar = st.one_of(st.integers(-2**63, 2**64), st.text(max_size=8), st.booleans(), st.none())


@given(st.lists(st.tuples(st.sampled_from(["read_phys", "trap", "sm_call"]),
                          st.dictionaries(st.sampled_from("abcdef"), scalar, max_size=4)),
                max_size=10))
def test_roundtrip_property(records):
    t = Trace()
    for op, args in records:
        t.record(0, 1, op, **args)
    assert dumps(loads(t.dumps())) == t.dumps()
    assert [(e.op, e.args) for e in loads(t.dumps())] == [(op, args) for op, args in records]


def test_event_ok_flag():
    assert TraceEvent(0, 0, 0, "x", {}, "ok").ok
    assert not TraceEvent(0, 0, 0, "x", {}, "AccessDenied").ok
