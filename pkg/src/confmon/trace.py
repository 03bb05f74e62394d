"""Append-only event trace and its line-delimited text format.

Every record is one JSON object per line with the fields in a fixed order::

    {"seq": 12, "hart": 0, "domain": 1, "op": "read_phys",
     "args": {"addr": 8192, "priv": "MIDDLE", "width": 8}, "outcome": "AccessDenied"}

``hart`` is null for events that no hart originated (reset, DMA, boot
bookkeeping). ``args`` keys are emitted sorted so that two identical runs give
byte-identical files.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

OK = "ok"

FIELDS = ("seq", "hart", "domain", "op", "args", "outcome")


@dataclass(frozen=True)
class TraceEvent:
    def __deepcopy__(self, memo):
        return self  # immutable: clones share it

    seq: int
    hart: int | None
    domain: int | None
    op: str
    args: dict[str, Any] = field(default_factory=dict)
    outcome: str = OK

    @property
    def ok(self) -> bool:
        return self.outcome == OK

    def to_line(self) -> str:
        record = {
            "seq": self.seq,
            "hart": self.hart,
            "domain": self.domain,
            "op": self.op,
            "args": to_jsonable(self.args),
            "outcome": self.outcome,
        }
        return json.dumps(record, sort_keys=False, separators=(",", ":"))


def to_jsonable(value: Any) -> Any:
    if isinstance(value, enum.Enum):
        return value.name
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, (int, float, str)):
        return value
    if isinstance(value, (bytes, bytearray)):
        return value.hex()
    if isinstance(value, dict):
        return {str(k): to_jsonable(value[k]) for k in sorted(value, key=str)}
    if isinstance(value, (set, frozenset)):
        return sorted((to_jsonable(v) for v in value), key=repr)
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if hasattr(value, "to_json"):
        return to_jsonable(value.to_json())
    raise TypeError(f"cannot serialise {type(value).__name__} in a trace record")


class Trace:
    """Append-only event log.

    ``base`` lets an explorer keep a short working buffer while sequence numbers
    keep counting from where a parent state left off.
    """

    def __init__(self, start_seq: int = 0):
        self._events: list[TraceEvent] = []
        self._next = start_seq

    def record(self, hart: int | None, domain: int | None, op: str,
               outcome: str = OK, **args: Any) -> TraceEvent:
        event = TraceEvent(self._next, hart, domain, op, args, outcome)
        self._next += 1
        self._events.append(event)
        return event

    def append(self, event: TraceEvent) -> TraceEvent:
        """Append an externally built event, renumbering it in sequence."""
        event = TraceEvent(self._next, event.hart, event.domain, event.op,
                           dict(event.args), event.outcome)
        self._next += 1
        self._events.append(event)
        return event

    @property
    def next_seq(self) -> int:
        return self._next

    def drain(self) -> list[TraceEvent]:
        """Return and forget buffered events; numbering continues."""
        events, self._events = self._events, []
        return events

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self._events)

    def __getitem__(self, index):
        return self._events[index]

    def events(self) -> list[TraceEvent]:
        return list(self._events)

    def dumps(self) -> str:
        return dumps(self._events)


def dumps(events: Iterable[TraceEvent]) -> str:
    return "".join(e.to_line() + "\n" for e in events)


def loads(text: str) -> list[TraceEvent]:
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            events.append(TraceEvent(rec["seq"], rec["hart"], rec["domain"],
                                     rec["op"], rec["args"], rec["outcome"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed trace record on line {lineno}: {exc}") from None
    return events
