"""Span and trace primitives plus the newline-delimited interchange format.

A trace file is newline-delimited JSON, one trace per line:

    {"trace_id": "...", "spans": [{"span_id": ..., "trace_id": ...,
      "parent_id": ..., "operation": "Class.FunctionName", "service": ...,
      "start_time": <int microseconds>, "duration": <int microseconds>,
      "attributes": {...}}, ...]}

Traces are immutable after parsing and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import InvariantViolationError, MalformedDocumentError, UnknownSpanError

SpanId = str


@dataclass(frozen=True)
class Span:
    """One timed operation; part of exactly one trace."""

    span_id: SpanId
    trace_id: str
    parent_id: SpanId | None
    operation: str
    service: str
    start_time: int
    duration: int
    attributes: dict[str, str] = field(default_factory=dict)

    @property
    def end_time(self) -> int:
        return self.start_time + self.duration

    def to_dict(self) -> dict:
        return {
            "span_id": self.span_id,
            "trace_id": self.trace_id,
            "parent_id": self.parent_id,
            "operation": self.operation,
            "service": self.service,
            "start_time": self.start_time,
            "duration": self.duration,
            "attributes": dict(self.attributes),
        }

    def with_parent(self, parent_id: SpanId | None) -> "Span":
        return replace(self, parent_id=parent_id)


class Trace:
    """A tree of spans with exactly one root.

    Construction validates the tree invariants; use ``clock_skew_slack`` to
    tolerate bounded child intervals sticking out of their parent.
    """

    def __init__(self, trace_id: str, spans: list[Span], clock_skew_slack: int = 0):
        self.trace_id = trace_id
        self.spans = tuple(spans)
        self.clock_skew_slack = clock_skew_slack
        self._by_id: dict[SpanId, Span] = {}
        self._children: dict[SpanId, tuple[Span, ...]] = {}
        self._root: Span | None = None
        self._validate()

    def _validate(self) -> None:
        if not self.spans:
            raise MalformedDocumentError(f"trace {self.trace_id!r} has no spans")
        for s in self.spans:
            if s.trace_id != self.trace_id:
                raise InvariantViolationError(
                    s.span_id, f"trace_id {s.trace_id!r} does not match record {self.trace_id!r}"
                )
            if not s.span_id:
                raise InvariantViolationError(s.span_id, "empty span id")
            if s.span_id in self._by_id:
                raise InvariantViolationError(s.span_id, "duplicate span id")
            if s.duration < 0:
                raise InvariantViolationError(s.span_id, "negative duration")
            self._by_id[s.span_id] = s

        roots = [s for s in self.spans if s.parent_id is None]
        if not roots:
            raise InvariantViolationError(self.spans[0].span_id, "trace has no root span")
        if len(roots) > 1:
            raise InvariantViolationError(roots[1].span_id, "trace has multiple root spans")
        self._root = roots[0]

        kids: dict[SpanId, list[Span]] = {s.span_id: [] for s in self.spans}
        for s in self.spans:
            if s.parent_id is None:
                continue
            parent = self._by_id.get(s.parent_id)
            if parent is None:
                raise InvariantViolationError(s.span_id, f"dangling parent {s.parent_id!r}")
            kids[s.parent_id].append(s)

        # parent links must form a tree rooted at the single root
        seen: set[SpanId] = set()
        stack = [self._root.span_id]
        while stack:
            sid = stack.pop()
            if sid in seen:
                raise InvariantViolationError(sid, "cycle in parent links")
            seen.add(sid)
            stack.extend(c.span_id for c in kids[sid])
        if len(seen) != len(self.spans):
            missing = sorted(set(self._by_id) - seen)
            raise InvariantViolationError(missing[0], "span not reachable from root")

        slack = self.clock_skew_slack
        for s in self.spans:
            if s.parent_id is None:
                continue
            parent = self._by_id[s.parent_id]
            if s.start_time < parent.start_time - slack or s.end_time > parent.end_time + slack:
                raise InvariantViolationError(
                    s.span_id, "interval extends beyond parent beyond allowed clock skew"
                )

        for sid, lst in kids.items():
            lst.sort(key=lambda c: (c.start_time, c.span_id))
            self._children[sid] = tuple(lst)

    @property
    def root(self) -> Span:
        return self._root

    def __len__(self) -> int:
        return len(self.spans)

    def span(self, span_id: SpanId) -> Span:
        try:
            return self._by_id[span_id]
        except KeyError:
            raise UnknownSpanError(f"no span {span_id!r} in trace {self.trace_id!r}") from None

    def has_span(self, span_id: SpanId) -> bool:
        return span_id in self._by_id

    def child_spans(self, span_id: SpanId) -> tuple[Span, ...]:
        if span_id not in self._by_id:
            raise UnknownSpanError(f"no span {span_id!r} in trace {self.trace_id!r}")
        return self._children[span_id]

    def span_ids(self) -> frozenset[SpanId]:
        return frozenset(self._by_id)


def children_of(trace: Trace, span_id: SpanId) -> list[SpanId]:
    """Direct children ordered by start time, ties broken by span id."""
    return [c.span_id for c in trace.child_spans(span_id)]


def preorder_spans(trace: Trace) -> list[Span]:
    """Root-first ordering; siblings by (start_time, span_id)."""
    out: list[Span] = []

    def visit(span: Span) -> None:
        out.append(span)
        for c in trace.child_spans(span.span_id):
            visit(c)

    visit(trace.root)
    return out


def _interval_union(intervals: list[tuple[int, int]]) -> int:
    total = 0
    last_end = None
    for lo, hi in sorted(intervals):
        if hi <= lo:
            continue
        if last_end is None or lo >= last_end:
            total += hi - lo
            last_end = hi
        elif hi > last_end:
            total += hi - last_end
            last_end = hi
    return total


def exclusive_duration(trace: Trace, span_id: SpanId) -> int:
    """Duration minus the union of direct children's intervals, clamped to >= 0.

    Children may overlap (async fan-out), so coverage is the interval union,
    clipped to the span's own interval.
    """
    span = trace.span(span_id)
    intervals = [
        (max(c.start_time, span.start_time), min(c.end_time, span.end_time))
        for c in trace.child_spans(span_id)
    ]
    covered = _interval_union(intervals)
    return max(0, span.duration - covered)


def exclusive_durations(trace: Trace) -> dict[SpanId, int]:
    return {s.span_id: exclusive_duration(trace, s.span_id) for s in trace.spans}


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise MalformedDocumentError(msg)


def span_from_dict(obj: dict, trace_id: str | None = None) -> Span:
    _require(isinstance(obj, dict), "span record must be an object")
    for key in ("span_id", "operation", "service", "start_time", "duration"):
        _require(key in obj, f"span record missing field {key!r}")
    tid = obj.get("trace_id", trace_id)
    _require(isinstance(tid, str) and bool(tid), "span record missing trace_id")
    _require(isinstance(obj["span_id"], str), "span_id must be a string")
    _require(isinstance(obj["operation"], str), "operation must be a string")
    _require(isinstance(obj["service"], str), "service must be a string")
    _require(isinstance(obj["start_time"], int), "start_time must be an integer")
    _require(isinstance(obj["duration"], int), "duration must be an integer")
    parent = obj.get("parent_id")
    _require(parent is None or isinstance(parent, str), "parent_id must be a string or null")
    attrs = obj.get("attributes", {})
    _require(isinstance(attrs, dict), "attributes must be an object")
    for k, v in attrs.items():
        _require(isinstance(k, str) and isinstance(v, str), "attributes must map strings to strings")
    return Span(
        span_id=obj["span_id"],
        trace_id=tid,
        parent_id=parent,
        operation=obj["operation"],
        service=obj["service"],
        start_time=obj["start_time"],
        duration=obj["duration"],
        attributes=dict(attrs),
    )


def parse_trace(document: str, clock_skew_slack: int = 0) -> Trace:
    """Parse one trace record; raises on bad syntax or broken invariants."""
    try:
        obj = json.loads(document)
    except json.JSONDecodeError as exc:
        raise MalformedDocumentError(f"invalid JSON: {exc}") from exc
    _require(isinstance(obj, dict), "trace record must be an object")
    _require("trace_id" in obj and isinstance(obj["trace_id"], str), "missing trace_id")
    _require(isinstance(obj.get("spans"), list), "missing spans array")
    spans = [span_from_dict(s, obj["trace_id"]) for s in obj["spans"]]
    return Trace(obj["trace_id"], spans, clock_skew_slack=clock_skew_slack)


def serialize_trace(trace: Trace) -> str:
    record = {
        "trace_id": trace.trace_id,
        "spans": [s.to_dict() for s in trace.spans],
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def read_trace_file(path, clock_skew_slack: int = 0):
    """Yield traces from a newline-delimited file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield parse_trace(line, clock_skew_slack=clock_skew_slack)


def write_trace_file(traces, path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(serialize_trace(t) + "\n")
            n += 1
    return n
