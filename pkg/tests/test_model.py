import json
import random

import pytest

from spanscope.errors import InvariantViolationError, MalformedDocumentError, UnknownSpanError
from spanscope.model import (
    children_of,
    exclusive_duration,
    exclusive_durations,
    parse_trace,
    preorder_spans,
    serialize_trace,
)

from .conftest import make_span, make_trace
from .oracles import interval_union_length


def fig2_trace():
    # root with two children, mirroring a three-function call tree
    root = make_span("s1", operation="OrderService.getTicketListByDateAndTripId",
                     start=0, duration=100)
    c1 = make_span("s2", parent="s1", operation="Seat.getTravelDate", start=10, duration=20)
    c2 = make_span("s3", parent="s1", operation="Seat.getSoldTickets", start=40, duration=30)
    return make_trace([root, c1, c2])


class TestParse:
    def test_single_span_document(self):
        doc = json.dumps({"trace_id": "t1", "spans": [make_span("a").to_dict()]})
        trace = parse_trace(doc)
        assert len(trace) == 1
        assert trace.root.span_id == "a"
        assert trace.root.parent_id is None

    def test_three_span_tree(self):
        trace = fig2_trace()
        doc = serialize_trace(trace)
        parsed = parse_trace(doc)
        assert len(children_of(parsed, "s1")) == 2
        assert parsed.root.span_id == "s1"

    def test_dangling_parent_names_span(self):
        spans = [make_span("a"), make_span("b", parent="nope", start=1, duration=2)]
        with pytest.raises(InvariantViolationError) as err:
            make_trace(spans)
        assert err.value.span_id == "b"

    def test_multiple_roots_rejected(self):
        with pytest.raises(InvariantViolationError):
            make_trace([make_span("a"), make_span("b")])

    def test_cycle_rejected(self):
        spans = [
            make_span("a"),
            make_span("b", parent="c", start=1, duration=1),
            make_span("c", parent="b", start=1, duration=1),
        ]
        with pytest.raises(InvariantViolationError):
            make_trace(spans)

    def test_negative_duration_rejected(self):
        with pytest.raises(InvariantViolationError):
            make_trace([make_span("a", duration=-1)])

    def test_child_outside_parent_rejected(self):
        spans = [make_span("a", duration=50), make_span("b", parent="a", start=40, duration=20)]
        with pytest.raises(InvariantViolationError):
            make_trace(spans)

    def test_clock_skew_slack_allows_bounded_overhang(self):
        spans = [make_span("a", duration=50), make_span("b", parent="a", start=40, duration=20)]
        trace = make_trace(spans, slack=10)
        assert len(trace) == 2

    def test_bad_json_is_malformed(self):
        with pytest.raises(MalformedDocumentError):
            parse_trace("{nope")

    def test_missing_fields_malformed(self):
        with pytest.raises(MalformedDocumentError):
            parse_trace(json.dumps({"trace_id": "t", "spans": [{"span_id": "a"}]}))

    def test_round_trip_identity(self):
        trace = fig2_trace()
        doc = serialize_trace(trace)
        again = serialize_trace(parse_trace(doc))
        assert doc == again


class TestExclusiveDuration:
    def test_leaf(self):
        trace = make_trace([make_span("a", duration=100)])
        assert exclusive_duration(trace, "a") == 100

    def test_two_disjoint_children(self):
        spans = [
            make_span("p", duration=100),
            make_span("c1", parent="p", start=0, duration=30),
            make_span("c2", parent="p", start=50, duration=20),
        ]
        trace = make_trace(spans)
        assert exclusive_duration(trace, "p") == 50

    def test_overlapping_children_use_union(self):
        spans = [
            make_span("p", duration=100),
            make_span("c1", parent="p", start=10, duration=30),  # [10, 40]
            make_span("c2", parent="p", start=30, duration=30),  # [30, 60]
        ]
        trace = make_trace(spans)
        assert exclusive_duration(trace, "p") == 100 - 50

    def test_unknown_span(self):
        trace = make_trace([make_span("a")])
        with pytest.raises(UnknownSpanError):
            exclusive_duration(trace, "zzz")

    def test_against_interval_union_oracle_random(self):
        rng = random.Random(11)
        for _ in range(300):
            dur = rng.randint(10, 200)
            spans = [make_span("p", duration=dur)]
            intervals = []
            for i in range(rng.randint(0, 6)):
                start = rng.randint(0, dur - 1)
                width = rng.randint(0, dur - start)
                spans.append(make_span(f"c{i}", parent="p", start=start, duration=width))
                intervals.append((start, start + width))
            trace = make_trace(spans)
            expected = max(0, dur - interval_union_length(intervals))
            assert exclusive_duration(trace, "p") == expected

    def test_exclusive_never_exceeds_duration_and_sums_bounded(self):
        rng = random.Random(7)
        for _ in range(100):
            spans = [make_span("root", duration=1000)]
            counter = 0
            frontier = [("root", 0, 1000)]
            while frontier and counter < 12:
                parent, lo, hi = frontier.pop()
                if hi - lo < 4 or rng.random() < 0.3:
                    continue
                mid = rng.randint(lo + 1, hi - 1)
                counter += 1
                sid = f"s{counter}"
                spans.append(make_span(sid, parent=parent, start=lo, duration=mid - lo))
                frontier.append((sid, lo, mid))
            trace = make_trace(spans)
            excl = exclusive_durations(trace)
            for span in trace.spans:
                assert 0 <= excl[span.span_id] <= span.duration
            assert sum(excl.values()) <= trace.root.duration


class TestChildren:
    def test_order_by_start_time(self):
        trace = fig2_trace()
        assert children_of(trace, "s1") == ["s2", "s3"]

    def test_leaf_has_no_children(self):
        trace = fig2_trace()
        assert children_of(trace, "s2") == []

    def test_tie_broken_by_span_id(self):
        spans = [
            make_span("p", duration=100),
            make_span("zz", parent="p", start=10, duration=5),
            make_span("aa", parent="p", start=10, duration=5),
        ]
        trace = make_trace(spans)
        assert children_of(trace, "p") == ["aa", "zz"]

    def test_preorder_contains_all_spans_once(self):
        trace = fig2_trace()
        order = [s.span_id for s in preorder_spans(trace)]
        assert order == ["s1", "s2", "s3"]
