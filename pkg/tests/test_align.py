import random

import pytest

from spanscope.align import PathCache, align, cache_lookup, trace_signature
from spanscope.cscfg import build_cscfg
from spanscope.errors import NoPathError
from spanscope.harness import SystemSpec, generate_traces
from spanscope.mapping import build_map

from .conftest import make_span, make_trace, single_function_doc
from .oracles import oracle_invocation_cost

FN = "svc:Main.run"


def linear_graph():
    doc = single_function_doc(
        fn=FN,
        blocks=[
            {"id": "b0", "callees": ["svc:A.a"]},
            {"id": "b1", "callees": ["svc:B.b"]},
        ],
        edges=[["b0", "b1"]],
        entry="b0", exits=["b1"],
        extra_functions=[{"function": "svc:A.a"}, {"function": "svc:B.b"}],
    )
    return build_cscfg(doc)


def linear_trace(with_url=False, trace_id="t1"):
    spans = [
        make_span("r", trace_id=trace_id, operation="Main.run", start=0, duration=100),
        make_span("a", trace_id=trace_id, parent="r", operation="A.a", start=5, duration=10),
        make_span("b", trace_id=trace_id, parent="r", operation="B.b", start=30, duration=10),
    ]
    if with_url:
        spans.append(make_span("u", trace_id=trace_id, parent="r",
                               operation="GET /api/x", start=50, duration=5))
    return make_trace(spans, trace_id=trace_id)


class TestAlign:
    def test_exact_match_cost_zero(self):
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        path = align(graph, linear_trace(), mapping)
        assert path.cost == 0
        assert path.insertions == 0
        kinds = [s.kind for s in path.steps]
        assert kinds == ["enter", "match", "match"]

    def test_every_span_on_exactly_one_step(self):
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        trace = linear_trace(with_url=True)
        path = align(graph, trace, mapping)
        linked = path.span_ids()
        assert sorted(linked) == sorted(trace.span_ids())

    def test_url_span_costs_one_insertion(self):
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        path = align(graph, linear_trace(with_url=True), mapping)
        assert path.cost == 1
        assert path.insertions == 1
        inserted = [s for s in path.steps if s.kind == "insert"]
        assert len(inserted) == 1
        assert inserted[0].span_id == "u"
        assert inserted[0].block_id is None

    def test_insert_recorded_on_graph_sink(self):
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        align(graph, linear_trace(with_url=True), mapping)
        assert graph.alignment_inserts[(FN, "GET /api/x")] == 1

    def test_comfort_branch_cost_zero(self, comfort_samples):
        graph, mapping, meta, samples = comfort_samples
        for sample in samples[:10]:
            path = align(graph, sample.trace, mapping)
            assert path.cost == 0

    def test_missing_span_skips_avoidable_block(self):
        # trace omits the A.a span; b0 is mandatory so the aligner prefers
        # keeping the path and paying the prohibitive-skip bill over nothing
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        spans = [
            make_span("r", operation="Main.run", start=0, duration=100),
            make_span("b", parent="r", operation="B.b", start=30, duration=10),
        ]
        path = align(graph, make_trace(spans), mapping)
        skipped = [s for s in path.steps if s.kind == "skip"]
        assert len(skipped) == 1
        assert skipped[0].callee == "svc:A.a"
        assert path.cost >= 1

    def test_unmapped_root_raises_no_path(self):
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        spans = [make_span("r", operation="GET /", start=0, duration=10)]
        with pytest.raises(NoPathError) as err:
            align(graph, make_trace(spans), mapping)
        assert err.value.span_id == "r"

    def test_unknown_entry_function_raises_no_path(self):
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        spans = [make_span("r", operation="Main.run", service="elsewhere",
                           start=0, duration=10)]
        with pytest.raises(NoPathError):
            align(graph, make_trace(spans), mapping)

    def test_deterministic_repeat(self):
        graph = linear_graph().freeze()
        mapping = build_map(graph)
        trace = linear_trace(with_url=True)
        assert align(graph, trace, mapping) == align(graph, trace, mapping)


class TestOptimality:
    def test_matches_brute_force_on_random_children(self):
        # one invocation against a diamond-with-tail function; symbols drawn
        # randomly so matches, inserts and skips all occur
        fn = FN
        doc = single_function_doc(
            fn=fn,
            blocks=[
                {"id": "e", "callees": ["svc:X.e"]},
                {"id": "L1", "callees": ["svc:X.l1"]},
                {"id": "L2", "callees": ["svc:X.l2"]},
                {"id": "R1", "callees": ["svc:X.r1"]},
                {"id": "t", "callees": ["svc:X.t"]},
            ],
            edges=[["e", "L1"], ["L1", "L2"], ["e", "R1"], ["L2", "t"], ["R1", "t"]],
            entry="e", exits=["t"],
            extra_functions=[{"function": f"svc:X.{n}"}
                             for n in ("e", "l1", "l2", "r1", "t")],
        )
        graph = build_cscfg(doc).freeze()
        mapping = build_map(graph)
        ops = ["X.e", "X.l1", "X.l2", "X.r1", "X.t", "X.e"]
        rng = random.Random(21)
        for trial in range(200):
            k = rng.randint(0, 5)
            chosen = [rng.choice(ops) for _ in range(k)]
            spans = [make_span("r", operation="Main.run", start=0, duration=10000)]
            for i, op in enumerate(chosen):
                spans.append(make_span(f"c{i}", parent="r", operation=op,
                                       start=10 * (i + 1), duration=5))
            trace = make_trace(spans)
            path = align(graph, trace, mapping)
            resolved = [mapping.resolve(s) for s in trace.child_spans("r")]
            symbol_fns = [r.key for r in resolved]
            expected = oracle_invocation_cost(graph, fn, symbol_fns)
            assert path.cost == expected, (trial, chosen, path.cost, expected)

    def test_nested_invocations_sum_costs(self):
        inner = "svc:Inner.h"
        doc = single_function_doc(
            fn=FN,
            blocks=[{"id": "b0", "callees": [inner]}],
            edges=[], entry="b0", exits=["b0"],
            extra_functions=[{
                "function": inner,
                "blocks": [{"id": "c0", "callees": ["svc:X.deep"]}],
                "flow_edges": [], "entry": "c0", "exits": ["c0"],
            }, {"function": "svc:X.deep"}],
        )
        graph = build_cscfg(doc).freeze()
        mapping = build_map(graph)
        spans = [
            make_span("r", operation="Main.run", start=0, duration=100),
            make_span("h", parent="r", operation="Inner.h", start=5, duration=50),
            make_span("d", parent="h", operation="X.deep", start=10, duration=10),
            make_span("u", parent="h", operation="GET /zz", start=30, duration=5),
        ]
        path = align(graph, make_trace(spans), mapping)
        assert path.cost == 1  # the URL insertion inside the inner invocation
        assert path.insertions == 1


class TestCache:
    def setup_method(self):
        self.graph = linear_graph().freeze()
        self.mapping = build_map(self.graph)

    def test_same_shape_hits(self):
        cache = PathCache()
        align(self.graph, linear_trace(trace_id="t1"), self.mapping, cache)
        align(self.graph, linear_trace(trace_id="t2"), self.mapping, cache)
        assert cache.hits == 1
        assert cache.misses == 1

    def test_durations_do_not_change_key(self):
        t1 = linear_trace(trace_id="t1")
        spans = [
            make_span("r", trace_id="t2", operation="Main.run", start=0, duration=999),
            make_span("a", trace_id="t2", parent="r", operation="A.a", start=1, duration=7),
            make_span("b", trace_id="t2", parent="r", operation="B.b", start=20, duration=3),
        ]
        t2 = make_trace(spans, trace_id="t2")
        r1 = {s.span_id: self.mapping.resolve(s) for s in t1.spans}
        r2 = {s.span_id: self.mapping.resolve(s) for s in t2.spans}
        assert trace_signature(t1, r1) == trace_signature(t2, r2)

    def test_nesting_changes_key(self):
        flat = linear_trace(trace_id="t1")
        nested_spans = [
            make_span("r", operation="Main.run", start=0, duration=100),
            make_span("a", parent="r", operation="A.a", start=5, duration=40),
            make_span("b", parent="a", operation="B.b", start=10, duration=10),
        ]
        nested = make_trace(nested_spans)
        r1 = {s.span_id: self.mapping.resolve(s) for s in flat.spans}
        r2 = {s.span_id: self.mapping.resolve(s) for s in nested.spans}
        assert trace_signature(flat, r1) != trace_signature(nested, r2)

    def test_rehydrated_equals_fresh(self):
        cache = PathCache()
        fresh = align(self.graph, linear_trace(trace_id="t1"), self.mapping, cache)
        cached = align(self.graph, linear_trace(trace_id="t2"), self.mapping, cache)
        no_cache = align(self.graph, linear_trace(trace_id="t2"), self.mapping, None)
        assert cached == no_cache
        assert fresh.cost == cached.cost

    def test_lru_eviction_capacity_one(self):
        cache = PathCache(capacity=1)
        t_url = linear_trace(with_url=True, trace_id="t1")
        t_flat = linear_trace(trace_id="t2")
        align(self.graph, t_url, self.mapping, cache)
        align(self.graph, t_flat, self.mapping, cache)  # evicts t_url's shape
        align(self.graph, linear_trace(with_url=True, trace_id="t3"), self.mapping, cache)
        align(self.graph, linear_trace(trace_id="t4"), self.mapping, cache)
        assert cache.hits == 0
        assert cache.misses == 4

    def test_cache_lookup_function(self):
        cache = PathCache()
        trace = linear_trace()
        res = {s.span_id: self.mapping.resolve(s) for s in trace.spans}
        key = trace_signature(trace, res)
        assert cache_lookup(cache, key) is None
        align(self.graph, trace, self.mapping, cache)
        assert cache_lookup(cache, key) is not None


class TestHarnessTraffic:
    def test_generated_traces_align_with_insert_only_cost(self):
        spec = SystemSpec(seed=23, url_span_probability=0.2)
        from spanscope.harness import generate_system

        doc, meta = generate_system(spec)
        graph = build_cscfg(doc)
        mapping = build_map(graph)
        samples = list(generate_traces(graph, meta, spec, 40))
        graph.freeze()
        for sample in samples:
            path = align(graph, sample.trace, mapping)
            url_spans = sum(1 for s in sample.trace.spans if s.operation.startswith("GET "))
            assert path.cost == url_spans
            assert path.insertions == url_spans
