import random

import pytest

from spanscope.cscfg import build_cscfg
from spanscope.harness import SystemSpec, comfort_economy_system, generate_traces
from spanscope.mapping import build_map
from spanscope.model import Span, Trace


def make_span(span_id, trace_id="t1", parent=None, operation="C.f", service="svc",
              start=0, duration=100, attributes=None):
    return Span(span_id=span_id, trace_id=trace_id, parent_id=parent,
                operation=operation, service=service, start_time=start,
                duration=duration, attributes=attributes or {})


def make_trace(spans, trace_id="t1", slack=0):
    return Trace(trace_id, spans, clock_skew_slack=slack)


def single_function_doc(fn="svc:C.f", blocks=None, edges=None, entry=None, exits=None,
                        external=(), extra_functions=()):
    """One-function call-graph document with leaf callees declared inline."""
    blocks = blocks or []
    callees = sorted({c for b in blocks for c in b.get("callees", [])})
    functions = [{
        "function": fn,
        "blocks": blocks,
        "flow_edges": edges or [],
        "entry": entry,
        "exits": exits or [],
    }]
    for extra in extra_functions:
        functions.append(extra if isinstance(extra, dict) else {"function": extra})
    declared = {f["function"] for f in functions}
    for c in callees:
        if c not in declared and c not in external:
            functions.append({"function": c})
            declared.add(c)
    return {"schema_version": 1, "functions": functions,
            "external_functions": list(external)}


@pytest.fixture
def comfort_setup():
    doc, meta = comfort_economy_system()
    graph = build_cscfg(doc)
    mapping = build_map(graph)
    return graph, mapping, meta, doc


@pytest.fixture
def comfort_samples(comfort_setup):
    graph, mapping, meta, _doc = comfort_setup
    spec = SystemSpec(seed=5, url_span_probability=0.0)
    samples = list(generate_traces(graph, meta, spec, 60))
    graph.freeze()
    return graph, mapping, meta, samples


def random_cscfg_doc(rng: random.Random, max_blocks=10, allow_cycles=True):
    """Random single-function document; every block calls one external leaf.

    Guaranteed fully reachable from the entry and co-reachable to an exit.
    """
    n = rng.randint(1, max_blocks)
    ids = [f"b{i}" for i in range(n)]
    edges = set()
    for i in range(1, n):
        edges.add((f"b{rng.randint(0, i - 1)}", f"b{i}"))  # reachability spine
    extra = rng.randint(0, n)
    for _ in range(extra):
        a, b = rng.randint(0, n - 1), rng.randint(0, n - 1)
        if a == b:
            continue
        if not allow_cycles and a > b:
            a, b = b, a
        edges.add((f"b{a}", f"b{b}"))
    sinks = [i for i in ids if not any(e[0] == i for e in edges)]
    exits = sinks or [ids[-1]]
    # every node must reach an exit
    succ = {i: [e[1] for e in edges if e[0] == i] for i in ids}
    exit_set = set(exits)
    changed = True
    reach_exit = set(exits)
    while changed:
        changed = False
        for i in ids:
            if i not in reach_exit and any(s in reach_exit for s in succ[i]):
                reach_exit.add(i)
                changed = True
    for i in ids:
        if i not in reach_exit:
            edges.add((i, exits[0]))
            reach_exit.add(i)
    blocks = [{"id": i, "callees": [f"x:Leaf.c{i}"]} for i in ids]
    return single_function_doc(
        fn="svc:R.f", blocks=blocks, edges=[list(e) for e in sorted(edges)],
        entry="b0", exits=sorted(exit_set),
        external=sorted({f"x:Leaf.c{i}" for i in ids}),
    )
