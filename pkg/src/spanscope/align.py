"""Incremental alignment of a trace onto an execution path through the graph.

Each invocation of a mapped function is aligned independently: the ordered
calls witnessed by its child spans are matched against the emission sequences
of paths through the function's node graph. Costs are unit: inserting a span
the graph cannot explain costs 1, passing a block whose call was not
witnessed costs 1 (legal only for avoidable blocks; mandatory blocks carry a
prohibitive cost instead), substitution is not allowed. Unmapped spans are
forced insertions and are transparent: their children are spliced into the
surrounding invocation, which is how URL-style wrapper spans behave.

Search is a shortest-path sweep over (node, emission index, symbols consumed)
states obtained with Dijkstra, so loops in the graph need no special casing.
Ties are broken deterministically: lower cost, then fewer insertions, then a
fixed action preference (match, patched match, skip, insert, move to the
smallest successor id), which keeps repeated runs byte-identical.

Results are cached under the trace's shape signature. A cached path stores
span slots (preorder indexes) instead of ids, so a hit rehydrates to a value
identical to a fresh alignment.
"""

from __future__ import annotations

import heapq
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass

from .cscfg import Cscfg, FunctionRef, entry_node
from .errors import NoPathError
from .mapping import SpanFunctionMap, Unmapped
from .model import Span, Trace, preorder_spans

PROHIBITIVE_COST = 1_000_000

KIND_ENTER = "enter"
KIND_MATCH = "match"
KIND_INSERT = "insert"
KIND_SKIP = "skip"


@dataclass(frozen=True)
class TransitEdge:
    """One flow move taken after a step, inside one function's graph."""

    function: str
    src: str
    dst: str


@dataclass(frozen=True)
class PathStep:
    kind: str
    block_id: str | None
    callee: str | None
    span_id: str | None
    transit: tuple[TransitEdge, ...] = ()


@dataclass(frozen=True)
class ExecutionPath:
    steps: tuple[PathStep, ...]
    cost: int
    insertions: int

    def span_ids(self) -> list[str]:
        return [s.span_id for s in self.steps if s.span_id is not None]


class PathCache:
    """Bounded LRU over trace-shape signatures; safe under concurrent use."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def lookup(self, key):
        with self._lock:
            tmpl = self._data.get(key)
            if tmpl is None:
                self.misses += 1
                return None
            self._data.move_to_end(key)
            self.hits += 1
            return tmpl

    def store(self, key, template) -> None:
        with self._lock:
            self._data[key] = template
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)


def cache_lookup(cache: PathCache, key):
    """Hit returns the stored template, miss returns None."""
    return cache.lookup(key)


def trace_signature(trace: Trace, resolutions: dict) -> tuple:
    """Canonical shape: preorder function keys with nesting markers.

    Unmapped spans appear as '?'. Durations and ids are excluded, so traces
    differing only in timing share a signature; the nesting markers make
    equal signatures imply identical alignments.
    """
    parts: list[str] = []

    def visit(span: Span) -> None:
        r = resolutions[span.span_id]
        parts.append(r.key if isinstance(r, FunctionRef) else "?")
        parts.append("(")
        for child in trace.child_spans(span.span_id):
            visit(child)
        parts.append(")")

    visit(trace.root)
    return tuple(parts)


class _SymCall:
    __slots__ = ("ref", "span", "children")

    def __init__(self, ref, span, children):
        self.ref = ref
        self.span = span
        self.children = children


class _SymIns:
    __slots__ = ("span",)

    def __init__(self, span):
        self.span = span


def _build_symbols(trace: Trace, spans, resolutions) -> list:
    syms = []
    for s in spans:
        r = resolutions[s.span_id]
        if isinstance(r, Unmapped):
            syms.append(_SymIns(s))
            syms.extend(_build_symbols(trace, trace.child_spans(s.span_id), resolutions))
        else:
            syms.append(_SymCall(r, s, trace.child_spans(s.span_id)))
    return syms


def _solve(graph: Cscfg, fn_key: str, syms: list, beam: int | None):
    """Optimal action sequence for one invocation.

    Returns (cost, insertions, actions). Cost tuples order by total cost then
    insertion count; the greedy replay over goal distances applies the fixed
    action preference, so the result is deterministic.
    """
    sub = graph.subgraph(fn_key)
    mandatory = graph.dominance(fn_key).mandatory
    n = len(syms)
    sym_fn = [s.ref.key if isinstance(s, _SymCall) else None for s in syms]
    start = (sub.entry, 0, 0)
    goal = (sub.exit, 0, n)

    def actions(state):
        node, k, i = state
        em = sub.emissions[node]
        out = []
        if k < len(em):
            if i < n and sym_fn[i] == em[k]:
                out.append(("match", (node, k + 1, i + 1), (0, 0)))
        if i < n and sym_fn[i] is not None and sym_fn[i] in sub.patched.get(node, ()):
            out.append(("pmatch", (node, k, i + 1), (0, 0)))
        if k < len(em):
            skip_cost = 1 if node not in mandatory else PROHIBITIVE_COST
            out.append(("skip", (node, k + 1, i), (skip_cost, 0)))
        if i < n:
            out.append(("ins", (node, k, i + 1), (1, 1)))
        if k == len(em):
            for w in sub.succ.get(node, ()):
                out.append((f"move>{w}", (w, 0, i), (0, 0)))
        return out

    # reachable state space and its edges
    edges = []
    seen = {start}
    dq = deque([start])
    while dq:
        state = dq.popleft()
        for name, nxt, cost in actions(state):
            edges.append((state, name, nxt, cost))
            if nxt not in seen:
                seen.add(nxt)
                dq.append(nxt)
    if goal not in seen:
        return None

    rev: dict = {}
    for src, _name, dst, cost in edges:
        rev.setdefault(dst, []).append((src, cost))

    # distance to goal over reversed edges
    dist = {goal: (0, 0)}
    heap = [((0, 0), 0, goal)]
    seq = 0
    settled_per_i: dict[int, int] = {}
    while heap:
        d, _, state = heapq.heappop(heap)
        if dist.get(state, None) != d or state not in seen:
            continue
        if beam is not None:
            c = settled_per_i.get(state[2], 0)
            if c > beam:
                continue
            settled_per_i[state[2]] = c + 1
        for src, cost in rev.get(state, ()):
            cand = (d[0] + cost[0], d[1] + cost[1])
            if cand < dist.get(src, (PROHIBITIVE_COST * 4, PROHIBITIVE_COST * 4)):
                dist[src] = cand
                seq += 1
                heapq.heappush(heap, (cand, seq, src))

    if start not in dist:
        return None

    order = {"match": 0, "pmatch": 1, "skip": 2, "ins": 3}
    total = dist[start]
    acts = []
    state = start
    while state != goal:
        best = None
        here = dist[state]
        for name, nxt, cost in sorted(
            actions(state), key=lambda a: (order.get(a[0].split(">")[0], 4), a[0])
        ):
            nd = dist.get(nxt)
            if nd is None:
                continue
            if (cost[0] + nd[0], cost[1] + nd[1]) == here:
                best = (name, nxt)
                break
        if best is None:  # pragma: no cover - dist is consistent by construction
            raise RuntimeError("alignment replay lost the optimal path")
        name, nxt = best
        node, k, i = state
        if name == "match":
            acts.append(("match", node, sub.emissions[node][k], i))
        elif name == "pmatch":
            acts.append(("pmatch", node, sym_fn[i], i))
        elif name == "skip":
            acts.append(("skip", node, sub.emissions[node][k]))
        elif name == "ins":
            acts.append(("ins", i))
        else:
            acts.append(("move", node, name.split(">", 1)[1]))
        state = nxt
    return total[0], total[1], acts


class _StepDraft:
    __slots__ = ("kind", "block_id", "callee", "span_id", "transit")

    def __init__(self, kind, block_id, callee, span_id):
        self.kind = kind
        self.block_id = block_id
        self.callee = callee
        self.span_id = span_id
        self.transit: list[TransitEdge] = []

    def freeze(self) -> PathStep:
        return PathStep(self.kind, self.block_id, self.callee, self.span_id,
                        tuple(self.transit))


def _emit_invocation(graph, trace, fn_key, children, resolutions, builder, inserts, beam):
    """Realize one invocation's alignment into the step builder."""
    syms = _build_symbols(trace, children, resolutions)

    def emit_insert(sym):
        span = sym.span if isinstance(sym, _SymIns) else sym.span
        builder.append(_StepDraft(KIND_INSERT, None, None, span.span_id))
        inserts.append((fn_key, span.operation))

    if not graph.has_body(fn_key):
        cost = ins = 0
        for sym in syms:
            emit_insert(sym)
            cost += 1
            ins += 1
            if isinstance(sym, _SymCall):
                c, i = _emit_invocation(graph, trace, sym.ref.key, sym.children,
                                        resolutions, builder, inserts, beam)
                cost += c
                ins += i
        return cost, ins

    solved = _solve(graph, fn_key, syms, beam)
    if solved is None:
        raise NoPathError(children[0].span_id if children else fn_key,
                          f"no path through function {fn_key!r}")
    cost, ins, acts = solved
    for act in acts:
        if act[0] in ("match", "pmatch"):
            _, node, callee, idx = act
            sym = syms[idx]
            builder.append(_StepDraft(KIND_MATCH, node, callee, sym.span.span_id))
            c, i = _emit_invocation(graph, trace, sym.ref.key, sym.children,
                                    resolutions, builder, inserts, beam)
            cost += c
            ins += i
        elif act[0] == "skip":
            _, node, callee = act
            builder.append(_StepDraft(KIND_SKIP, node, callee, None))
        elif act[0] == "ins":
            sym = syms[act[1]]
            emit_insert(sym)
            if isinstance(sym, _SymCall):
                c, i = _emit_invocation(graph, trace, sym.ref.key, sym.children,
                                        resolutions, builder, inserts, beam)
                cost += c
                ins += i
        else:
            _, src, dst = act
            builder[-1].transit.append(TransitEdge(fn_key, src, dst))
    return cost, ins


def align(graph: Cscfg, trace: Trace, mapping: SpanFunctionMap,
          cache: PathCache | None = None, resolutions: dict | None = None,
          beam: int | None = None) -> ExecutionPath:
    """Minimum-cost alignment of a trace onto the graph.

    Raises NoPathError when the root span does not resolve to a function the
    graph knows. Every span of the trace links to exactly one step.
    """
    if resolutions is None:
        resolutions = {s.span_id: mapping.resolve(s) for s in trace.spans}
    sig = trace_signature(trace, resolutions)
    if cache is not None:
        tmpl = cache.lookup(sig)
        if tmpl is not None:
            return _rehydrate(tmpl, trace)

    root = trace.root
    r = resolutions[root.span_id]
    if isinstance(r, Unmapped):
        raise NoPathError(root.span_id, f"root span does not map to a function ({r.reason})")
    if not graph.knows(r.key):
        raise NoPathError(root.span_id, f"entry function {r.key!r} absent from graph")

    builder: list[_StepDraft] = [
        _StepDraft(KIND_ENTER, entry_node(r.key), r.key, root.span_id)
    ]
    inserts: list[tuple[str, str]] = []
    cost, ins = _emit_invocation(graph, trace, r.key, trace.child_spans(root.span_id),
                                 resolutions, builder, inserts, beam)
    path = ExecutionPath(tuple(s.freeze() for s in builder), cost, ins)

    linked = path.span_ids()
    if len(linked) != len(trace) or set(linked) != set(trace.span_ids()):
        raise RuntimeError(f"alignment lost spans of trace {trace.trace_id!r}")

    for fn, op in inserts:
        graph.record_alignment_insert(fn, op)
    if cache is not None:
        cache.store(sig, _template(path, trace))
    return path


def _template(path: ExecutionPath, trace: Trace):
    slot = {s.span_id: i for i, s in enumerate(preorder_spans(trace))}
    steps = tuple(
        (s.kind, s.block_id, s.callee,
         slot[s.span_id] if s.span_id is not None else None, s.transit)
        for s in path.steps
    )
    return (steps, path.cost, path.insertions)


def _rehydrate(template, trace: Trace) -> ExecutionPath:
    steps_t, cost, ins = template
    order = preorder_spans(trace)
    steps = tuple(
        PathStep(kind, block_id, callee,
                 order[slot].span_id if slot is not None else None, transit)
        for kind, block_id, callee, slot, transit in steps_t
    )
    return ExecutionPath(steps, cost, ins)
