"""Rebuilds a full trace skeleton from sampled spans plus the graph.

The execution path is re-derived and every call the path implies becomes a
span: kept spans appear verbatim, the rest are inferred with durations filled
from historical statistics (mean exclusive duration per function; the
standard deviation rides along as an uncertainty annotation, the fill itself
is deterministic). Inferred intervals are packed left to right inside their
parent, bending around the real timestamps of sampled spans.

Decisions produced by the sampler carry the entry function and the ordered
fork choices of the original path, so replay is exact. Decisions without
fork records fall back to a search over paths consistent with the kept
spans' functions; if more than one structurally distinct path fits, the
reconstruction refuses and reports the candidate branches. Because the
sampler keeps at least one span per dominant span set, every branch of a
sampler decision is witnessed and the search cannot be ambiguous for them.

Unmapped kept spans have no place on the graph; they re-attach under their
original parent when it was kept, else under the tightest containing sampled
span, else under the root.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from .cscfg import Cscfg, FunctionRef, parse_function_key
from .errors import (
    AmbiguousPathError,
    ReconstructionError,
    UnknownEntryError,
)
from .mapping import SpanFunctionMap, Unmapped, build_map
from .model import Span, Trace
from .sampler import SamplingDecision

ORIGIN_SAMPLED = "sampled"
ORIGIN_INFERRED = "inferred"
SOURCE_HISTORICAL = "historical-mean"
SOURCE_ZERO = "zero-fallback"

_SEARCH_BUDGET = 8000


@dataclass(frozen=True)
class ReconstructedSpan:
    span: Span
    origin: str  # sampled | inferred
    function: str | None  # function key; None for unmapped sampled spans
    duration_source: str | None = None
    uncertainty_std: float | None = None

    def to_dict(self) -> dict:
        d = self.span.to_dict()
        d["origin"] = self.origin
        if self.origin == ORIGIN_INFERRED:
            d["duration_source"] = self.duration_source
            d["uncertainty_std"] = self.uncertainty_std
        return d


@dataclass(frozen=True)
class ReconstructedTrace:
    trace_id: str
    spans: tuple[ReconstructedSpan, ...]  # preorder

    def to_trace(self, clock_skew_slack: int = 0) -> Trace:
        return Trace(self.trace_id, [r.span for r in self.spans],
                     clock_skew_slack=clock_skew_slack)

    def inferred(self) -> list[ReconstructedSpan]:
        return [r for r in self.spans if r.origin == ORIGIN_INFERRED]

    def serialize(self) -> str:
        import json

        return json.dumps(
            {"trace_id": self.trace_id, "spans": [r.to_dict() for r in self.spans]},
            sort_keys=True, separators=(",", ":"),
        )


class _Node:
    __slots__ = ("fn", "block", "span", "children", "lo", "hi", "source", "std")

    def __init__(self, fn: str, block: str | None, span: Span | None):
        self.fn = fn
        self.block = block
        self.span = span
        self.children: list[_Node] = []
        self.lo = 0
        self.hi = 0
        self.source: str | None = None
        self.std: float | None = None


def _canonical(node: _Node):
    return (node.fn, node.block,
            node.span.span_id if node.span else None,
            tuple(_canonical(c) for c in node.children))


class _Walker:
    """Replays one path through the graph, consuming kept spans greedily.

    choices supplies fork decisions; when it runs dry the walk either follows
    a recorded script exactly (replay mode raises) or surfaces the open fork
    to the caller (search mode).
    """

    def __init__(self, graph: Cscfg, kept_seq: list[tuple[Span, str]], choices, strict: bool):
        self.graph = graph
        self.kept = deque(kept_seq)
        self.choices = deque(choices)
        self.strict = strict  # True: exhausted choices at a fork is an error
        self.pending_fork = None  # (options,) when a fork had no scripted choice
        self.taken: list[str] = []
        self.budget = _SEARCH_BUDGET

    def _tick(self):
        self.budget -= 1
        if self.budget < 0:
            raise ReconstructionError("path search budget exceeded")

    def _choose(self, succs: tuple[str, ...], exit_id: str) -> str | None:
        if self.choices:
            choice = self.choices.popleft()
            if choice not in succs:
                raise ReconstructionError(
                    f"recorded branch {choice!r} is not a successor here"
                )
            self.taken.append(choice)
            return choice
        if self.strict:
            # a trailing fork after the last witnessed span: the only
            # consistent continuation produced no spans, so head for the exit
            if exit_id in succs and not self.kept:
                self.taken.append(exit_id)
                return exit_id
            raise ReconstructionError("ran out of recorded branch choices")
        self.pending_fork = tuple(sorted(succs))
        return None

    def _consume_patched(self, holder: _Node, node: str, sub) -> bool:
        patched = sub.patched.get(node)
        if not patched or not self.kept:
            return False
        fn = self.kept[0][1]
        if fn not in patched:
            return False
        span = self.kept.popleft()[0]
        child = _Node(fn, node, span)
        holder.children.append(child)
        return self._walk_into(fn, child)

    def _walk_into(self, fn_key: str, holder: _Node) -> bool:
        if not self.graph.has_body(fn_key):
            return True
        sub = self.graph.subgraph(fn_key)
        node = sub.entry
        while node != sub.exit:
            self._tick()
            succs = sub.succ.get(node, ())
            if not succs:
                raise ReconstructionError(f"{fn_key}: dead end at {node!r}")
            if len(succs) == 1:
                node = succs[0]
            else:
                chosen = self._choose(succs, sub.exit)
                if chosen is None:
                    return False  # surface the open fork
                node = chosen
            if node == sub.exit:
                break
            while self._consume_patched(holder, node, sub):
                pass
            ok = True
            for callee in sub.emissions.get(node, ()):
                span = None
                if self.kept and self.kept[0][1] == callee:
                    span = self.kept.popleft()[0]
                child = _Node(callee, node, span)
                holder.children.append(child)
                ok = self._walk_into(callee, child)
                if not ok:
                    return False
                while self._consume_patched(holder, node, sub):
                    pass
            if not ok:
                return False
        return True

    def run(self, entry_key: str) -> _Node | None:
        root_span = None
        if self.kept and self.kept[0][1] == entry_key and self.kept[0][0].parent_id is None:
            root_span = self.kept.popleft()[0]
        root = _Node(entry_key, None, root_span)
        done = self._walk_into(entry_key, root)
        if not done:
            return None
        return root


def _derive_replay(graph, entry_key, forks, kept_seq, trace_id) -> _Node:
    walker = _Walker(graph, kept_seq, forks, strict=True)
    root = walker.run(entry_key)
    if root is None:  # pragma: no cover - strict walker never surfaces forks
        raise ReconstructionError("replay stalled at a fork")
    if walker.choices:
        raise ReconstructionError(f"trace {trace_id!r}: unused branch records remain")
    if walker.kept:
        missing = [s.span_id for s, _ in walker.kept]
        raise ReconstructionError(
            f"trace {trace_id!r}: kept spans not explained by the recorded path: {missing}"
        )
    return root


def _derive_search(graph, entry_key, kept_seq, trace_id) -> _Node:
    """Enumerate fork choices until two structurally distinct solutions appear."""
    solutions: dict = {}
    stack: list[tuple[str, ...]] = [()]
    explored = 0
    while stack:
        prefix = stack.pop()
        explored += 1
        if explored > _SEARCH_BUDGET:
            raise ReconstructionError("path search budget exceeded")
        walker = _Walker(graph, list(kept_seq), prefix, strict=False)
        try:
            root = walker.run(entry_key)
        except ReconstructionError:
            continue
        if root is None:
            for option in sorted(walker.pending_fork, reverse=True):
                stack.append(tuple(walker.taken) + (option,))
            continue
        if walker.kept:
            continue  # not all kept spans explained: inconsistent branch
        key = _canonical(root)
        if key not in solutions:
            solutions[key] = (tuple(walker.taken), root)
            if len(solutions) == 2:
                break
    if not solutions:
        raise ReconstructionError(
            f"trace {trace_id!r}: kept spans are inconsistent with the graph"
        )
    if len(solutions) > 1:
        (c1, _), (c2, _) = solutions.values()
        tags = []
        for a, b in zip(c1, c2):
            if a != b:
                tags = [a, b]
                break
        if not tags:
            tags = [c1[len(c2):][:1] or c1[-1:], c2[len(c1):][:1] or c2[-1:]]
            tags = [t[0] for t in tags if t]
        raise AmbiguousPathError(trace_id, tags)
    (_, root), = solutions.values()
    return root


def _stat(stats: dict, key: str):
    entry = stats.get("keys", {}).get(key)
    if entry is None or entry.get("count", 0) == 0:
        return None
    return entry


def _natural_width(node: _Node, stats: dict) -> int:
    if node.span is not None:
        return node.span.duration
    entry = _stat(stats, node.fn)
    if entry is None:
        base = 0
        node.source = SOURCE_ZERO
        node.std = None
    else:
        base = max(0, int(round(entry["mean"])))
        node.source = SOURCE_HISTORICAL
        node.std = round(float(entry["std"]), 3)
    width = base + sum(_natural_width(c, stats) for c in node.children)
    lo, hi = _anchor_bounds(node)
    if lo is not None:
        width = max(width, hi - lo)
    return width


def _anchor_bounds(node: _Node):
    lo = hi = None
    if node.span is not None:
        lo, hi = node.span.start_time, node.span.end_time
    for c in node.children:
        clo, chi = _anchor_bounds(c)
        if clo is not None:
            lo = clo if lo is None else min(lo, clo)
            hi = chi if hi is None else max(hi, chi)
    return lo, hi


def _place(node: _Node, lo: int, hi: int, stats: dict, widths: dict) -> None:
    """Assign [lo, hi) to an inferred node's children; sampled spans anchor."""
    node.lo, node.hi = lo, hi
    cursor = lo
    kids = node.children
    for idx, child in enumerate(kids):
        if child.span is not None:
            clo, chi = child.span.start_time, child.span.end_time
            _place_children_of_sampled(child, stats, widths)
            child.lo, child.hi = clo, chi
            cursor = max(cursor, chi)
            continue
        alo, ahi = _anchor_bounds(child)
        w = widths[id(child)]
        if alo is not None:
            clo = alo
            chi = max(ahi, min(alo + w, hi) if hi > alo else ahi)
        else:
            nxt = hi
            for later in kids[idx + 1:]:
                blo, _ = _anchor_bounds(later)
                if blo is not None:
                    nxt = blo
                    break
            avail = max(0, nxt - cursor)
            clo = cursor
            chi = clo + min(w, avail)
        _place(child, clo, chi, stats, widths)
        cursor = max(cursor, chi)


def _place_children_of_sampled(node: _Node, stats: dict, widths: dict) -> None:
    _place(node, node.span.start_time, node.span.end_time, stats, widths)
    node.lo, node.hi = node.span.start_time, node.span.end_time


def _collect_widths(node: _Node, stats: dict, widths: dict) -> None:
    widths[id(node)] = _natural_width(node, stats)
    for c in node.children:
        _collect_widths(c, stats, widths)


def reconstruct(decision: SamplingDecision, kept_spans: list[Span], graph: Cscfg,
                stats: dict, mapping: SpanFunctionMap | None = None) -> ReconstructedTrace:
    """Rebuild the full trace implied by a decision.

    stats is a statistics snapshot as produced by ScoreBook.snapshot(). Kept
    spans appear with id, timing and attributes untouched; their parent link
    is rewired when the original parent was not kept.
    """
    if not kept_spans:
        raise ReconstructionError("no kept spans to reconstruct from")
    if decision.entry is None:
        raise UnknownEntryError(f"decision for {decision.trace_id!r} carries no entry function")
    if not graph.knows(decision.entry):
        raise UnknownEntryError(f"entry function {decision.entry!r} absent from graph")
    if mapping is None:
        mapping = build_map(graph)

    ordered = sorted(kept_spans, key=lambda s: (s.start_time, s.span_id))
    kept_seq: list[tuple[Span, str]] = []
    orphans: list[Span] = []
    for span in ordered:
        r = mapping.resolve(span)
        if isinstance(r, Unmapped):
            orphans.append(span)
        else:
            kept_seq.append((span, r.key))

    if decision.forks is not None:
        root = _derive_replay(graph, decision.entry, list(decision.forks),
                              kept_seq, decision.trace_id)
    else:
        root = _derive_search(graph, decision.entry, kept_seq, decision.trace_id)

    widths: dict[int, int] = {}
    _collect_widths(root, stats, widths)

    # root interval: verbatim when sampled, otherwise anchored left on the
    # earliest sampled evidence (orphans included so they stay containable)
    if root.span is not None:
        _place_children_of_sampled(root, stats, widths)
    else:
        alo, _ahi = _anchor_bounds(root)
        for o in orphans:
            alo = o.start_time if alo is None else min(alo, o.start_time)
        lo = alo if alo is not None else 0
        hi = lo + widths[id(root)]
        for o in orphans:
            hi = max(hi, o.end_time)
        _place(root, lo, hi, stats, widths)

    rspans: list[ReconstructedSpan] = []
    kept_ids = {s.span_id for s in kept_spans}
    counter = 0

    def materialize(node: _Node, parent_id: str | None) -> None:
        nonlocal counter
        index = counter
        counter += 1
        if node.span is not None:
            span = node.span if node.span.parent_id == parent_id else node.span.with_parent(parent_id)
            rspans.append(ReconstructedSpan(span, ORIGIN_SAMPLED, node.fn))
            sid = span.span_id
        else:
            ref = parse_function_key(node.fn)
            sid = f"{decision.trace_id}:inf:{index}"
            span = Span(
                span_id=sid,
                trace_id=decision.trace_id,
                parent_id=parent_id,
                operation=ref.operation,
                service=ref.service,
                start_time=node.lo,
                duration=node.hi - node.lo,
                attributes={},
            )
            rspans.append(ReconstructedSpan(span, ORIGIN_INFERRED, node.fn,
                                            node.source, node.std))
        for child in node.children:
            materialize(child, sid)

    materialize(root, None)

    root_id = rspans[0].span.span_id
    sampled_sorted = sorted(
        (r.span for r in rspans if r.origin == ORIGIN_SAMPLED),
        key=lambda s: (s.duration, s.span_id),
    )
    for orphan in orphans:
        if orphan.parent_id in kept_ids or orphan.parent_id in {r.span.span_id for r in rspans}:
            parent = orphan.parent_id
        else:
            parent = None
            for cand in sampled_sorted:
                if cand.span_id != orphan.span_id and \
                        cand.start_time <= orphan.start_time and orphan.end_time <= cand.end_time:
                    parent = cand.span_id
                    break
            if parent is None:
                parent = root_id
        span = orphan if orphan.parent_id == parent else orphan.with_parent(parent)
        rspans.append(ReconstructedSpan(span, ORIGIN_SAMPLED, None))

    return ReconstructedTrace(decision.trace_id, tuple(rspans))


@dataclass(frozen=True)
class FidelityReport:
    structure_exact: bool
    span_recall: float
    duration_error: float
    inferred_count: int


def _label_tree_original(trace: Trace, mapping: SpanFunctionMap):
    def build(span: Span):
        r = mapping.resolve(span)
        kids = []
        for c in trace.child_spans(span.span_id):
            sub = build(c)
            if sub[0] is None:
                kids.extend(sub[2])  # unmapped spans are transparent
            else:
                kids.append(sub)
        label = None if isinstance(r, Unmapped) else r.key
        return (label, span, kids)

    return build(trace.root)


def _label_tree_rebuilt(rebuilt: ReconstructedTrace):
    children: dict[str | None, list[ReconstructedSpan]] = {}
    for r in rebuilt.spans:
        children.setdefault(r.span.parent_id, []).append(r)

    def build(r: ReconstructedSpan):
        kids = []
        for c in children.get(r.span.span_id, []):
            sub = build(c)
            if sub[0] is None:
                kids.extend(sub[2])
            else:
                kids.append(sub)
        return (r.function, r, kids)

    roots = children.get(None, [])
    if len(roots) != 1:
        raise ReconstructionError("rebuilt trace must have exactly one root")
    return build(roots[0])


def structural_fidelity(original: Trace, rebuilt: ReconstructedTrace,
                        mapping: SpanFunctionMap | None = None) -> FidelityReport:
    """Compare the function trees of an original trace and its reconstruction.

    Unmapped spans have no function and are transparent on both sides: their
    children are promoted, so structure compares what the graph can explain.
    span_recall counts original spans present verbatim or re-inferred at the
    matching position; duration_error is the mean relative error over the
    positionally matched inferred spans.
    """
    if original.trace_id != rebuilt.trace_id:
        raise ValueError("trace ids differ")
    if mapping is None:
        raise ValueError("structural_fidelity needs the span-function map")

    otree = _label_tree_original(original, mapping)
    rtree = _label_tree_rebuilt(rebuilt)

    matched_ids: set[str] = set()
    inferred_pairs: list[tuple[Span, ReconstructedSpan]] = []
    exact = True

    def walk(onode, rnode):
        nonlocal exact
        olabel, ospan, okids = onode
        rlabel, rspan, rkids = rnode
        if olabel != rlabel:
            exact = False
            return
        if rspan.origin == ORIGIN_SAMPLED and rspan.span.span_id == ospan.span_id:
            matched_ids.add(ospan.span_id)
        elif rspan.origin == ORIGIN_INFERRED:
            matched_ids.add(ospan.span_id)
            inferred_pairs.append((ospan, rspan))
        else:
            matched_ids.add(ospan.span_id)
        if len(okids) != len(rkids):
            exact = False
        for oc, rc in zip(okids, rkids):
            walk(oc, rc)

    walk(otree, rtree)

    kept_ids = {r.span.span_id for r in rebuilt.spans if r.origin == ORIGIN_SAMPLED}
    represented = set(matched_ids)
    for span in original.spans:
        if span.span_id in kept_ids:
            represented.add(span.span_id)
    recall = len(represented) / len(original)

    errors = [
        abs(ospan.duration - rspan.span.duration) / ospan.duration
        for ospan, rspan in inferred_pairs
        if ospan.duration > 0
    ]
    mean_err = sum(errors) / len(errors) if errors else 0.0
    if math.isnan(mean_err):  # pragma: no cover
        mean_err = 0.0

    return FidelityReport(
        structure_exact=exact,
        span_recall=recall,
        duration_error=mean_err,
        inferred_count=len(rebuilt.inferred()),
    )
