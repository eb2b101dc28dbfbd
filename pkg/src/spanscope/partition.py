"""Segmentation of an aligned trace into dominant span sets.

Walking the execution path in order, a cut is made whenever the control flow
passes a fork, i.e. a transfer out of a node with more than one flow
successor. The forked step and everything accumulated since the previous cut
form one set; spans inserted by alignment join the set of the step they
follow. Entering a callee and returning from it are not branches, so only
flow moves are examined. Each set is tagged with the first block entered
through the fork edge, which identifies the branch taken; the leading
segment is tagged "trunk".

A segment that contains only skipped blocks witnesses no spans and yields no
set; this only happens on alignments with positive cost.
"""

from __future__ import annotations

from dataclasses import dataclass

from .align import ExecutionPath
from .cscfg import Cscfg
from .model import Trace

TRUNK_TAG = "trunk"


@dataclass(frozen=True)
class DominantSpanSet:
    """Spans that witness one branch decision; keeping any one keeps the branch."""

    dss_id: str
    spans: tuple[str, ...]
    anchor: tuple[int, int]  # first and last step index covered
    branch_tag: str

    def __len__(self) -> int:
        return len(self.spans)


def partition(path: ExecutionPath, graph: Cscfg, trace: Trace) -> list[DominantSpanSet]:
    """Cut the path at forks; pure function of (path, graph)."""
    sets: list[DominantSpanSet] = []
    spans: list[str] = []
    seg_start = 0
    tag = TRUNK_TAG

    def close(end_index: int) -> str | None:
        nonlocal spans, seg_start
        if spans:
            sets.append(DominantSpanSet(
                dss_id=f"{trace.trace_id}:d{len(sets)}",
                spans=tuple(spans),
                anchor=(seg_start, end_index),
                branch_tag=tag,
            ))
        spans = []
        seg_start = end_index + 1
        return None

    for index, step in enumerate(path.steps):
        if step.span_id is not None:
            spans.append(step.span_id)
        fork_dst = None
        for move in step.transit:
            if graph.flow_out_degree(move.function, move.src) > 1:
                fork_dst = move.dst
                break
        if fork_dst is not None:
            close(index)
            tag = fork_dst
    close(len(path.steps) - 1)

    covered = [s for d in sets for s in d.spans]
    if len(covered) != len(trace) or set(covered) != set(trace.span_ids()):
        raise RuntimeError(f"partition does not cover trace {trace.trace_id!r}")
    return sets


def dss_signature(dss_list: list[DominantSpanSet]) -> tuple[str, ...]:
    """Ordered branch tags; equal signatures mean the same branches were taken."""
    return tuple(d.branch_tag for d in dss_list)
