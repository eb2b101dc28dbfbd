"""End-to-end engine: map, align, partition, select, reconstruct.

One pipeline owns the frozen graph, the span-function map, the path cache,
the scoring windows and the selection ledger. Traces stream through one at a
time with bounded memory; per-stage wall time is accumulated so the cost
split between trace partitioning and span selection stays observable.

Worker pools parallelize the read-only stages; selection updates shared
state and is serialized, so decisions under more than one worker may differ
in their least-recently-sampled fills. Run with one worker for byte
reproducibility.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .align import ExecutionPath, PathCache, align
from .cscfg import Cscfg, FunctionRef
from .mapping import SpanFunctionMap
from .model import Trace, exclusive_durations
from .partition import DominantSpanSet, partition
from .reconstruct import ReconstructedTrace, reconstruct, structural_fidelity
from .sampler import LrsLedger, SamplingConfig, SamplingDecision, sample_trace, span_key
from .scoring import ScoreBook

STAGE_MAP = "map"
STAGE_ALIGN = "align"
STAGE_PARTITION = "partition"
STAGE_SELECT = "select"
STAGE_RECONSTRUCT = "reconstruct"
PARTITION_STAGES = (STAGE_MAP, STAGE_ALIGN, STAGE_PARTITION)


@dataclass
class TraceResult:
    trace: Trace
    decision: SamplingDecision
    dss_list: list[DominantSpanSet]
    path: ExecutionPath


def path_forks(path: ExecutionPath, graph: Cscfg) -> tuple[str, ...]:
    """Ordered fork targets taken along a path; recorded on decisions."""
    forks = []
    for step in path.steps:
        for move in step.transit:
            if graph.flow_out_degree(move.function, move.src) > 1:
                forks.append(move.dst)
    return tuple(forks)


class SamplingPipeline:
    def __init__(self, graph: Cscfg, mapping: SpanFunctionMap, cfg: SamplingConfig,
                 cache_capacity: int = 4096, use_cache: bool = True):
        if not graph.frozen:
            graph.freeze()
        self.graph = graph
        self.mapping = mapping
        self.cfg = cfg
        self.cache = PathCache(cache_capacity) if use_cache else None
        self.scorebook = ScoreBook(window=cfg.window, min_obs=cfg.min_obs,
                                   z_cap=cfg.z_cap, theta=cfg.theta_quantile)
        self.ledger = LrsLedger(cfg.lrs_horizon)
        self.timings: dict[str, float] = {
            STAGE_MAP: 0.0, STAGE_ALIGN: 0.0, STAGE_PARTITION: 0.0,
            STAGE_SELECT: 0.0, STAGE_RECONSTRUCT: 0.0,
        }
        self.traces_seen = 0
        self._select_lock = threading.Lock()

    def _timed(self, stage: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        self.timings[stage] += time.perf_counter() - t0
        return out

    def _map_stage(self, trace: Trace):
        # per-span inputs for the rest of the pipeline: function resolution,
        # scoring key and exclusive duration
        resolve = self.mapping.resolve
        resolutions = {s.span_id: resolve(s) for s in trace.spans}
        keys = {s.span_id: span_key(resolutions[s.span_id], s) for s in trace.spans}
        return resolutions, keys, exclusive_durations(trace)

    def partition_trace(self, trace: Trace):
        """Map, align and partition only; no sampling state is touched."""
        resolutions, keys, exclusive = self._timed(STAGE_MAP, self._map_stage, trace)
        path = self._timed(STAGE_ALIGN, align, self.graph, trace, self.mapping,
                           self.cache, resolutions)
        dss_list = self._timed(STAGE_PARTITION, partition, path, self.graph, trace)
        return path, dss_list, resolutions, keys, exclusive

    def process(self, trace: Trace) -> TraceResult:
        path, dss_list, resolutions, keys, exclusive = self.partition_trace(trace)
        root_res = resolutions[trace.root.span_id]
        entry = root_res.key if isinstance(root_res, FunctionRef) else None
        with self._select_lock:
            decision = self._timed(
                STAGE_SELECT, sample_trace, trace, dss_list, self.scorebook,
                self.ledger, self.cfg, keys, exclusive,
                entry=entry, forks=path_forks(path, self.graph),
            )
        self.traces_seen += 1
        return TraceResult(trace, decision, dss_list, path)

    def process_many(self, traces, workers: int = 1):
        if workers <= 1:
            for trace in traces:
                yield self.process(trace)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(self.process, traces):
                yield result

    def reconstruct_result(self, result: TraceResult,
                           stats: dict | None = None) -> ReconstructedTrace:
        kept = [result.trace.span(sid) for sid in result.decision.kept]
        if stats is None:
            stats = self.scorebook.snapshot()
        return self._timed(STAGE_RECONSTRUCT, reconstruct, result.decision, kept,
                           self.graph, stats, self.mapping)

    def fidelity(self, result: TraceResult, rebuilt: ReconstructedTrace):
        return structural_fidelity(result.trace, rebuilt, self.mapping)

    def stats_snapshot(self) -> dict:
        return self.scorebook.snapshot()

    def timing_report(self) -> dict:
        total = sum(self.timings.values())
        per_trace = total / self.traces_seen if self.traces_seen else 0.0
        return {
            "stages_s": {k: round(v, 6) for k, v in sorted(self.timings.items())},
            "partition_side_s": round(sum(self.timings[s] for s in PARTITION_STAGES), 6),
            "selection_side_s": round(self.timings[STAGE_SELECT], 6),
            "traces": self.traces_seen,
            "per_trace_ms": round(per_trace * 1000, 3),
        }
