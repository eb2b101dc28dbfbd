"""Span-level trace sampling driven by call-site control-flow knowledge."""

from .align import ExecutionPath, PathCache, PathStep, align, cache_lookup, trace_signature
from .cscfg import (
    Cscfg,
    DominanceInfo,
    FunctionRef,
    build_cscfg,
    compute_dominance,
    mutual_dominance_classes,
    parse_function_key,
    patch_with_traces,
)
from .errors import SpanscopeError
from .mapping import SpanFunctionMap, Unmapped, build_map
from .model import (
    Span,
    Trace,
    children_of,
    exclusive_duration,
    parse_trace,
    serialize_trace,
)
from .partition import DominantSpanSet, dss_signature, partition
from .pipeline import SamplingPipeline
from .reconstruct import ReconstructedTrace, reconstruct, structural_fidelity
from .sampler import (
    LrsLedger,
    SamplingConfig,
    SamplingDecision,
    allocate_budget,
    record_decision,
    sample_trace,
)
from .scoring import P2Quantile, RunningMedian, ScoreBook, SpanStatWindow, ZScore, p2_update

__version__ = "0.1.0"

__all__ = [
    "ExecutionPath", "PathCache", "PathStep", "align", "cache_lookup", "trace_signature",
    "Cscfg", "DominanceInfo", "FunctionRef", "build_cscfg", "compute_dominance",
    "mutual_dominance_classes", "parse_function_key", "patch_with_traces",
    "SpanscopeError",
    "SpanFunctionMap", "Unmapped", "build_map",
    "Span", "Trace", "children_of", "exclusive_duration", "parse_trace", "serialize_trace",
    "DominantSpanSet", "dss_signature", "partition",
    "SamplingPipeline",
    "ReconstructedTrace", "reconstruct", "structural_fidelity",
    "LrsLedger", "SamplingConfig", "SamplingDecision", "allocate_budget",
    "record_decision", "sample_trace",
    "P2Quantile", "RunningMedian", "ScoreBook", "SpanStatWindow", "ZScore", "p2_update",
]
