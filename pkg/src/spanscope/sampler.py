"""Span selection under a budget, one decision per trace.

The budget is split across dominant span sets: every set gets at least one
slot, and when floor(p * total spans) exceeds the number of sets the leftover
is distributed proportionally to set sizes, rounding down. Floors are not
redistributed, and with tight budgets the effective ratio exceeds p because
of the per-set minimum.

Within a set, spans whose robust Z-score reaches the per-key threshold are
taken first, highest score first; any remaining quota is filled by the least
recently sampled span types. Scoring observes in arrival order, so a span is
judged against statistics that do not yet include it.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

from .errors import EmptyPartitionError, PartitionMismatchError
from .model import Trace
from .partition import DominantSpanSet
from .scoring import DEFAULT_MIN_OBS, DEFAULT_THETA, DEFAULT_WINDOW, Z_CAP, ScoreBook


@dataclass(frozen=True)
class SamplingConfig:
    ratio: float = 0.15
    theta_quantile: float = DEFAULT_THETA
    window: int = DEFAULT_WINDOW
    min_obs: int = DEFAULT_MIN_OBS
    z_cap: float = Z_CAP
    lrs_horizon: int = 1024
    fixed_threshold: float | None = None  # overrides the quantile threshold when set

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")
        if not 0 < self.theta_quantile < 1:
            raise ValueError("theta_quantile must be in (0, 1)")


@dataclass(frozen=True)
class DssReport:
    dss_id: str
    branch_tag: str
    size: int
    budget: int
    picked_by_z: int
    picked_by_lrs: int


@dataclass(frozen=True)
class SamplingDecision:
    trace_id: str
    kept: tuple[str, ...]  # span ids, sorted
    entry: str | None  # function key of the root invocation
    dss_reports: tuple[DssReport, ...]
    effective_ratio: float
    kept_keys: tuple[str, ...] = ()  # span-type keys of kept spans, for the ledger
    forks: tuple[str, ...] | None = None  # fork targets of the aligned path, in order

    def to_dict(self) -> dict:
        out = {
            "trace_id": self.trace_id,
            "kept": list(self.kept),
            "entry": self.entry,
            "dss": [
                {
                    "dss_id": r.dss_id,
                    "branch_tag": r.branch_tag,
                    "size": r.size,
                    "budget": r.budget,
                    "picked_by_z": r.picked_by_z,
                    "picked_by_lrs": r.picked_by_lrs,
                }
                for r in self.dss_reports
            ],
            "effective_ratio": round(self.effective_ratio, 6),
        }
        if self.forks is not None:
            out["forks"] = list(self.forks)
        return out

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def decision_from_dict(obj: dict) -> SamplingDecision:
    reports = tuple(
        DssReport(r["dss_id"], r["branch_tag"], r["size"], r["budget"],
                  r["picked_by_z"], r["picked_by_lrs"])
        for r in obj.get("dss", [])
    )
    forks = obj.get("forks")
    return SamplingDecision(
        trace_id=obj["trace_id"],
        kept=tuple(obj["kept"]),
        entry=obj.get("entry"),
        dss_reports=reports,
        effective_ratio=obj.get("effective_ratio", 0.0),
        forks=tuple(forks) if forks is not None else None,
    )


class LrsLedger:
    """Selection history per span type within a horizon of recent decisions."""

    def __init__(self, horizon: int = 1024):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = horizon
        self.seq = 0
        self._picks: dict[str, deque[int]] = {}

    def _prune(self, key: str) -> None:
        picks = self._picks.get(key)
        if not picks:
            return
        floor = self.seq - self.horizon
        while picks and picks[0] <= floor:
            picks.popleft()

    def last_sampled(self, key: str) -> int | None:
        self._prune(key)
        picks = self._picks.get(key)
        return picks[-1] if picks else None

    def sampled_count(self, key: str) -> int:
        self._prune(key)
        picks = self._picks.get(key)
        return len(picks) if picks else 0

    def stats(self, key: str) -> tuple[int, int]:
        """(last sampled sequence or -1, count within horizon) in one pass."""
        self._prune(key)
        picks = self._picks.get(key)
        if not picks:
            return (-1, 0)
        return (picks[-1], len(picks))

    def note(self, keys) -> None:
        self.seq += 1
        for key in set(keys):
            self._picks.setdefault(key, deque()).append(self.seq)
            self._prune(key)


def allocate_budget(dss_list, p: float) -> list[int]:
    """Per-set budgets; follows the allocation arithmetic literally.

    Accepts DominantSpanSet objects or raw sizes. Floor rounding uses IEEE
    float semantics on p * total.
    """
    sizes = [len(d) if isinstance(d, DominantSpanSet) else int(d) for d in dss_list]
    if not sizes:
        raise EmptyPartitionError("no dominant span sets to allocate over")
    if any(s < 1 for s in sizes):
        raise EmptyPartitionError("every dominant span set must be non-empty")
    total_spans = sum(sizes)
    total_budget = math.floor(p * total_spans)
    n = len(sizes)
    if total_budget < n:
        return [1] * n
    leftover = total_budget - n
    return [1 + (leftover * size) // total_spans for size in sizes]


def record_decision(ledger: LrsLedger, decision: SamplingDecision) -> LrsLedger:
    """Advance the ledger by one decision; old entries decay past the horizon."""
    ledger.note(decision.kept_keys)
    return ledger


def sample_trace(trace: Trace, dss_list: list[DominantSpanSet], scorebook: ScoreBook,
                 ledger: LrsLedger, cfg: SamplingConfig,
                 span_keys: dict[str, str], exclusive: dict[str, int],
                 entry: str | None = None,
                 forks: tuple[str, ...] | None = None) -> SamplingDecision:
    """Apply the budgeted selection to one trace and update shared state.

    span_keys maps span ids to their scoring key; exclusive carries each
    span's exclusive duration. The ledger is advanced with the kept spans.
    """
    covered = [s for d in dss_list for s in d.spans]
    if len(covered) != len(trace) or set(covered) != set(trace.span_ids()):
        raise PartitionMismatchError(
            f"partition does not cover trace {trace.trace_id!r}"
        )

    arrival = sorted(trace.spans, key=lambda s: (s.start_time, s.span_id))
    z_of: dict[str, float] = {}
    flagged: dict[str, bool] = {}
    fixed = cfg.fixed_threshold
    window_for = scorebook.window_for
    for span in arrival:
        sid = span.span_id
        z, threshold = window_for(span_keys[sid]).score(exclusive[sid])
        if fixed is not None:
            threshold = fixed
        z_of[sid] = z.value
        flagged[sid] = z.value >= threshold

    budgets = allocate_budget(dss_list, cfg.ratio)
    kept: list[str] = []
    reports: list[DssReport] = []
    key_stats: dict[str, tuple[int, int]] = {}
    for dss, budget in zip(dss_list, budgets):
        candidates = sorted(
            (s for s in dss.spans if flagged[s]),
            key=lambda s: (-z_of[s], s),
        )
        picked = candidates[:budget]
        by_z = len(picked)
        if len(picked) < budget:
            chosen = set(picked)
            for s in dss.spans:
                k = span_keys[s]
                if k not in key_stats:
                    key_stats[k] = ledger.stats(k)
            remainder = sorted(
                (s for s in dss.spans if s not in chosen),
                key=lambda s: key_stats[span_keys[s]] + (s,),
            )
            picked = picked + remainder[: budget - len(picked)]
        kept.extend(picked)
        reports.append(DssReport(
            dss_id=dss.dss_id,
            branch_tag=dss.branch_tag,
            size=len(dss),
            budget=budget,
            picked_by_z=by_z,
            picked_by_lrs=len(picked) - by_z,
        ))

    kept_sorted = tuple(sorted(kept))
    decision = SamplingDecision(
        trace_id=trace.trace_id,
        kept=kept_sorted,
        entry=entry,
        dss_reports=tuple(reports),
        effective_ratio=len(kept_sorted) / len(trace),
        kept_keys=tuple(sorted({span_keys[s] for s in kept_sorted})),
        forks=forks,
    )
    record_decision(ledger, decision)
    return decision


def span_key(resolution, span) -> str:
    """Scoring and ledger key: the function when mapped, else the operation."""
    from .cscfg import FunctionRef

    if isinstance(resolution, FunctionRef):
        return resolution.key
    return f"op:{span.operation}"
