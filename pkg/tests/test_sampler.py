import random

import pytest

from spanscope.errors import EmptyPartitionError, PartitionMismatchError
from spanscope.partition import DominantSpanSet
from spanscope.sampler import (
    LrsLedger,
    SamplingConfig,
    SamplingDecision,
    allocate_budget,
    decision_from_dict,
    record_decision,
    sample_trace,
)
from spanscope.scoring import ScoreBook

from .conftest import make_span, make_trace
from .oracles import alg1_budgets


def dss(dss_id, spans, tag="trunk"):
    return DominantSpanSet(dss_id=dss_id, spans=tuple(spans), anchor=(0, 0), branch_tag=tag)


class TestAllocateBudget:
    def test_hand_example_three_and_nine(self):
        assert allocate_budget([3, 9], 0.5) == [2, 4]

    def test_tight_budget_floors_to_one_each(self):
        # total budget 1 < 3 sets: every set still gets one slot, so the
        # effective ratio 3/15 exceeds the requested 0.1
        assert allocate_budget([5, 5, 5], 0.1) == [1, 1, 1]

    def test_single_set_full_retention(self):
        assert allocate_budget([10], 1.0) == [10]

    def test_empty_partition_rejected(self):
        with pytest.raises(EmptyPartitionError):
            allocate_budget([], 0.5)
        with pytest.raises(EmptyPartitionError):
            allocate_budget([0, 3], 0.5)

    def test_accepts_dss_objects(self):
        sets = [dss("a", [f"s{i}" for i in range(3)]), dss("b", [f"t{i}" for i in range(9)])]
        assert allocate_budget(sets, 0.5) == [2, 4]

    def test_matches_transcription_randomized(self):
        rng = random.Random(77)
        for _ in range(1000):
            sizes = [rng.randint(1, 40) for _ in range(rng.randint(1, 12))]
            p = rng.choice([0.01, 0.05, rng.random(), 0.5, 0.9, 1.0])
            if p <= 0:
                p = 0.01
            assert allocate_budget(sizes, p) == alg1_budgets(sizes, p)

    def test_budget_never_exceeds_set_size(self):
        rng = random.Random(78)
        for _ in range(500):
            sizes = [rng.randint(1, 30) for _ in range(rng.randint(1, 8))]
            p = min(1.0, max(0.01, rng.random()))
            for b, size in zip(allocate_budget(sizes, p), sizes):
                assert 1 <= b <= size

    def test_monotone_in_p(self):
        rng = random.Random(79)
        for _ in range(200):
            sizes = [rng.randint(1, 30) for _ in range(rng.randint(1, 8))]
            p1 = rng.uniform(0.01, 0.99)
            p2 = min(1.0, p1 + rng.uniform(0, 1 - p1))
            assert sum(allocate_budget(sizes, p2)) >= sum(allocate_budget(sizes, p1))


def trace_of(n, trace_id="t1"):
    spans = [make_span("s00", trace_id=trace_id, operation="C.f0", start=0,
                       duration=10000)]
    for i in range(1, n):
        spans.append(make_span(f"s{i:02d}", trace_id=trace_id, parent="s00",
                               operation=f"C.f{i}", start=i * 10, duration=50))
    return make_trace(spans, trace_id=trace_id)


def setup_state(theta=0.9, window=64, min_obs=8, ratio=0.5, horizon=1024,
                fixed_threshold=None):
    cfg = SamplingConfig(ratio=ratio, theta_quantile=theta, window=window,
                        min_obs=min_obs, lrs_horizon=horizon,
                        fixed_threshold=fixed_threshold)
    book = ScoreBook(window=window, min_obs=min_obs, theta=theta)
    ledger = LrsLedger(horizon)
    return cfg, book, ledger


def keys_for(trace):
    return {s.span_id: f"k:{s.operation}" for s in trace.spans}


def run_sample(trace, dss_list, cfg, book, ledger, exclusive=None):
    keys = keys_for(trace)
    excl = exclusive or {s.span_id: s.duration for s in trace.spans}
    return sample_trace(trace, dss_list, book, ledger, cfg, keys, excl,
                        entry="svc:C.f0", forks=())


class TestSampleTrace:
    def test_high_z_span_wins_its_set(self):
        cfg, book, ledger = setup_state(ratio=0.34, fixed_threshold=2.0)
        # warm the windows so scores are meaningful
        for i in range(30):
            t = trace_of(3, trace_id=f"w{i}")
            run_sample(t, [dss("d0", ["s00", "s01", "s02"])], cfg, book, ledger)
        t = trace_of(3, trace_id="hot")
        excl = {"s00": 10000, "s01": 50 * 40, "s02": 50}  # s01 blows up
        decision = run_sample(t, [dss("d0", ["s00", "s01", "s02"])], cfg, book,
                              ledger, exclusive=excl)
        assert decision.kept == ("s01",)
        assert decision.dss_reports[0].picked_by_z == 1

    def test_low_z_fills_by_least_recently_sampled(self):
        cfg, book, ledger = setup_state(ratio=0.5, fixed_threshold=1e9)
        t = trace_of(4)
        sets = [dss("d0", ["s00", "s01", "s02", "s03"])]
        decision = run_sample(t, sets, cfg, book, ledger)
        assert decision.dss_reports[0].picked_by_z == 0
        assert decision.dss_reports[0].picked_by_lrs == 2

    def test_full_budget_keeps_everything(self):
        cfg, book, ledger = setup_state(ratio=1.0)
        t = trace_of(4)
        sets = [dss("d0", ["s00", "s01", "s02", "s03"])]
        decision = run_sample(t, sets, cfg, book, ledger)
        assert set(decision.kept) == set(t.span_ids())
        assert decision.effective_ratio == 1.0

    def test_every_set_contributes_at_least_one(self):
        cfg, book, ledger = setup_state(ratio=0.01)
        t = trace_of(9)
        sets = [
            dss("d0", ["s00", "s01", "s02"]),
            dss("d1", ["s03", "s04", "s05"], tag="b1"),
            dss("d2", ["s06", "s07", "s08"], tag="b2"),
        ]
        decision = run_sample(t, sets, cfg, book, ledger)
        for report in decision.dss_reports:
            assert report.picked_by_z + report.picked_by_lrs >= 1
        assert len(decision.kept) == 3
        assert decision.effective_ratio == pytest.approx(3 / 9)

    def test_partition_mismatch_rejected(self):
        cfg, book, ledger = setup_state()
        t = trace_of(3)
        with pytest.raises(PartitionMismatchError):
            run_sample(t, [dss("d0", ["s00", "s01"])], cfg, book, ledger)

    def test_deterministic_for_identical_state(self):
        def go():
            cfg, book, ledger = setup_state(ratio=0.4)
            out = []
            for i in range(10):
                t = trace_of(6, trace_id=f"t{i}")
                sets = [dss(f"t{i}:d0", ["s00", "s01", "s02"]),
                        dss(f"t{i}:d1", ["s03", "s04", "s05"], tag="x")]
                out.append(run_sample(t, sets, cfg, book, ledger))
            return out

        assert go() == go()

    def test_signature_preserved_in_kept_sets(self):
        cfg, book, ledger = setup_state(ratio=0.01)
        t = trace_of(6)
        sets = [dss("d0", ["s00", "s01"]), dss("d1", ["s02", "s03"], tag="b1"),
                dss("d2", ["s04", "s05"], tag="b2")]
        decision = run_sample(t, sets, cfg, book, ledger)
        kept = set(decision.kept)
        witnessed = [d.branch_tag for d in sets if kept & set(d.spans)]
        assert witnessed == ["trunk", "b1", "b2"]

    def test_decision_serialization_round_trip(self):
        cfg, book, ledger = setup_state(ratio=0.5)
        t = trace_of(4)
        decision = run_sample(t, [dss("d0", list(t.span_ids()))], cfg, book, ledger)
        back = decision_from_dict(__import__("json").loads(decision.serialize()))
        assert back.trace_id == decision.trace_id
        assert back.kept == decision.kept
        assert back.entry == decision.entry
        assert back.forks == decision.forks
        assert back.dss_reports == decision.dss_reports


class TestLedger:
    def test_first_decision_counts_once(self):
        ledger = LrsLedger(100)
        decision = SamplingDecision("t", ("s1",), "e", (), 1.0, kept_keys=("k1",))
        record_decision(ledger, decision)
        assert ledger.sampled_count("k1") == 1
        assert ledger.sampled_count("other") == 0
        assert ledger.last_sampled("k1") == 1
        assert ledger.last_sampled("other") is None

    def test_two_span_set_alternates_under_lrs(self):
        cfg, book, ledger = setup_state(ratio=0.5, fixed_threshold=1e9)
        picks = []
        for i in range(10):
            t = trace_of(2, trace_id=f"t{i}")
            decision = run_sample(t, [dss(f"d{i}", ["s00", "s01"])], cfg, book, ledger)
            picks.append(decision.kept[0])
        assert picks == ["s00", "s01"] * 5

    def test_horizon_decay(self):
        ledger = LrsLedger(2)
        for i in range(3):
            record_decision(ledger, SamplingDecision(
                f"t{i}", ("s",), "e", (), 1.0, kept_keys=("k",)))
        assert ledger.sampled_count("k") == 2  # the first decision decayed out

    def test_stats_match_separate_queries(self):
        ledger = LrsLedger(50)
        for i in range(5):
            record_decision(ledger, SamplingDecision(
                f"t{i}", ("s",), "e", (), 1.0, kept_keys=("k",)))
        assert ledger.stats("k") == (ledger.last_sampled("k"), ledger.sampled_count("k"))
        assert ledger.stats("none") == (-1, 0)
