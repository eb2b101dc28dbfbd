"""Command-line entry point.

Subcommands: build-graph, sample, reconstruct, eval, stats-export. A JSON
configuration file may supply any option; explicit flags win over the file,
which wins over defaults. Outputs are deterministic for a fixed seed with
--workers 1; wall-clock timings go to a separate timing.txt that is expected
to differ between runs.

Exit codes: 0 success, 1 input or pipeline error, 2 configuration error.
Set SPANSCOPE_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import harness
from .cscfg import Cscfg, build_cscfg, patch_with_traces
from .errors import ConfigError, SpanscopeError
from .mapping import build_map, load_shared_dictionary
from .model import read_trace_file, span_from_dict
from .pipeline import SamplingPipeline
from .reconstruct import reconstruct, structural_fidelity
from .sampler import SamplingConfig, decision_from_dict
from .scoring import load_snapshot, save_snapshot

log = logging.getLogger("spanscope")


def _setup_logging() -> None:
    level = os.environ.get("SPANSCOPE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _setting(args, config: dict, name: str, default):
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _sampling_config(args, config: dict) -> SamplingConfig:
    try:
        return SamplingConfig(
            ratio=float(_setting(args, config, "ratio", 0.15)),
            theta_quantile=float(_setting(args, config, "theta", 0.90)),
            window=int(_setting(args, config, "window", 512)),
            min_obs=int(_setting(args, config, "min_obs", 8)),
            lrs_horizon=int(_setting(args, config, "lrs_horizon", 1024)),
            fixed_threshold=_setting(args, config, "fixed_threshold", None),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_mapping(graph: Cscfg, shared_dict_path: str | None):
    shared = load_shared_dictionary(shared_dict_path) if shared_dict_path else None
    return build_map(graph, shared)


def cmd_build_graph(args) -> int:
    graph = build_cscfg(_read_text(args.graph))
    if args.patch:
        mapping = _load_mapping(graph, args.shared_dict)
        report = patch_with_traces(graph, read_trace_file(args.patch), mapping)
        print(f"patched: {report.edges_added} edges, "
              f"{report.synthetic_blocks} synthetic blocks, "
              f"{report.unresolved_pairs} unresolved pairs")
    for fn in sorted(graph.functions):
        if not graph.has_body(fn):
            continue
        classes = graph.dominance(fn).classes()
        print(f"{fn}: {len(graph.blocks_of(fn))} blocks, "
              f"{len(classes)} mutual-dominance classes")
    counts = graph.provenance_counts()
    print("edge provenance: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    graph.freeze()
    graph.save_artifact(args.out)
    print(f"artifact written to {args.out}")
    return 0


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def cmd_sample(args) -> int:
    config = _load_config(args.config)
    cfg = _sampling_config(args, config)
    graph = Cscfg.load_artifact(args.graph)
    mapping = _load_mapping(graph, args.shared_dict)
    pipeline = SamplingPipeline(graph, mapping, cfg)
    workers = int(_setting(args, config, "workers", 1))

    os.makedirs(args.out, exist_ok=True)
    decisions_path = os.path.join(args.out, "decisions.ndjson")
    kept_path = os.path.join(args.out, "kept.ndjson")
    total_spans = total_kept = 0
    with open(decisions_path, "w", encoding="utf-8") as dfh, \
            open(kept_path, "w", encoding="utf-8") as kfh:
        for result in pipeline.process_many(read_trace_file(args.traces), workers=workers):
            dfh.write(result.decision.serialize() + "\n")
            kept_spans = [result.trace.span(sid).to_dict() for sid in result.decision.kept]
            kfh.write(json.dumps(
                {"trace_id": result.trace.trace_id, "spans": kept_spans},
                sort_keys=True, separators=(",", ":")) + "\n")
            total_spans += len(result.trace)
            total_kept += len(result.decision.kept)

    save_snapshot(pipeline.stats_snapshot(), os.path.join(args.out, "stats.json"))
    timing = pipeline.timing_report()
    with open(os.path.join(args.out, "timing.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"traces {timing['traces']}\n")
        fh.write(f"per_trace_ms {timing['per_trace_ms']}\n")
        fh.write(f"partition_side_s {timing['partition_side_s']}\n")
        fh.write(f"selection_side_s {timing['selection_side_s']}\n")
        for stage, secs in timing["stages_s"].items():
            fh.write(f"stage {stage} {secs}\n")
    ratio = total_kept / total_spans if total_spans else 0.0
    print(f"sampled {timing['traces']} traces, effective ratio {ratio:.4f}")
    print(f"partition side {timing['partition_side_s']}s, "
          f"selection side {timing['selection_side_s']}s, "
          f"{timing['per_trace_ms']} ms/trace")
    return 0


def _read_kept(path: str) -> dict[str, list]:
    kept: dict[str, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            kept[obj["trace_id"]] = [span_from_dict(s, obj["trace_id"])
                                     for s in obj["spans"]]
    return kept


def cmd_reconstruct(args) -> int:
    graph = Cscfg.load_artifact(args.graph)
    mapping = _load_mapping(graph, args.shared_dict)
    stats = load_snapshot(args.stats)
    kept = _read_kept(args.kept)
    originals = {}
    if args.traces:
        originals = {t.trace_id: t for t in read_trace_file(args.traces)}

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "reconstructed.ndjson")
    exact = n = 0
    err_sum = 0.0
    with open(out_path, "w", encoding="utf-8") as fh:
        with open(args.decisions, "r", encoding="utf-8") as dfh:
            for line in dfh:
                line = line.strip()
                if not line:
                    continue
                decision = decision_from_dict(json.loads(line))
                rebuilt = reconstruct(decision, kept.get(decision.trace_id, []),
                                      graph, stats, mapping)
                fh.write(rebuilt.serialize() + "\n")
                n += 1
                if decision.trace_id in originals:
                    report = structural_fidelity(originals[decision.trace_id],
                                                 rebuilt, mapping)
                    exact += 1 if report.structure_exact else 0
                    err_sum += report.duration_error
    if originals and n:
        fidelity = {"structure_exact_rate": round(exact / n, 6),
                    "mean_duration_error": round(err_sum / n, 6)}
        with open(os.path.join(args.out, "fidelity.json"), "w", encoding="utf-8") as fh:
            json.dump(fidelity, fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"structure_exact_rate {fidelity['structure_exact_rate']}")
    print(f"reconstructed {n} traces to {out_path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    spec_fields = {}
    for name in ("seed", "n_services", "n_functions_per_service", "branch_probability",
                 "max_call_depth", "shared_library_fraction", "url_span_probability"):
        if name in config:
            spec_fields[name] = config[name]
    if args.seed is not None:
        spec_fields["seed"] = args.seed
    spec = harness.SystemSpec(**spec_fields)
    n = args.n if args.n is not None else int(config.get("n_traces", 2000))
    doc, meta = harness.generate_system(spec)
    cfg = _sampling_config(args, config)
    report = harness.evaluate(doc, meta, spec, n, cfg=cfg, ratio=args.ratio)
    files = harness.write_report_files(report, args.out)
    for line in report.text_lines():
        print(line)
    print("wrote " + ", ".join(sorted(os.path.basename(f) for f in files)))
    return 0


def cmd_stats_export(args) -> int:
    config = _load_config(args.config)
    cfg = _sampling_config(args, config)
    graph = Cscfg.load_artifact(args.graph)
    mapping = _load_mapping(graph, args.shared_dict)
    pipeline = SamplingPipeline(graph, mapping, cfg)
    from .model import exclusive_durations
    from .sampler import span_key

    n = 0
    for trace in read_trace_file(args.traces):
        excl = exclusive_durations(trace)
        for span in sorted(trace.spans, key=lambda s: (s.start_time, s.span_id)):
            res = mapping.resolve(span)
            pipeline.scorebook.observe(span_key(res, span), float(excl[span.span_id]))
        n += 1
    save_snapshot(pipeline.stats_snapshot(), args.out)
    print(f"statistics over {n} traces written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spanscope",
        description="Span-level trace sampling with code-structure awareness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pb = sub.add_parser("build-graph", help="build and freeze a call-site graph artifact")
    pb.add_argument("--graph", required=True, help="call-graph document (JSON)")
    pb.add_argument("--out", required=True, help="artifact output path")
    pb.add_argument("--patch", help="trace file used to patch missing call edges")
    pb.add_argument("--shared-dict", help="shared-library dictionary (JSON list)")
    pb.set_defaults(func=cmd_build_graph)

    ps = sub.add_parser("sample", help="run map/align/partition/select over traces")
    ps.add_argument("--graph", required=True, help="graph artifact path")
    ps.add_argument("--traces", required=True, help="trace file (ndjson)")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--ratio", type=float, help="sampling ratio p in (0,1]")
    ps.add_argument("--theta", type=float, help="threshold quantile (default 0.90)")
    ps.add_argument("--window", type=int, help="sliding window size (default 512)")
    ps.add_argument("--seed", type=int, help="unused by sample; kept for config parity")
    ps.add_argument("--workers", type=int, help="worker threads (default 1)")
    ps.add_argument("--shared-dict", help="shared-library dictionary")
    ps.add_argument("--config", help="JSON config file")
    ps.set_defaults(func=cmd_sample)

    pr = sub.add_parser("reconstruct", help="rebuild full traces from decisions")
    pr.add_argument("--graph", required=True)
    pr.add_argument("--decisions", required=True)
    pr.add_argument("--kept", required=True)
    pr.add_argument("--stats", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--traces", help="original traces, enables the fidelity report")
    pr.add_argument("--shared-dict")
    pr.set_defaults(func=cmd_reconstruct)

    pe = sub.add_parser("eval", help="synthetic end-to-end evaluation")
    pe.add_argument("--out", required=True)
    pe.add_argument("--seed", type=int)
    pe.add_argument("--n", type=int, help="number of traces (default 2000)")
    pe.add_argument("--ratio", type=float, help="fixed ratio; default derives from the LSR")
    pe.add_argument("--theta", type=float)
    pe.add_argument("--window", type=int)
    pe.add_argument("--config", help="JSON config file (system and sampling fields)")
    pe.set_defaults(func=cmd_eval)

    px = sub.add_parser("stats-export", help="export per-key statistics from traces")
    px.add_argument("--graph", required=True)
    px.add_argument("--traces", required=True)
    px.add_argument("--out", required=True)
    px.add_argument("--shared-dict")
    px.add_argument("--window", type=int)
    px.add_argument("--config")
    px.set_defaults(func=cmd_stats_export)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SpanscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
