"""Call-site control flow graph: construction, dominance, runtime patching.

The graph keeps only blocks that make calls. Each function contributes a
small node graph consisting of a virtual entry node, a virtual exit node and
its call-site blocks; flow edges are contracted across call-free blocks of
the original control flow. Call edges link a block to the callee's entry and
are kept separate from flow edges, so dominance stays intraprocedural.

Block A dominates B when every entry-to-B path passes through A;
post-dominance is the dual from the exit. Two blocks are mutually dominant
(control equivalent) when each entry-to-exit path contains either both or
neither, which is exactly (A dom B and B pdom A) or the converse.
"""

from __future__ import annotations

import json
import threading
from collections import Counter, deque
from dataclasses import dataclass, field

from .errors import (
    DanglingCalleeError,
    GraphFrozenError,
    MalformedDocumentError,
    UnreachableBlockError,
)

SHARED_SERVICE = "SHARED"

SCHEMA_VERSION = 1

PROV_STATIC = "static"
PROV_DYNAMIC = "dynamic-patch"
PROV_ALIGNMENT = "alignment-insert"

_ENTRY_SUFFIX = "#@entry"
_EXIT_SUFFIX = "#@exit"


@dataclass(frozen=True)
class FunctionRef:
    """Identity of a function: deployment unit, class and function name."""

    service: str
    class_name: str
    function_name: str

    @property
    def key(self) -> str:
        return f"{self.service}:{self.class_name}.{self.function_name}"

    @property
    def operation(self) -> str:
        return f"{self.class_name}.{self.function_name}"

    def __post_init__(self):
        if not (self.service and self.class_name and self.function_name):
            raise ValueError("FunctionRef fields must be non-empty")


def parse_function_key(key: str) -> FunctionRef:
    """Inverse of FunctionRef.key: 'service:Class.Function' with last-dot split."""
    if ":" not in key:
        raise MalformedDocumentError(f"function key {key!r} missing ':'")
    service, rest = key.split(":", 1)
    if "." not in rest:
        raise MalformedDocumentError(f"function key {key!r} missing '.' in Class.Function part")
    class_name, function_name = rest.rsplit(".", 1)
    return FunctionRef(service, class_name, function_name)


@dataclass(frozen=True)
class CallSiteBlock:
    """A basic block that makes at least one call; callees in program order."""

    block_id: str
    owner: str  # function key
    callees: tuple[str, ...]  # callee function keys


@dataclass(frozen=True)
class FunctionSubgraph:
    """Read-only view of one function's nodes, used by alignment and replay."""

    function: str
    entry: str
    exit: str
    succ: dict[str, tuple[str, ...]]
    emissions: dict[str, tuple[str, ...]]
    patched: dict[str, frozenset[str]]


@dataclass(frozen=True)
class DominanceInfo:
    """Per-function dominance facts over the contracted node graph."""

    function: str
    idom: dict[str, str | None]
    ipdom: dict[str, str | None]
    equiv_class: dict[str, str]  # call-site block -> class id (min member)
    dom_sets: dict[str, frozenset[str]]
    pdom_sets: dict[str, frozenset[str]]
    mandatory: frozenset[str]  # blocks on every entry-to-exit path

    def classes(self) -> list[frozenset[str]]:
        grouped: dict[str, set[str]] = {}
        for block, cid in self.equiv_class.items():
            grouped.setdefault(cid, set()).add(block)
        return [frozenset(grouped[cid]) for cid in sorted(grouped)]


def entry_node(function_key: str) -> str:
    return function_key + _ENTRY_SUFFIX


def exit_node(function_key: str) -> str:
    return function_key + _EXIT_SUFFIX


class Cscfg:
    """The shared code-knowledge substrate.

    Single-writer while building and patching; call freeze() before handing
    the graph to concurrent readers. Dominance results are cached per
    function under a lock. The alignment-insert sink stays mutable after
    freeze; it records observational facts, not control flow.
    """

    def __init__(self):
        self.functions: dict[str, FunctionRef] = {}
        self.external: set[str] = set()
        self.blocks: dict[str, CallSiteBlock] = {}
        self._fn_blocks: dict[str, list[str]] = {}
        self._succ: dict[str, dict[str, tuple[str, ...]]] = {}
        self._flow_prov: dict[tuple[str, str], str] = {}
        self.call_edges: dict[tuple[str, str], str] = {}  # (block_id, callee key) -> provenance
        self._frozen = False
        self._dom_cache: dict[str, DominanceInfo] = {}
        self._dom_lock = threading.Lock()
        self._insert_lock = threading.Lock()
        self.alignment_inserts: Counter = Counter()  # (function key, operation) -> count
        self._synthetic_blocks: set[str] = set()
        self._sub_cache: dict[str, "FunctionSubgraph"] = {}
        self._sub_lock = threading.Lock()

    # -- construction ----------------------------------------------------

    def _check_mutable(self):
        if self._frozen:
            raise GraphFrozenError("graph is frozen")
        with self._sub_lock:
            self._sub_cache.clear()
        with self._dom_lock:
            self._dom_cache.clear()

    def add_function(self, ref: FunctionRef) -> None:
        self._check_mutable()
        self.functions.setdefault(ref.key, ref)

    def declare_external(self, key: str) -> None:
        self._check_mutable()
        self.external.add(key)

    def _add_nodes_for(self, fn_key: str) -> None:
        if fn_key not in self._succ:
            self._fn_blocks.setdefault(fn_key, [])
            self._succ[fn_key] = {entry_node(fn_key): (), exit_node(fn_key): ()}

    def add_block(self, fn_key: str, block_id: str, callees: tuple[str, ...],
                  provenance: str = PROV_STATIC) -> None:
        self._check_mutable()
        if not callees:
            raise MalformedDocumentError(f"block {block_id!r} has no callees")
        if block_id in self.blocks:
            raise MalformedDocumentError(f"duplicate block id {block_id!r}")
        self._add_nodes_for(fn_key)
        self.blocks[block_id] = CallSiteBlock(block_id, fn_key, tuple(callees))
        self._fn_blocks[fn_key].append(block_id)
        self._succ[fn_key][block_id] = ()
        if provenance == PROV_DYNAMIC:
            self._synthetic_blocks.add(block_id)
        for c in callees:
            self.call_edges[(block_id, c)] = provenance

    def add_flow_edge(self, fn_key: str, src: str, dst: str,
                      provenance: str = PROV_STATIC) -> None:
        self._check_mutable()
        succ = self._succ[fn_key]
        if src not in succ or dst not in succ:
            raise MalformedDocumentError(f"flow edge {src!r}->{dst!r} names unknown node")
        if dst not in succ[src]:
            succ[src] = tuple(sorted(succ[src] + (dst,)))
            self._flow_prov[(src, dst)] = provenance

    def add_call_edge(self, block_id: str, callee_key: str, provenance: str) -> bool:
        self._check_mutable()
        if (block_id, callee_key) in self.call_edges:
            return False
        self.call_edges[(block_id, callee_key)] = provenance
        return True

    def freeze(self) -> "Cscfg":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    # -- queries ---------------------------------------------------------

    def knows(self, fn_key: str) -> bool:
        return fn_key in self.functions or fn_key in self.external

    def has_body(self, fn_key: str) -> bool:
        return bool(self._fn_blocks.get(fn_key))

    def blocks_of(self, fn_key: str) -> list[str]:
        return list(self._fn_blocks.get(fn_key, []))

    def successors(self, fn_key: str, node: str) -> tuple[str, ...]:
        return self._succ.get(fn_key, {}).get(node, ())

    def flow_out_degree(self, fn_key: str, node: str) -> int:
        return len(self.successors(fn_key, node))

    def nodes_of(self, fn_key: str) -> list[str]:
        return sorted(self._succ.get(fn_key, {}))

    def flow_edges_of(self, fn_key: str):
        for src in self.nodes_of(fn_key):
            for dst in self.successors(fn_key, src):
                yield src, dst, self._flow_prov.get((src, dst), PROV_STATIC)

    def patched_callees(self, block_id: str) -> frozenset[str]:
        block = self.blocks.get(block_id)
        statics = set(block.callees) if block else set()
        return frozenset(
            callee
            for (bid, callee), prov in self.call_edges.items()
            if bid == block_id and prov == PROV_DYNAMIC and callee not in statics
        )

    def has_call_edge(self, caller_key: str, callee_key: str) -> bool:
        for bid in self._fn_blocks.get(caller_key, []):
            if (bid, callee_key) in self.call_edges:
                return True
        return False

    def subgraph(self, fn_key: str) -> "FunctionSubgraph":
        with self._sub_lock:
            sub = self._sub_cache.get(fn_key)
        if sub is not None:
            return sub
        patched: dict[str, frozenset[str]] = {}
        emissions: dict[str, tuple[str, ...]] = {}
        for node in self.nodes_of(fn_key):
            block = self.blocks.get(node)
            emissions[node] = block.callees if block else ()
            extra = self.patched_callees(node) if block else frozenset()
            if extra:
                patched[node] = extra
        sub = FunctionSubgraph(
            function=fn_key,
            entry=entry_node(fn_key),
            exit=exit_node(fn_key),
            succ={n: self.successors(fn_key, n) for n in self.nodes_of(fn_key)},
            emissions=emissions,
            patched=patched,
        )
        with self._sub_lock:
            self._sub_cache[fn_key] = sub
        return sub

    def record_alignment_insert(self, fn_key: str, operation: str) -> None:
        with self._insert_lock:
            self.alignment_inserts[(fn_key, operation)] += 1

    def provenance_counts(self) -> dict[str, int]:
        counts = Counter(self.call_edges.values())
        counts.update(self._flow_prov.values())
        with self._insert_lock:
            counts[PROV_ALIGNMENT] += sum(self.alignment_inserts.values())
        return dict(counts)

    # -- dominance -------------------------------------------------------

    def dominance(self, fn_key: str) -> DominanceInfo:
        with self._dom_lock:
            info = self._dom_cache.get(fn_key)
        if info is not None:
            return info
        info = compute_dominance(self, fn_key)
        with self._dom_lock:
            self._dom_cache[fn_key] = info
        return info

    def _invalidate_dominance(self, fn_key: str) -> None:
        with self._dom_lock:
            self._dom_cache.pop(fn_key, None)

    # -- serialization ---------------------------------------------------

    def to_artifact_dict(self) -> dict:
        fns = []
        for key in sorted(self._succ):
            fns.append({
                "function": key,
                "blocks": [
                    {"id": bid, "callees": list(self.blocks[bid].callees),
                     "synthetic": bid in self._synthetic_blocks}
                    for bid in self._fn_blocks[key]
                ],
                "edges": [[src, dst, prov] for src, dst, prov in self.flow_edges_of(key)],
            })
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "cscfg-artifact",
            "functions": sorted(self.functions),
            "external_functions": sorted(self.external),
            "graphs": fns,
            "call_edges": [
                [bid, callee, prov]
                for (bid, callee), prov in sorted(self.call_edges.items())
            ],
        }

    @classmethod
    def from_artifact_dict(cls, obj: dict) -> "Cscfg":
        if obj.get("schema_version") != SCHEMA_VERSION or obj.get("kind") != "cscfg-artifact":
            raise MalformedDocumentError("not a cscfg artifact")
        graph = cls()
        for key in obj["functions"]:
            graph.add_function(parse_function_key(key))
        for key in obj["external_functions"]:
            graph.declare_external(key)
        for fn in obj["graphs"]:
            key = fn["function"]
            graph._add_nodes_for(key)
            for b in fn["blocks"]:
                graph.add_block(
                    key, b["id"], tuple(b["callees"]),
                    provenance=PROV_DYNAMIC if b.get("synthetic") else PROV_STATIC,
                )
            for src, dst, prov in fn["edges"]:
                graph.add_flow_edge(key, src, dst, provenance=prov)
        for bid, callee, prov in obj.get("call_edges", []):
            graph.call_edges[(bid, callee)] = prov
        return graph

    def save_artifact(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_artifact_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load_artifact(cls, path) -> "Cscfg":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_artifact_dict(json.load(fh))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise MalformedDocumentError(msg)


def build_cscfg(call_graph_doc) -> Cscfg:
    """Build the graph from a declarative call-graph document.

    The document lists functions with their blocks (id plus ordered callees,
    possibly empty), intraprocedural flow edges, entry/exit designation and
    an external-functions list. Blocks without calls are dropped and flow
    edges are contracted across them.
    """
    if isinstance(call_graph_doc, str):
        try:
            doc = json.loads(call_graph_doc)
        except json.JSONDecodeError as exc:
            raise MalformedDocumentError(f"invalid JSON: {exc}") from exc
    else:
        doc = call_graph_doc
    _require(isinstance(doc, dict), "call-graph document must be an object")
    _require(doc.get("schema_version") == SCHEMA_VERSION,
             f"unsupported schema_version {doc.get('schema_version')!r}")
    _require(isinstance(doc.get("functions"), list), "missing functions list")

    graph = Cscfg()
    defined: set[str] = set()
    for fn in doc["functions"]:
        _require(isinstance(fn, dict) and "function" in fn, "function entry missing 'function'")
        key = fn["function"]
        _require(key not in defined, f"function {key!r} defined twice")
        defined.add(key)
        graph.add_function(parse_function_key(key))
    for key in doc.get("external_functions", []):
        parse_function_key(key)
        graph.declare_external(key)

    for fn in doc["functions"]:
        key = fn["function"]
        blocks = fn.get("blocks", [])
        if not blocks:
            continue  # function with zero call sites contributes no blocks
        local_callees: dict[str, tuple[str, ...]] = {}
        for b in blocks:
            _require(isinstance(b, dict) and "id" in b, f"{key}: block missing id")
            _require(b["id"] not in local_callees, f"{key}: duplicate block {b['id']!r}")
            callees = tuple(b.get("callees", []))
            for c in callees:
                if c not in defined and c not in graph.external:
                    raise DanglingCalleeError(c, key)
            local_callees[b["id"]] = callees
        entry = fn.get("entry")
        _require(entry in local_callees, f"{key}: entry {entry!r} is not a block")
        exits = fn.get("exits", [])
        _require(isinstance(exits, list) and exits, f"{key}: missing exits")
        for e in exits:
            _require(e in local_callees, f"{key}: exit {e!r} is not a block")
        adj: dict[str, list[str]] = {lid: [] for lid in local_callees}
        for edge in fn.get("flow_edges", []):
            _require(isinstance(edge, list) and len(edge) == 2, f"{key}: bad flow edge {edge!r}")
            src, dst = edge
            _require(src in local_callees and dst in local_callees,
                     f"{key}: flow edge {src!r}->{dst!r} names unknown block")
            adj[src].append(dst)

        if not any(local_callees.values()):
            continue  # all blocks call-free: nothing to retain

        _contract_into(graph, key, local_callees, adj, entry, set(exits))

    return graph


def _contract_into(graph: Cscfg, fn_key: str, local_callees: dict[str, tuple[str, ...]],
                   adj: dict[str, list[str]], entry_local: str, exits: set[str]) -> None:
    """Retain call-site blocks; wire contracted flow edges through virtual nodes."""
    graph._add_nodes_for(fn_key)
    gid = lambda lid: f"{fn_key}#{lid}"
    ent = entry_node(fn_key)
    ext = exit_node(fn_key)

    call_ids = [lid for lid in local_callees if local_callees[lid]]
    for lid in call_ids:
        graph.add_block(fn_key, gid(lid), local_callees[lid])

    def targets(seeds: list[str], seed_is_origin: bool) -> set[str]:
        # BFS through call-free blocks; a call-site block or the function
        # exit terminates the walk in that direction.
        out: set[str] = set()
        seen: set[str] = set()
        dq = deque(seeds)
        while dq:
            b = dq.popleft()
            if b in seen:
                continue
            seen.add(b)
            if local_callees[b]:
                out.add(gid(b))
                continue
            if b in exits:
                out.add(ext)
            dq.extend(adj[b])
        return out

    for dst in sorted(targets([entry_local], True)):
        graph.add_flow_edge(fn_key, ent, dst)
    for lid in call_ids:
        outs: set[str] = set()
        if lid in exits:
            outs.add(ext)
        outs |= targets(list(adj[lid]), False)
        for dst in sorted(outs):
            graph.add_flow_edge(fn_key, gid(lid), dst)


def _dominator_sets(nodes: list[str], preds: dict[str, list[str]], root: str) -> dict[str, frozenset[str]]:
    full = frozenset(nodes)
    dom = {n: (frozenset([root]) if n == root else full) for n in nodes}
    order = sorted(nodes)
    changed = True
    while changed:
        changed = False
        for n in order:
            if n == root:
                continue
            ps = preds[n]
            if not ps:
                continue
            new = frozenset.intersection(*(dom[p] for p in ps)) | {n}
            if new != dom[n]:
                dom[n] = new
                changed = True
    return dom


def _immediate(dom: dict[str, frozenset[str]], root: str) -> dict[str, str | None]:
    idom: dict[str, str | None] = {root: None}
    for n, ds in dom.items():
        if n == root:
            continue
        strict = ds - {n}
        idom[n] = max(strict, key=lambda c: (len(dom[c]), c))
    return idom


def compute_dominance(graph: Cscfg, fn_key) -> DominanceInfo:
    """Dominators, post-dominators and mutual-dominance classes for one function.

    Intraprocedural: call edges are opaque. Raises UnreachableBlockError when
    blocks are cut off from the entry or cannot reach the exit.
    """
    key = fn_key.key if isinstance(fn_key, FunctionRef) else fn_key
    if key not in graph._succ:
        raise MalformedDocumentError(f"function {key!r} has no blocks in the graph")
    ent, ext = entry_node(key), exit_node(key)
    nodes = graph.nodes_of(key)
    succ = {n: list(graph.successors(key, n)) for n in nodes}
    preds: dict[str, list[str]] = {n: [] for n in nodes}
    for n, outs in succ.items():
        for m in outs:
            preds[m].append(n)

    reached = _bfs(ent, succ)
    if set(nodes) - reached:
        raise UnreachableBlockError(key, set(nodes) - reached, "entry")
    co_reached = _bfs(ext, preds)
    if set(nodes) - co_reached:
        raise UnreachableBlockError(key, set(nodes) - co_reached, "exit")

    dom = _dominator_sets(nodes, preds, ent)
    pdom = _dominator_sets(nodes, succ, ext)
    idom = _immediate(dom, ent)
    ipdom = _immediate(pdom, ext)

    blocks = [n for n in nodes if n != ent and n != ext]
    parent = {b: b for b in blocks}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, a in enumerate(blocks):
        for b in blocks[i + 1:]:
            if (a in dom[b] and b in pdom[a]) or (b in dom[a] and a in pdom[b]):
                ra, rb = find(a), find(b)
                if ra != rb:
                    lo, hi = min(ra, rb), max(ra, rb)
                    parent[hi] = lo
    equiv = {b: find(b) for b in blocks}

    mandatory = frozenset(b for b in blocks if b in dom[ext])
    return DominanceInfo(
        function=key, idom=idom, ipdom=ipdom, equiv_class=equiv,
        dom_sets=dom, pdom_sets=pdom, mandatory=mandatory,
    )


def _bfs(root: str, adjacency: dict[str, list[str]]) -> set[str]:
    seen = {root}
    dq = deque([root])
    while dq:
        n = dq.popleft()
        for m in adjacency.get(n, []):
            if m not in seen:
                seen.add(m)
                dq.append(m)
    return seen


def mutual_dominance_classes(graph: Cscfg, fn_key) -> list[frozenset[str]]:
    """Partition of a function's call-site blocks into mutual-dominance classes."""
    return graph.dominance(fn_key.key if isinstance(fn_key, FunctionRef) else fn_key).classes()


@dataclass
class PatchReport:
    """Outcome of patching a graph with runtime traces."""

    edges_added: int = 0
    synthetic_blocks: int = 0
    unresolved_pairs: int = 0
    pairs_seen: int = 0
    details: list = field(default_factory=list)


def patch_with_traces(graph: Cscfg, traces, mapping) -> PatchReport:
    """Add call edges observed at runtime but absent from the static graph.

    For each parent/child span pair that resolves to known functions without a
    call edge, an edge tagged dynamic-patch is attached to the parent block
    whose existing callees' spans appear nearest before the child span; when
    no block qualifies, a synthetic call-site block is appended to the
    parent's exit region. Idempotent and monotone: edges are only added.
    """
    from .mapping import Unmapped  # local import to avoid a module cycle

    report = PatchReport()
    for trace in traces:
        resolved = {s.span_id: mapping.resolve(s) for s in trace.spans}
        for parent in trace.spans:
            rp = resolved[parent.span_id]
            children = trace.child_spans(parent.span_id)
            for child in children:
                rc = resolved[child.span_id]
                report.pairs_seen += 1
                if isinstance(rp, Unmapped) or isinstance(rc, Unmapped):
                    report.unresolved_pairs += 1
                    continue
                pkey, ckey = rp.key, rc.key
                if not graph.knows(pkey) or not graph.knows(ckey):
                    report.unresolved_pairs += 1
                    continue
                if graph.has_call_edge(pkey, ckey):
                    continue
                block_id = _patch_block_for(graph, pkey, parent, child, children, resolved)
                if block_id is None:
                    block_id = _append_synthetic_block(graph, pkey, ckey)
                    report.synthetic_blocks += 1
                    report.details.append(("synthetic", block_id, ckey))
                else:
                    graph.add_call_edge(block_id, ckey, PROV_DYNAMIC)
                    report.details.append(("edge", block_id, ckey))
                report.edges_added += 1
    return report


def _patch_block_for(graph: Cscfg, parent_key: str, parent, child, siblings, resolved):
    """Block whose static callees' spans appear nearest before the child span."""
    from .mapping import Unmapped

    best = None  # (sibling start_time, -ord, block_id)
    for sib in siblings:
        if sib.span_id == child.span_id or sib.start_time >= child.start_time:
            continue
        rs = resolved[sib.span_id]
        if isinstance(rs, Unmapped):
            continue
        for bid in graph.blocks_of(parent_key):
            if rs.key in graph.blocks[bid].callees:
                cand = (sib.start_time, bid)
                if best is None or cand[0] > best[0] or (cand[0] == best[0] and bid < best[1]):
                    best = cand
    return best[1] if best else None


def _append_synthetic_block(graph: Cscfg, fn_key: str, callee_key: str) -> str:
    n = sum(1 for b in graph.blocks_of(fn_key) if b in graph._synthetic_blocks)
    block_id = f"{fn_key}#patch{n}"
    ent, ext = entry_node(fn_key), exit_node(fn_key)
    had_body = graph.has_body(fn_key)
    graph._add_nodes_for(fn_key)
    preds_of_exit = [
        node for node in graph.nodes_of(fn_key)
        if ext in graph.successors(fn_key, node) and node != ent
    ]
    graph.add_block(fn_key, block_id, (callee_key,), provenance=PROV_DYNAMIC)
    if had_body:
        # keep the direct exit edges: the observed call is not proven mandatory
        for node in preds_of_exit:
            graph.add_flow_edge(fn_key, node, block_id, provenance=PROV_DYNAMIC)
        if not preds_of_exit:
            graph.add_flow_edge(fn_key, ent, block_id, provenance=PROV_DYNAMIC)
    else:
        graph.add_flow_edge(fn_key, ent, block_id, provenance=PROV_DYNAMIC)
        graph.add_flow_edge(fn_key, ent, ext, provenance=PROV_DYNAMIC)
    graph.add_flow_edge(fn_key, block_id, ext, provenance=PROV_DYNAMIC)
    graph._invalidate_dominance(fn_key)
    return block_id
