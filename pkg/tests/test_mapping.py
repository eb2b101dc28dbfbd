import pytest

from spanscope.cscfg import SHARED_SERVICE, FunctionRef, build_cscfg
from spanscope.errors import DuplicateSharedEntryError
from spanscope.mapping import (
    REASON_NO_FUNCTION_FORM,
    REASON_UNKNOWN_FUNCTION,
    REASON_UNKNOWN_SERVICE,
    Unmapped,
    build_map,
    normalize_operation,
)

from .conftest import make_span, single_function_doc


def order_graph():
    doc = single_function_doc(
        fn="ts-order-service:OrderService.getTicketListByDateAndTripId",
        blocks=[{"id": "b0", "callees": ["SHARED:Common.checkToken"]}],
        edges=[], entry="b0", exits=["b0"],
        extra_functions=[{"function": "SHARED:Common.checkToken"}],
    )
    return build_cscfg(doc)


class TestNormalize:
    def test_plain(self):
        assert normalize_operation("OrderService.create") == ("OrderService", "create")

    def test_signature_stripped(self):
        assert normalize_operation("C.f(int, long)") == ("C", "f")

    def test_template_brackets_stripped(self):
        assert normalize_operation("Repo<Order>.save") == ("Repo", "save")

    def test_url_style_is_none(self):
        assert normalize_operation("GET /api/v1/orders") is None

    def test_last_dot_wins(self):
        assert normalize_operation("pkg.sub.Class.fn") == ("pkg.sub.Class", "fn")


class TestResolve:
    def test_exact_service_match(self):
        mapping = build_map(order_graph())
        span = make_span("s", operation="OrderService.getTicketListByDateAndTripId",
                         service="ts-order-service")
        ref = mapping.resolve(span)
        assert isinstance(ref, FunctionRef)
        assert ref.service == "ts-order-service"

    def test_shared_library_resolved_with_caller_service(self):
        mapping = build_map(order_graph())
        span = make_span("s", operation="Common.checkToken", service="ts-order-service")
        ref = mapping.resolve(span)
        assert isinstance(ref, FunctionRef)
        assert ref.service == SHARED_SERVICE

    def test_url_span_unmapped(self):
        mapping = build_map(order_graph())
        span = make_span("s", operation="GET /api/v1/orders", service="ts-order-service")
        res = mapping.resolve(span)
        assert res == Unmapped(REASON_NO_FUNCTION_FORM)

    def test_unknown_service(self):
        mapping = build_map(order_graph())
        span = make_span("s", operation="C.f", service="nowhere")
        assert mapping.resolve(span) == Unmapped(REASON_UNKNOWN_SERVICE)

    def test_unknown_function(self):
        mapping = build_map(order_graph())
        span = make_span("s", operation="OrderService.zzz", service="ts-order-service")
        assert mapping.resolve(span) == Unmapped(REASON_UNKNOWN_FUNCTION)

    def test_case_sensitive(self):
        mapping = build_map(order_graph())
        span = make_span("s", operation="orderservice.getTicketListByDateAndTripId",
                         service="ts-order-service")
        assert isinstance(mapping.resolve(span), Unmapped)

    def test_deterministic_pure(self):
        mapping = build_map(order_graph())
        span = make_span("s", operation="OrderService.getTicketListByDateAndTripId",
                         service="ts-order-service")
        assert mapping.resolve(span) == mapping.resolve(span)

    def test_every_span_resolved_or_logged(self):
        mapping = build_map(order_graph())
        spans = [
            make_span("a", operation="OrderService.getTicketListByDateAndTripId",
                      service="ts-order-service"),
            make_span("b", operation="GET /x", service="ts-order-service"),
            make_span("c", operation="C.f", service="zzz"),
        ]
        misses = 0
        for s in spans:
            if isinstance(mapping.resolve(s), Unmapped):
                misses += 1
        assert misses == 2
        assert len(mapping.miss_log) == 2
        assert {m[1] for m in mapping.miss_log} == {"b", "c"}


class TestBuildMap:
    def test_empty_graph_resolves_nothing(self):
        graph = build_cscfg({"schema_version": 1, "functions": [], "external_functions": []})
        mapping = build_map(graph)
        assert isinstance(mapping.resolve(make_span("s")), Unmapped)

    def test_shared_precedence_never_overrides_local(self):
        doc = single_function_doc(
            fn="svc:C.f",
            blocks=[{"id": "b0", "callees": ["x:Leaf.g"]}],
            edges=[], entry="b0", exits=["b0"],
            external=["x:Leaf.g"],
        )
        graph = build_cscfg(doc)
        shared = [FunctionRef(SHARED_SERVICE, "C", "f")]
        mapping = build_map(graph, shared)
        ref = mapping.resolve(make_span("s", operation="C.f", service="svc"))
        assert ref.service == "svc"
        # the shared entry still answers for other services
        ref2 = mapping.resolve(make_span("s2", operation="C.f", service="other"))
        assert ref2.service == SHARED_SERVICE

    def test_duplicate_shared_entry_rejected(self):
        graph = build_cscfg({"schema_version": 1, "functions": [], "external_functions": []})
        shared = [FunctionRef(SHARED_SERVICE, "C", "f"), FunctionRef(SHARED_SERVICE, "C", "f")]
        with pytest.raises(DuplicateSharedEntryError):
            build_map(graph, shared)
