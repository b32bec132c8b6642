import json

import pytest

from slg.backends import MemorizationExpert, NoisyRouter, RemoteClient
from slg.errors import (
    BackendError,
    ExpertInvocationError,
    GraphBuildError,
    RoutingError,
)
from slg.graph import (
    Graph,
    Resolution,
    build_graph,
    build_graph_from_spec,
    load_graph_spec,
    resolve_expert_name,
    route_audit,
)

from _stubs import ScriptedBackend

REGISTERED = ("EMPENNAGE REPAIRS", "FUSELAGE REPAIRS", "WING DAMAGE CLASSIFICATION")


class TestResolution:
    def test_mode_validation(self):
        with pytest.raises(ValueError):
            Resolution(mode="loose")
        with pytest.raises(ValueError):
            Resolution(max_edit_distance=-1)

    def test_defaults(self):
        r = Resolution()
        assert r.mode == "fuzzy" and r.max_edit_distance == 2


class TestResolveExpertName:
    def test_exact_after_normalization(self):
        for raw in (
            "WING DAMAGE CLASSIFICATION",
            "wing damage classification",
            "3.1 Wing  Damage Classification",
            "  Wing Damage Classification.  ",
        ):
            assert resolve_expert_name(raw, REGISTERED) == (
                "WING DAMAGE CLASSIFICATION",
                "exact",
            )

    def test_fuzzy_within_distance(self):
        name, method = resolve_expert_name("wing damage", REGISTERED)
        assert (name, method) == ("WING DAMAGE CLASSIFICATION", "fuzzy")
        name, method = resolve_expert_name("the wing damage classification", REGISTERED)
        assert (name, method) == ("WING DAMAGE CLASSIFICATION", "fuzzy")

    def test_beyond_distance_fails(self):
        # token-level distance: a long reply sharing no tokens is far from
        # every registered name
        raw = "please consult the hydraulic pump manual"
        assert resolve_expert_name(raw, REGISTERED) == (None, "failed")

    def test_short_garbage_lands_within_default_budget(self):
        # distance 2 covers replacing both tokens of a two-token name; the
        # default budget knowingly accepts this
        name, method = resolve_expert_name("hydraulic pumps", REGISTERED)
        assert method == "fuzzy"
        assert name == "EMPENNAGE REPAIRS"

    def test_exact_mode_rejects_near_miss(self):
        resolution = Resolution(mode="exact")
        assert resolve_expert_name("wing damage", REGISTERED, resolution) == (None, "failed")
        assert resolve_expert_name("wing damage classification", REGISTERED, resolution) == (
            "WING DAMAGE CLASSIFICATION",
            "exact",
        )

    def test_tie_breaks_to_smallest_name(self):
        registered = ("ALPHA REPAIR", "BETA REPAIR")
        assert resolve_expert_name("gamma repair", registered) == ("ALPHA REPAIR", "fuzzy")

    def test_garbage_raw_fails_cleanly(self):
        assert resolve_expert_name("§§§", REGISTERED) == (None, "failed")
        assert resolve_expert_name("", REGISTERED) == (None, "failed")

    def test_zero_distance_budget(self):
        resolution = Resolution(mode="fuzzy", max_edit_distance=0)
        assert resolve_expert_name("wing damage", REGISTERED, resolution) == (None, "failed")


def _experts(answers=None):
    answers = answers or {}
    return {
        name: ScriptedBackend(
            content=answers.get(name, f"answer from {name}"),
            backend_id=f"stub:{name}",
        )
        for name in REGISTERED
    }


class TestBuildGraph:
    def test_requires_experts(self):
        with pytest.raises(GraphBuildError):
            build_graph(ScriptedBackend(), {})

    def test_rejects_unnormalized_names(self):
        with pytest.raises(GraphBuildError, match="not normalized"):
            build_graph(ScriptedBackend(), {"wing repairs": ScriptedBackend()})

    def test_rejects_invalid_names(self):
        with pytest.raises(GraphBuildError, match="invalid expert name"):
            build_graph(ScriptedBackend(), {"§§§": ScriptedBackend()})

    def test_registry_is_read_only(self):
        graph = build_graph(ScriptedBackend(content="WING DAMAGE CLASSIFICATION"), _experts())
        with pytest.raises(TypeError):
            graph.experts["NEW"] = ScriptedBackend()  # type: ignore[index]


class TestRoute:
    def test_successful_route_trace(self):
        orchestrator = ScriptedBackend(content="WING DAMAGE CLASSIFICATION", backend_id="orch")
        graph = build_graph(orchestrator, _experts())
        trace = graph.route("how is wing damage classified?")
        assert trace.expert_name == "WING DAMAGE CLASSIFICATION"
        assert trace.resolved_by == "exact"
        assert trace.orchestrator_raw == "WING DAMAGE CLASSIFICATION"
        assert trace.orchestrator_backend == "orch"
        assert trace.expert_backend is None
        assert trace.answer_latency is None
        assert trace.route_latency >= 0.0
        assert len(trace.trace_id) == 32

    def test_routing_prompt_enumerates_sorted_names(self):
        orchestrator = ScriptedBackend(content="FUSELAGE REPAIRS")
        graph = build_graph(orchestrator, _experts())
        graph.route("query")
        (request,) = orchestrator.requests
        system = request.messages[0].content
        positions = [system.index(f"- {name}") for name in sorted(REGISTERED)]
        assert positions == sorted(positions)
        assert request.messages[0].role == "system"
        assert request.user_text == "query"
        assert request.temperature == 0.0

    def test_near_miss_resolves_fuzzy(self):
        graph = build_graph(ScriptedBackend(content="Fuselage Repair"), _experts())
        trace = graph.route("q")
        assert trace.expert_name == "FUSELAGE REPAIRS"
        assert trace.resolved_by == "fuzzy"

    def test_unresolvable_reply_raises_with_trace(self):
        raw = "I am not sure which expert handles landing gear"
        graph = build_graph(ScriptedBackend(content=raw), _experts())
        with pytest.raises(RoutingError) as err:
            graph.route("q")
        assert err.value.orchestrator_raw == raw
        assert err.value.registered == sorted(REGISTERED)
        assert err.value.trace.resolved_by == "failed"
        assert err.value.trace.expert_name is None

    def test_orchestrator_failure_raises_routing_error(self):
        graph = build_graph(
            ScriptedBackend(error=BackendError("model gone")), _experts()
        )
        with pytest.raises(RoutingError) as err:
            graph.route("q")
        assert "model gone" in err.value.trace.orchestrator_raw
        assert err.value.trace.orchestrator_raw.startswith("<error:")


class TestAnswer:
    def test_answer_flow(self):
        experts = _experts({"FUSELAGE REPAIRS": "Use a flush patch."})
        graph = build_graph(ScriptedBackend(content="FUSELAGE REPAIRS"), experts)
        answer = graph.answer("how do I patch the fuselage?")
        assert answer.text == "Use a flush patch."
        assert answer.expert_name == "FUSELAGE REPAIRS"
        assert answer.trace.expert_backend == "stub:FUSELAGE REPAIRS"
        assert answer.trace.answer_latency is not None

    def test_expert_sees_bare_query(self):
        experts = _experts()
        graph = build_graph(ScriptedBackend(content="WING DAMAGE CLASSIFICATION"), experts)
        graph.answer("classify dents", max_tokens=77, seed=3)
        (request,) = experts["WING DAMAGE CLASSIFICATION"].requests
        assert len(request.messages) == 1
        assert request.messages[0].role == "user"
        assert request.messages[0].content == "classify dents"
        assert request.max_tokens == 77
        assert request.seed == 3

    def test_expert_failure_carries_trace(self):
        experts = _experts()
        experts["WING DAMAGE CLASSIFICATION"] = ScriptedBackend(
            error=BackendError("adapter missing"), backend_id="stub:wing"
        )
        graph = build_graph(ScriptedBackend(content="WING DAMAGE CLASSIFICATION"), experts)
        with pytest.raises(ExpertInvocationError) as err:
            graph.answer("q")
        assert err.value.expert_name == "WING DAMAGE CLASSIFICATION"
        assert err.value.trace.expert_backend == "stub:wing"

    def test_every_test_question_answered_and_traced(self, srm_datasets):
        experts_ds, orchestrator_ds = srm_datasets
        experts = {
            name: MemorizationExpert(name, ds.pairs, splits=None)
            for name, ds in experts_ds.items()
        }
        truth = {p.question: p.expert_name for p in orchestrator_ds.pairs}
        graph = build_graph(NoisyRouter(truth, list(experts), p_correct=1.0), experts)
        test_pairs = [p for p in orchestrator_ds.pairs if p.split == "test"]
        traces = [graph.answer(p.question).trace for p in test_pairs]
        assert len(traces) == len(test_pairs)
        assert len({t.trace_id for t in traces}) == len(traces)
        for trace in traces:
            assert trace.route_latency > 0.0
            assert trace.answer_latency > 0.0

    def test_memorization_round_trip(self, srm_datasets):
        experts_ds, orchestrator_ds = srm_datasets
        experts = {
            name: MemorizationExpert(name, ds.pairs) for name, ds in experts_ds.items()
        }
        truth = {p.question: p.expert_name for p in orchestrator_ds.pairs}
        router = NoisyRouter(truth, list(experts), p_correct=1.0)
        graph = build_graph(router, experts)
        ds = experts_ds[sorted(experts_ds)[0]]
        pair = ds.subset("train")[0]
        answer = graph.answer(pair.question)
        assert answer.expert_name == pair.expert_name
        assert answer.text == pair.answer


class TestRouteAudit:
    def test_oracle_router_scores_one(self, srm_datasets):
        experts_ds, orchestrator_ds = srm_datasets
        truth = {p.question: p.expert_name for p in orchestrator_ds.pairs}
        router = NoisyRouter(truth, sorted(experts_ds), p_correct=1.0)
        graph = build_graph(router, {n: ScriptedBackend() for n in experts_ds})
        audit = route_audit(graph, orchestrator_ds.pairs)
        assert audit.accuracy == 1.0
        assert audit.total == len(orchestrator_ds.pairs)
        assert set(audit.per_expert) == set(experts_ds)
        for stats in audit.per_expert.values():
            assert stats.correct == stats.total
            assert stats.failed == 0

    def test_failures_count_as_incorrect(self, srm_datasets):
        _, orchestrator_ds = srm_datasets
        names = sorted({p.expert_name for p in orchestrator_ds.pairs})
        graph = build_graph(
            ScriptedBackend(content="NO SUCH EXPERT ANYWHERE"),
            {n: ScriptedBackend() for n in names},
        )
        audit = route_audit(graph, orchestrator_ds.pairs[:10])
        assert audit.accuracy == 0.0
        assert sum(s.failed for s in audit.per_expert.values()) == 10

    def test_empty_pairs_rejected(self):
        graph = build_graph(ScriptedBackend(), _experts())
        with pytest.raises(ValueError):
            route_audit(graph, [])


class TestGraphSpec:
    def test_load_spec_validates(self, tmp_path):
        path = tmp_path / "graph.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(GraphBuildError):
            load_graph_spec(path)
        path.write_text(json.dumps({"experts": []}), encoding="utf-8")
        with pytest.raises(GraphBuildError, match="orchestrator"):
            load_graph_spec(path)

    def test_build_from_spec_end_to_end(self, srm_graph_spec, srm_datasets):
        spec = load_graph_spec(srm_graph_spec)
        graph = build_graph_from_spec(spec, base_dir=srm_graph_spec.parent)
        experts_ds, _ = srm_datasets
        assert graph.expert_names == tuple(sorted(experts_ds))
        ds = experts_ds[sorted(experts_ds)[3]]
        pair = ds.subset("train")[0]
        answer = graph.answer(pair.question)
        assert answer.text == pair.answer

    def test_unknown_backend_types(self, tmp_path):
        spec = {
            "orchestrator": {"type": "lexical-router", "params": {}},
            "experts": [{"name": "A", "backend": {"type": "quantum", "params": {}}}],
        }
        with pytest.raises(GraphBuildError, match="unknown expert backend"):
            build_graph_from_spec(spec, base_dir=tmp_path)
        spec = {
            "orchestrator": {"type": "divination", "params": {}},
            "experts": [{"name": "A", "backend": {"type": "remote", "params": {"base_url": "http://x", "model": "a"}}}],
        }
        with pytest.raises(GraphBuildError, match="unknown orchestrator backend"):
            build_graph_from_spec(spec, base_dir=tmp_path)

    def test_duplicate_expert_rejected(self, srm_graph_spec):
        spec = load_graph_spec(srm_graph_spec)
        spec["experts"].append(spec["experts"][0])
        with pytest.raises(GraphBuildError, match="twice"):
            build_graph_from_spec(spec, base_dir=srm_graph_spec.parent)

    def test_memorization_requires_dataset(self, tmp_path):
        spec = {
            "orchestrator": {"type": "lexical-router", "params": {}},
            "experts": [{"name": "A", "backend": {"type": "memorization", "params": {}}}],
        }
        with pytest.raises(GraphBuildError, match="dataset"):
            build_graph_from_spec(spec, base_dir=tmp_path)

    def test_router_needs_some_dataset_source(self):
        spec = {
            "orchestrator": {"type": "lexical-router", "params": {}},
            "experts": [
                {
                    "name": "A",
                    "backend": {
                        "type": "remote",
                        "params": {"base_url": "http://x", "model": "a"},
                    },
                }
            ],
        }
        with pytest.raises(GraphBuildError, match="dataset paths"):
            build_graph_from_spec(spec)

    def test_remote_backends_constructed(self, srm_graph_spec):
        spec = load_graph_spec(srm_graph_spec)
        spec["orchestrator"] = {
            "type": "remote",
            "params": {"base_url": "http://svc:9", "model": "orchestrator", "api_token": "t"},
        }
        graph = build_graph_from_spec(spec, base_dir=srm_graph_spec.parent)
        assert isinstance(graph.orchestrator, RemoteClient)
        assert graph.orchestrator.model == "orchestrator"

    def test_resolution_parsed(self, srm_graph_spec):
        spec = load_graph_spec(srm_graph_spec)
        spec["resolution"] = {"mode": "exact"}
        graph = build_graph_from_spec(spec, base_dir=srm_graph_spec.parent)
        assert graph.resolution == Resolution(mode="exact", max_edit_distance=2)
