import json
from datetime import datetime, timezone
from pathlib import Path

import pytest
from fastapi.testclient import TestClient
from jsonschema import Draft202012Validator

from slg.errors import BackendError
from slg.graph import Resolution, build_graph, build_graph_from_spec, load_graph_spec
from slg.service import create_app

from _stubs import ScriptedBackend

SCHEMAS = Path(__file__).parent / "fixtures" / "service"

# long enough that no two-token registered name is within fuzzy distance
UNROUTABLE_REPLY = "i cannot tell which manual section covers this question"


def _assert_matches(payload, schema_name):
    schema = json.loads((SCHEMAS / schema_name).read_text(encoding="utf-8"))
    Draft202012Validator.check_schema(schema)
    Draft202012Validator(schema).validate(payload)


def _route(request):
    text = request.messages[-1].content.lower()
    if "alpha" in text:
        return "ALPHA REPAIR"
    if "bravo" in text:
        return "bravo inspection please"
    return UNROUTABLE_REPLY


def _build_app(trace_dir=None, *, bravo_error=None):
    graph = build_graph(
        ScriptedBackend(reply=_route, backend_id="scripted:orchestrator"),
        {
            "ALPHA REPAIR": ScriptedBackend(
                "patch the alpha skin", backend_id="scripted:alpha"
            ),
            "BRAVO INSPECTION": ScriptedBackend(
                "inspect the bravo spar", backend_id="scripted:bravo", error=bravo_error
            ),
        },
        Resolution(mode="fuzzy", max_edit_distance=2),
    )
    return create_app(graph, trace_dir=trace_dir)


@pytest.fixture()
def client():
    with TestClient(_build_app()) as c:
        yield c


class TestQuery:
    def test_success_contract(self, client):
        response = client.post("/v1/query", json={"query": "how do i fix the alpha panel?"})
        assert response.status_code == 200
        payload = response.json()
        _assert_matches(payload, "query_ok.schema.json")
        assert payload["answer"] == "patch the alpha skin"
        assert payload["expert"] == "ALPHA REPAIR"

    def test_fuzzy_resolution_still_answers(self, client):
        response = client.post("/v1/query", json={"query": "bravo checks"})
        assert response.status_code == 200
        assert response.json()["expert"] == "BRAVO INSPECTION"

    def test_malformed_json_body(self, client):
        response = client.post(
            "/v1/query", content=b"{nope", headers={"content-type": "application/json"}
        )
        assert response.status_code == 400
        payload = response.json()
        _assert_matches(payload, "error.schema.json")
        assert payload["error"]["type"] == "invalid_json"

    def test_non_utf8_body(self, client):
        response = client.post(
            "/v1/query", content=b"\xff\xfe{}", headers={"content-type": "application/json"}
        )
        assert response.status_code == 400
        assert response.json()["error"]["type"] == "invalid_json"

    @pytest.mark.parametrize(
        "body",
        [
            [1, 2, 3],
            {},
            {"query": 7},
            {"question": "wrong key"},
        ],
    )
    def test_wrong_shape_is_invalid_request(self, client, body):
        response = client.post("/v1/query", json=body)
        assert response.status_code == 400
        payload = response.json()
        _assert_matches(payload, "error.schema.json")
        assert payload["error"]["type"] == "invalid_request"

    def test_blank_query_rejected(self, client):
        response = client.post("/v1/query", json={"query": "   "})
        assert response.status_code == 400
        assert response.json()["error"]["type"] == "invalid_request"

    def test_routing_failure_is_422_with_inspectable_trace(self, client):
        response = client.post("/v1/query", json={"query": "what is the meaning of life?"})
        assert response.status_code == 422
        payload = response.json()
        _assert_matches(payload, "error.schema.json")
        assert payload["error"]["type"] == "routing_failure"
        trace_id = payload["error"]["trace_id"]
        assert trace_id
        trace = client.get(f"/v1/trace/{trace_id}")
        assert trace.status_code == 200
        record = trace.json()
        _assert_matches(record, "trace.schema.json")
        assert record["expert_name"] is None
        assert record["resolved_by"] == "failed"
        assert record["orchestrator_raw"] == UNROUTABLE_REPLY
        assert record["answer"] is None

    def test_expert_failure_is_502(self):
        app = _build_app(bravo_error=BackendError("adapter crashed"))
        with TestClient(app) as client:
            response = client.post("/v1/query", json={"query": "bravo inspection"})
            assert response.status_code == 502
            payload = response.json()
            _assert_matches(payload, "error.schema.json")
            assert payload["error"]["type"] == "expert_failure"
            record = client.get(f"/v1/trace/{payload['error']['trace_id']}").json()
            assert record["expert_name"] == "BRAVO INSPECTION"
            assert record["expert_backend"] == "scripted:bravo"
            assert record["answer"] is None


class TestExperts:
    def test_listing_contract(self, client):
        response = client.get("/v1/experts")
        assert response.status_code == 200
        payload = response.json()
        _assert_matches(payload, "experts.schema.json")
        assert payload["experts"] == ["ALPHA REPAIR", "BRAVO INSPECTION"]


class TestTrace:
    def test_round_trip(self, client):
        created = client.post("/v1/query", json={"query": "alpha damage"}).json()
        record = client.get(f"/v1/trace/{created['trace_id']}").json()
        _assert_matches(record, "trace.schema.json")
        assert record["trace_id"] == created["trace_id"]
        assert record["query"] == "alpha damage"
        assert record["expert_name"] == "ALPHA REPAIR"
        assert record["resolved_by"] == "exact"
        assert record["answer"] == created["answer"]
        assert record["answer_latency"] is not None

    def test_unknown_trace_is_404(self, client):
        response = client.get("/v1/trace/deadbeef")
        assert response.status_code == 404
        payload = response.json()
        _assert_matches(payload, "error.schema.json")
        assert payload["error"]["type"] == "unknown_trace"


class TestTracePersistence:
    def test_traces_append_to_daily_jsonl(self, tmp_path):
        app = _build_app(trace_dir=tmp_path / "traces")
        with TestClient(app) as client:
            ok = client.post("/v1/query", json={"query": "alpha"}).json()
            failed = client.post("/v1/query", json={"query": "mystery"}).json()
        day = datetime.now(timezone.utc).strftime("%Y%m%d")
        path = tmp_path / "traces" / f"traces-{day}.jsonl"
        records = [
            json.loads(line)
            for line in path.read_text(encoding="utf-8").splitlines()
        ]
        assert [r["trace_id"] for r in records] == [
            ok["trace_id"],
            failed["error"]["trace_id"],
        ]
        for record in records:
            _assert_matches(record, "trace.schema.json")
        assert records[0]["answer"] == ok["answer"]
        assert records[1]["resolved_by"] == "failed"


class TestAgainstBuiltGraph:
    def test_memorized_answer_round_trips_over_http(self, srm_graph_spec, srm_datasets):
        spec = load_graph_spec(srm_graph_spec)
        graph = build_graph_from_spec(spec, base_dir=srm_graph_spec.parent)
        expert_datasets, _ = srm_datasets
        dataset = expert_datasets[sorted(expert_datasets)[0]]
        pair = next(p for p in dataset.pairs if p.split == "train")
        with TestClient(create_app(graph)) as client:
            payload = client.post("/v1/query", json={"query": pair.question}).json()
            _assert_matches(payload, "query_ok.schema.json")
            assert payload["expert"] == pair.expert_name
            assert payload["answer"] == pair.answer
            names = client.get("/v1/experts").json()["experts"]
            assert len(names) == 35 and names == sorted(names)
