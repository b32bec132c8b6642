"""HTTP front end for a built graph.

Endpoints:

* ``POST /v1/query`` with ``{"query": "..."}`` answers through the graph and
  returns ``{"answer", "expert", "trace_id"}``;
* ``GET /v1/experts`` lists the registered expert names;
* ``GET /v1/trace/{trace_id}`` replays a stored routing trace.

Request bodies are parsed by hand so a malformed body is a clean 400 with a
typed error payload instead of a framework-shaped validation response.
Routing failures are 422: the request was well-formed, the orchestrator
simply produced no resolvable expert, and the trace id in the payload lets
the caller inspect why. Traces live in memory and, when a trace directory
is configured, are appended to a per-day JSONL file as they happen.
"""
from __future__ import annotations

import json
import threading
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import ExpertInvocationError, RoutingError, SlgError
from .graph import Graph, RouteTrace


class TraceStore:
    """In-memory trace index with optional JSONL persistence, one file per day."""

    def __init__(self, trace_dir: str | Path | None = None):
        self._traces: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._trace_dir = Path(trace_dir) if trace_dir is not None else None
        if self._trace_dir is not None:
            self._trace_dir.mkdir(parents=True, exist_ok=True)

    def add(self, trace: RouteTrace, answer: str | None = None) -> None:
        record = trace.to_record()
        record["answer"] = answer
        with self._lock:
            self._traces[trace.trace_id] = record
            if self._trace_dir is not None:
                day = datetime.now(timezone.utc).strftime("%Y%m%d")
                path = self._trace_dir / f"traces-{day}.jsonl"
                with path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record, ensure_ascii=False) + "\n")
                    handle.flush()

    def get(self, trace_id: str) -> dict | None:
        with self._lock:
            return self._traces.get(trace_id)


def _error(status: int, error_type: str, message: str, **extra) -> JSONResponse:
    payload = {"error": {"type": error_type, "message": message, **extra}}
    return JSONResponse(status_code=status, content=payload)


def create_app(graph: Graph, trace_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="slg", docs_url=None, redoc_url=None)
    store = TraceStore(trace_dir)
    app.state.graph = graph
    app.state.traces = store

    @app.post("/v1/query")
    async def query(request: Request):
        try:
            body = json.loads(await request.body())
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _error(400, "invalid_json", "request body is not valid JSON")
        if not isinstance(body, dict) or not isinstance(body.get("query"), str):
            return _error(400, "invalid_request", 'body must be an object with a string "query"')
        query_text = body["query"]
        if not query_text.strip():
            return _error(400, "invalid_request", "query must be non-empty")
        try:
            answer = graph.answer(query_text)
        except RoutingError as exc:
            trace_id = exc.trace.trace_id if exc.trace else None
            if exc.trace:
                store.add(exc.trace)
            return _error(422, "routing_failure", str(exc), trace_id=trace_id)
        except ExpertInvocationError as exc:
            trace_id = exc.trace.trace_id if exc.trace else None
            if exc.trace:
                store.add(exc.trace)
            return _error(502, "expert_failure", str(exc), trace_id=trace_id)
        except SlgError as exc:
            return _error(500, "internal_error", str(exc))
        store.add(answer.trace, answer=answer.text)
        return {
            "answer": answer.text,
            "expert": answer.expert_name,
            "trace_id": answer.trace.trace_id,
        }

    @app.get("/v1/experts")
    async def experts():
        return {"experts": list(graph.expert_names)}

    @app.get("/v1/trace/{trace_id}")
    async def trace(trace_id: str):
        record = store.get(trace_id)
        if record is None:
            return _error(404, "unknown_trace", f"no trace with id {trace_id!r}")
        return record

    return app
