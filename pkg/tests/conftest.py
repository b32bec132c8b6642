import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from slg import (
    TemplateQuestionBackend,
    build_qa_datasets,
    chunk_by_subsection,
    parse_document,
    save_dataset_jsonl,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def srm_text() -> str:
    return (FIXTURES / "srm_sample.md").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def srm_corpus(srm_text):
    return parse_document(srm_text, "markdown-headings", doc_id="srm")


@pytest.fixture(scope="session")
def srm_chunks(srm_corpus):
    return chunk_by_subsection(srm_corpus)


@pytest.fixture(scope="session")
def srm_datasets(srm_chunks):
    """(expert datasets, orchestrator dataset) for the sample manual."""
    backend = TemplateQuestionBackend(srm_chunks)
    return build_qa_datasets(srm_chunks, backend, n_questions=5, seed=7)


@pytest.fixture(scope="session")
def srm_dataset_dir(tmp_path_factory, srm_datasets):
    """Dataset directory in the on-disk layout the CLI produces."""
    expert_datasets, orchestrator = srm_datasets
    base = tmp_path_factory.mktemp("srm-datasets")
    experts_dir = base / "experts"
    experts_dir.mkdir()
    for name, dataset in sorted(expert_datasets.items()):
        save_dataset_jsonl(dataset, experts_dir / f"{name}.jsonl")
    save_dataset_jsonl(orchestrator, base / "orchestrator.jsonl")
    return base


def make_graph_spec(dataset_dir: Path, *, resolution: dict | None = None) -> Path:
    """Write a memorization-experts + lexical-router graph spec into dataset_dir."""
    experts = [
        {
            "name": path.stem,
            "backend": {
                "type": "memorization",
                "params": {"dataset": f"experts/{path.name}", "splits": ["train"]},
            },
        }
        for path in sorted((dataset_dir / "experts").glob("*.jsonl"))
    ]
    spec = {
        "orchestrator": {"type": "lexical-router", "params": {}},
        "experts": experts,
        "resolution": resolution or {"mode": "fuzzy", "max_edit_distance": 2},
    }
    path = dataset_dir / "graph.json"
    path.write_text(json.dumps(spec, indent=2), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def srm_graph_spec(srm_dataset_dir) -> Path:
    return make_graph_spec(srm_dataset_dir)


@pytest.fixture()
def unroutable_endpoint():
    """Loopback chat endpoint whose every completion resolves to no expert."""

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            self.rfile.read(int(self.headers.get("Content-Length", 0)))
            body = json.dumps(
                {
                    "choices": [
                        {
                            "message": {
                                "content": (
                                    "no single manual section covers a question like this one"
                                )
                            }
                        }
                    ]
                }
            ).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}"
    finally:
        server.shutdown()
        thread.join()
