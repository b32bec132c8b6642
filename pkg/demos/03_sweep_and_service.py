"""
Staged hyperparameter selection plus the query service
======================================================

Part one runs the standard 13-row sweep in deterministic mode: four
stages tune learning rate, adapter rank, gradient accumulation, and
adapter alpha in order, and each stage freezes its winner before the
next begins. Part two serves the same graph over HTTP and walks the
protocol with an in-process client.

    python3 demos/03_sweep_and_service.py
"""

import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from slg import (
    Graph,
    LexicalRouter,
    MemorizationExpert,
    TemplateQuestionBackend,
    build_qa_datasets,
    chunk_by_subsection,
    create_app,
    default_sweep,
    parse_document,
    run_sweep,
    save_dataset_jsonl,
)

DOC = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "srm_sample.md"


def prepare_datasets(base: Path) -> Path:
    corpus = parse_document(DOC.read_text(encoding="utf-8"), "markdown-headings", doc_id="srm")
    chunks = chunk_by_subsection(corpus)
    expert_datasets, orchestrator = build_qa_datasets(
        chunks, TemplateQuestionBackend(chunks), n_questions=3, seed=7
    )
    experts_dir = base / "experts"
    experts_dir.mkdir(parents=True)
    for name, dataset in sorted(expert_datasets.items()):
        save_dataset_jsonl(dataset, experts_dir / f"{name}.jsonl")
    save_dataset_jsonl(orchestrator, base / "orchestrator.jsonl")
    return base


def build_graph(base: Path) -> Graph:
    corpus = parse_document(DOC.read_text(encoding="utf-8"), "markdown-headings", doc_id="srm")
    chunks = chunk_by_subsection(corpus)
    expert_datasets, _ = build_qa_datasets(
        chunks, TemplateQuestionBackend(chunks), n_questions=3, seed=7
    )
    profiles = {
        name: [p.question for p in ds.pairs if p.split == "train"]
        for name, ds in expert_datasets.items()
    }
    experts = {
        name: MemorizationExpert(name, ds.pairs, splits=("train",))
        for name, ds in expert_datasets.items()
    }
    return Graph(LexicalRouter(profiles), experts)


def main() -> int:
    with tempfile.TemporaryDirectory() as scratch:
        datasets = prepare_datasets(Path(scratch) / "datasets")

        plan = default_sweep()
        result = run_sweep(plan, datasets_dir=datasets, out_dir=Path(scratch) / "sweep")
        print(f"ran {len(result.records)} configurations in 4 stages")
        for selection in result.selections:
            print(
                f"  stage {selection.stage_index} ({selection.tuned_field}):"
                f" selected {selection.selected_value}"
            )
        # memorization backends ignore hyperparameters, so each stage ties
        # and the earliest candidate wins; with real training the winners
        # come from the validation exact-match column instead

        client = TestClient(create_app(build_graph(datasets)))
        experts = client.get("/v1/experts").json()["experts"]
        print(f"\nservice exposes {len(experts)} experts")

        question = "How do I replace a cracked aileron nose rib?"
        reply = client.post("/v1/query", json={"query": question}).json()
        print(f"Q: {question}")
        print(f"A: {reply['answer'][:88]}...")
        print(f"   expert={reply['expert']} trace={reply['trace_id']}")

        trace = client.get(f"/v1/trace/{reply['trace_id']}").json()
        print(f"   resolved_by={trace['resolved_by']} route_latency={trace['route_latency']:.4f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
