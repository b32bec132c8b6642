"""
From a maintenance manual to routed answers
===========================================

Walks the whole pipeline on the bundled sample manual: parse the heading
hierarchy, cut one chunk per subsection, audit near-duplicate wording,
synthesize question/answer pairs, and assemble a star graph whose router
sends each question to exactly one memorized expert.

Run it from the repository root:

    python3 demos/01_manual_to_answers.py
"""

import sys
from collections import Counter
from pathlib import Path

from slg import (
    Graph,
    LexicalRouter,
    MemorizationExpert,
    TemplateQuestionBackend,
    audit_overlap,
    build_qa_datasets,
    chunk_by_subsection,
    parse_document,
)

DOC = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "srm_sample.md"


def main() -> int:
    raw = Path(sys.argv[1] if len(sys.argv) > 1 else DOC).read_text(encoding="utf-8")

    # 1. parse: the heading tree becomes chapters and subsections
    corpus = parse_document(raw, "markdown-headings", doc_id="srm")
    chunks = chunk_by_subsection(corpus)
    print(f"parsed {len(chunks)} subsection chunks")
    smallest = min(chunks, key=lambda c: c.token_count)
    largest = max(chunks, key=lambda c: c.token_count)
    print(f"  token counts range {smallest.token_count}..{largest.token_count}")

    # 2. audit: chunks that open a sentence with the same words will pull
    # a router toward the wrong expert, so surface them before training
    report = audit_overlap(chunks, threshold_tokens=5)
    print(f"overlap entries at threshold 5: {len(report.entries)}")
    for entry in report.entries:
        print(f"  {entry.chunk_id_a} ~ {entry.chunk_id_b}: \"{entry.shared_prefix_text}\"")

    # 3. datasets: every chunk gets its own pairs; the orchestrator set is
    # the union, so routing supervision never leaks across experts
    backend = TemplateQuestionBackend(chunks)
    expert_datasets, orchestrator = build_qa_datasets(chunks, backend, n_questions=3, seed=7)
    split_counts = Counter(pair.split for pair in orchestrator.pairs)
    print(f"built {len(expert_datasets)} expert datasets, {len(orchestrator.pairs)} pairs")
    print(f"  splits: {dict(sorted(split_counts.items()))}")

    # 4. graph: tf-idf router over training questions, one expert per chunk
    profiles = {
        name: [p.question for p in ds.pairs if p.split == "train"]
        for name, ds in expert_datasets.items()
    }
    experts = {
        name: MemorizationExpert(name, ds.pairs, splits=("train",))
        for name, ds in expert_datasets.items()
    }
    graph = Graph(LexicalRouter(profiles), experts)

    # 5. ask: training questions come back verbatim from the right expert
    name = sorted(expert_datasets)[0]
    pair = next(p for p in expert_datasets[name].pairs if p.split == "train")
    answer = graph.answer(pair.question)
    print(f"\nQ: {pair.question}")
    print(f"A: {answer.text}")
    print(f"   routed to {answer.expert_name} (resolved {answer.trace.resolved_by})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
