"""Question-answer dataset construction from chunks.

Each chunk yields question-answer pairs whose answers are the chunk text
itself, so a fine-tuned (or memorizing) expert learns to reproduce its
subsection verbatim. Expert datasets are grouped strictly by chunk: a pair
never crosses experts. The orchestrator dataset mirrors every expert pair
but swaps the answer for the expert's name, which is the routing target.

Question generation goes through the generation-backend contract, so the
same pipeline can ask a remote model for questions or use the local
:class:`TemplateQuestionBackend`, which derives questions from each chunk's
most distinctive tokens and needs no model at all.
"""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, replace
from hashlib import sha256
from pathlib import Path
from random import Random
from typing import Iterable, Mapping, Sequence

from .backends import (
    BackendCapabilities,
    GenerationBackend,
    GenerationRequest,
    GenerationResponse,
    Usage,
    user_request,
)
from .corpus import Chunk
from .errors import (
    BackendError,
    DatasetIntegrityError,
    DatasetLoadError,
    QAGenerationError,
    QuestionFormatError,
    SlgError,
)
from .tokenization import split_sentences, token_count, tokenize

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
ORCHESTRATOR_NAME = "orchestrator"

QUESTION_PROMPT = (
    "Write {n} standalone questions a maintenance engineer could answer using "
    "only the passage below. One question per line, no numbering.\n\n"
    "PASSAGE:\n{passage}\n\nQUESTIONS:"
)

_PROMPT_N_RE = re.compile(r"Write (\d+) standalone questions")
_PROMPT_PASSAGE_RE = re.compile(r"PASSAGE:\n(.*)\n\nQUESTIONS:", re.DOTALL)
_LINE_PREFIX_RE = re.compile(r"^\s*(?:[-*•]|\(?\d+[.)]?)\s*")


@dataclass(frozen=True)
class QAPair:
    pair_id: str
    question: str
    answer: str
    expert_name: str
    split: str = "train"

    def __post_init__(self):
        for field_name in ("pair_id", "question", "answer", "expert_name"):
            if not getattr(self, field_name):
                raise ValueError(f"{field_name} must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class Dataset:
    name: str
    kind: str
    pairs: tuple[QAPair, ...]

    def __post_init__(self):
        if self.kind not in ("expert", "orchestrator"):
            raise ValueError(f"kind must be 'expert' or 'orchestrator', got {self.kind!r}")
        ids = [p.pair_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise DatasetIntegrityError(f"dataset {self.name!r} repeats pair ids")
        if self.kind == "expert":
            foreign = {p.expert_name for p in self.pairs} - {self.name}
            if foreign:
                raise DatasetIntegrityError(
                    f"expert dataset {self.name!r} holds pairs for {sorted(foreign)}"
                )
        else:
            mislabeled = [p.pair_id for p in self.pairs if p.answer != p.expert_name]
            if mislabeled:
                raise DatasetIntegrityError(
                    f"orchestrator answers must be expert names; bad pairs: {mislabeled[:5]}"
                )

    def subset(self, split: str) -> tuple[QAPair, ...]:
        return tuple(p for p in self.pairs if p.split == split)


class TemplateQuestionBackend(GenerationBackend):
    """Deterministic question writer driven by token statistics.

    Built over the chunk collection so it knows which tokens are distinctive
    (rare across chunks). Given the standard question prompt it emits the
    requested number of questions, each anchored on the passage heading and a
    rotating trio of the passage's most distinctive tokens. The request seed
    rotates phrasing, so different seeds give different (still deterministic)
    questions.
    """

    _TEMPLATES = (
        "What does the section on {label} specify regarding {terms}?",
        "According to {label}, what applies to {terms}?",
        "How does the guidance under {label} address {terms}?",
        "Within {label}, what is required concerning {terms}?",
        "What should an engineer consulting {label} know about {terms}?",
    )

    def __init__(self, chunks: Sequence[Chunk]):
        self._df: Counter[str] = Counter()
        for chunk in chunks:
            self._df.update(set(self._content_tokens(chunk.text)))
        self._n_docs = max(len(chunks), 1)

    @staticmethod
    def _content_tokens(text: str) -> list[str]:
        return [t for t in tokenize(text).tokens if t.isalnum() and not t.isdigit() and len(t) >= 3]

    @property
    def backend_id(self) -> str:
        return "template-questions"

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(deterministic=True, remote=False)

    def _idf(self, token: str) -> float:
        return math.log(self._n_docs / self._df.get(token, 1))

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        prompt = request.user_text
        n_match = _PROMPT_N_RE.search(prompt)
        passage_match = _PROMPT_PASSAGE_RE.search(prompt)
        if not n_match or not passage_match:
            raise BackendError("prompt does not match the question template")
        n = int(n_match.group(1))
        passage = passage_match.group(1)
        label = passage.splitlines()[0].strip() or "this section"
        tf = Counter(self._content_tokens(passage))
        ranked = sorted(tf, key=lambda t: (-self._idf(t), -tf[t], t))
        pool = ranked[: max(3 * n, 6)] or ["section"]
        lines = []
        for i in range(n):
            trio = []
            for k in range(3):
                term = pool[(i + k * n) % len(pool)]
                if term not in trio:
                    trio.append(term)
            if len(trio) == 1:
                terms = trio[0]
            else:
                terms = ", ".join(trio[:-1]) + " and " + trio[-1]
            template = self._TEMPLATES[(i + request.seed) % len(self._TEMPLATES)]
            lines.append(template.format(label=label, terms=terms))
        content = "\n".join(lines)
        return GenerationResponse(
            content=content,
            backend_id=self.backend_id,
            latency=0.0,
            usage=Usage(prompt_tokens=token_count(prompt), completion_tokens=token_count(content)),
        )


def _parse_question_lines(raw: str, expected: int) -> list[str]:
    lines = []
    for line in raw.splitlines():
        cleaned = _LINE_PREFIX_RE.sub("", line).strip()
        if cleaned:
            lines.append(cleaned)
    if not lines:
        raise QuestionFormatError("backend returned no question lines", raw_output=raw)
    if len(lines) < expected:
        raise QuestionFormatError(
            f"expected {expected} questions, got {len(lines)}", raw_output=raw
        )
    return lines[:expected]


def generate_qa(
    chunk: Chunk,
    backend: GenerationBackend,
    n_questions: int = 3,
    *,
    seed: int = 0,
    answer_mode: str = "full",
) -> list[QAPair]:
    """Produce ``n_questions`` pairs for one chunk.

    ``answer_mode`` is ``full`` (the answer is the whole chunk text, the
    memorization target) or ``extractive`` (the first sentence mentioning
    the question's leading content token, falling back to full text).
    """
    if n_questions < 1:
        raise ValueError("n_questions must be >= 1")
    if answer_mode not in ("full", "extractive"):
        raise ValueError(f"unknown answer_mode {answer_mode!r}")
    prompt = QUESTION_PROMPT.format(n=n_questions, passage=chunk.text)
    request = user_request(prompt, max_tokens=64 * n_questions, temperature=0.0, seed=seed)
    try:
        response = backend.generate(request)
    except QuestionFormatError:
        raise
    except SlgError as exc:
        raise QAGenerationError(chunk.chunk_id, str(exc))
    questions = _parse_question_lines(response.content, n_questions)
    pairs = []
    for i, question in enumerate(questions, start=1):
        answer = chunk.text
        if answer_mode == "extractive":
            answer = _extract_answer(chunk.text, question)
        pairs.append(
            QAPair(
                pair_id=f"{chunk.chunk_id}:q{i:03d}",
                question=question,
                answer=answer,
                expert_name=chunk.expert_name,
                split="train",
            )
        )
    return pairs


def _extract_answer(text: str, question: str) -> str:
    question_tokens = [t for t in tokenize(question).tokens if t.isalnum() and len(t) >= 3]
    sentences = split_sentences(text)
    for term in question_tokens:
        for sentence in sentences:
            if term in tokenize(sentence).tokens:
                return sentence
    return text


def build_expert_datasets(
    pairs: Iterable[QAPair], expected_experts: Iterable[str] | None = None
) -> dict[str, Dataset]:
    """Group pairs by expert, one dataset each.

    When ``expected_experts`` is given, an expert with no pairs or a pair
    naming an unknown expert is an integrity error rather than a silent gap.
    """
    grouped: dict[str, list[QAPair]] = {}
    for pair in pairs:
        grouped.setdefault(pair.expert_name, []).append(pair)
    if expected_experts is not None:
        expected = set(expected_experts)
        missing = expected - grouped.keys()
        unknown = grouped.keys() - expected
        if missing or unknown:
            raise DatasetIntegrityError(
                f"expert coverage mismatch: missing={sorted(missing)} unknown={sorted(unknown)}"
            )
    return {
        name: Dataset(name=name, kind="expert", pairs=tuple(sorted(group, key=lambda p: p.pair_id)))
        for name, group in grouped.items()
    }


def build_orchestrator_dataset(expert_datasets: Mapping[str, Dataset]) -> Dataset:
    """Mirror every expert pair with the expert's name as the answer.

    Pair ids and split tags carry over unchanged, so orchestrator train and
    test splits line up with the expert splits they route to.
    """
    pairs = []
    for name in sorted(expert_datasets):
        dataset = expert_datasets[name]
        if dataset.kind != "expert":
            raise DatasetIntegrityError(f"dataset {name!r} is not an expert dataset")
        for pair in dataset.pairs:
            pairs.append(replace(pair, answer=pair.expert_name))
    pairs.sort(key=lambda p: (p.expert_name, p.pair_id))
    return Dataset(name=ORCHESTRATOR_NAME, kind="orchestrator", pairs=tuple(pairs))


def _stratum_rng(seed: int, name: str) -> Random:
    digest = sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return Random(int.from_bytes(digest[:8], "big"))


def split_dataset(
    dataset: Dataset, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0
) -> Dataset:
    """Assign train/validation/test splits, stratified by expert.

    Each expert's pairs are shuffled with an rng derived from (seed, expert),
    so adding one expert never reshuffles another. Validation and test get at
    least one pair each when the stratum has three or more; smaller strata
    stay entirely in train (logged, since they cannot be stratified).
    """
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, validation, test)")
    if any(r < 0 for r in ratios) or ratios[0] <= 0:
        raise ValueError(f"ratios must be non-negative with train > 0, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    strata: dict[str, list[QAPair]] = {}
    for pair in dataset.pairs:
        strata.setdefault(pair.expert_name, []).append(pair)
    assigned: list[QAPair] = []
    for name in sorted(strata):
        group = sorted(strata[name], key=lambda p: p.pair_id)
        n = len(group)
        if n < 3:
            logger.warning(
                "stratum %r has %d pairs; too few to stratify, keeping all in train", name, n
            )
            assigned.extend(replace(p, split="train") for p in group)
            continue
        _stratum_rng(seed, name).shuffle(group)
        n_val = max(1, math.floor(n * ratios[1])) if ratios[1] > 0 else 0
        n_test = max(1, math.floor(n * ratios[2])) if ratios[2] > 0 else 0
        # keep at least one training pair, shrinking the larger holdout first
        while n - n_val - n_test < 1:
            if n_val >= n_test and n_val > 0:
                n_val -= 1
            else:
                n_test -= 1
        cursor = 0
        for split, count in (("test", n_test), ("validation", n_val)):
            assigned.extend(replace(p, split=split) for p in group[cursor : cursor + count])
            cursor += count
        assigned.extend(replace(p, split="train") for p in group[cursor:])
    assigned.sort(key=lambda p: p.pair_id)
    return Dataset(name=dataset.name, kind=dataset.kind, pairs=tuple(assigned))


def build_qa_datasets(
    chunks: Sequence[Chunk],
    backend: GenerationBackend,
    n_questions: int = 3,
    *,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    answer_mode: str = "full",
) -> tuple[dict[str, Dataset], Dataset]:
    """Full pipeline: chunks -> split expert datasets + orchestrator dataset.

    Expert datasets are split before the orchestrator dataset is derived, so
    the orchestrator inherits exactly the expert split boundaries.
    """
    pairs: list[QAPair] = []
    for chunk in chunks:
        pairs.extend(generate_qa(chunk, backend, n_questions, seed=seed, answer_mode=answer_mode))
    expert_datasets = build_expert_datasets(pairs, expected_experts=[c.expert_name for c in chunks])
    expert_datasets = {
        name: split_dataset(ds, ratios=ratios, seed=seed) for name, ds in expert_datasets.items()
    }
    orchestrator = build_orchestrator_dataset(expert_datasets)
    return expert_datasets, orchestrator


def pair_to_record(pair: QAPair) -> dict:
    return {
        "pair_id": pair.pair_id,
        "question": pair.question,
        "answer": pair.answer,
        "expert_name": pair.expert_name,
        "split": pair.split,
    }


def save_dataset_jsonl(dataset: Dataset, path: str | Path) -> None:
    lines = [json.dumps(pair_to_record(p), ensure_ascii=False) for p in dataset.pairs]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_pairs_jsonl(path: str | Path) -> list[QAPair]:
    pairs = []
    required = ("pair_id", "question", "answer", "expert_name", "split")
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetLoadError(f"invalid JSON: {exc.msg}", line=lineno)
        missing = [key for key in required if key not in record]
        if missing:
            raise DatasetLoadError(f"missing fields {missing}", line=lineno)
        try:
            pairs.append(QAPair(**{key: record[key] for key in required}))
        except ValueError as exc:
            raise DatasetLoadError(str(exc), line=lineno)
    return pairs


def load_dataset(path: str | Path, name: str | None = None, kind: str | None = None) -> Dataset:
    """Read a dataset back, inferring kind and name when not given.

    A non-empty file whose every answer equals its expert name is an
    orchestrator dataset; anything else is an expert dataset. An expert
    dataset is named after its pairs' (single) expert name, not the file
    stem, so renaming a file never breaks the name/pair integrity check.
    """
    pairs = load_pairs_jsonl(path)
    if kind is None:
        is_routing = bool(pairs) and all(p.answer == p.expert_name for p in pairs)
        kind = "orchestrator" if is_routing else "expert"
    if name is None:
        expert_names = {p.expert_name for p in pairs}
        if kind == "expert" and len(expert_names) == 1:
            name = next(iter(expert_names))
        else:
            name = Path(path).stem
    return Dataset(name=name, kind=kind, pairs=tuple(pairs))
