"""Structured-document parsing, subsection chunking, and overlap auditing.

Engineering manuals arrive as markdown (ATX headings) or as a JSON manifest
tree. Both parse into a :class:`Corpus` of ordered :class:`Section` values,
which :func:`chunk_by_subsection` turns into isolated per-subsection chunks:
each chunk keeps a logical beginning and ending (a subsection title plus its
body), and each chunk feeds exactly one expert downstream.

:func:`audit_overlap` reports the failure mode chunk isolation exists to
prevent: sentences in different chunks that share a long token prefix and
then diverge, which blends together during fine-tuning.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    ChunkingError,
    DatasetLoadError,
    EmptyCorpusError,
    InvalidTitleError,
    NameCollisionError,
    ParseError,
)
from .tokenization import split_sentences, token_count, tokenize

DEFAULT_TARGET_DEPTH = 2
DEFAULT_MIN_TOKENS = 50
DEFAULT_OVERLAP_THRESHOLD = 5

_HEADING_RE = re.compile(r"^(#{1,6})(?:\s+(.*?))?\s*$")
# A bare letter needs at least one "." or ")" to count as numbering, so a
# title like "A Question of Balance" keeps its article.
_LEADING_NUMBERING_RE = re.compile(
    r"^\s*(?:[0-9]+(?:[.)][0-9A-Za-z]*)*[.)]?|[A-Za-z](?:[.)][0-9A-Za-z]*)+)\s+(?=\S)"
)
_NAME_CHARS_RE = re.compile(r"[^0-9A-Za-z \-]+")


@dataclass(frozen=True)
class Section:
    """One heading-delimited region of a document.

    ``path`` is the ordered list of 1-based heading indices from the document
    root; its length equals ``depth``.
    """

    path: tuple[int, ...]
    title: str
    body: str
    depth: int

    def __post_init__(self):
        if len(self.path) != self.depth:
            raise ValueError(f"path {self.path} does not match depth {self.depth}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


@dataclass(frozen=True)
class Corpus:
    doc_id: str
    title: str
    sections: tuple[Section, ...]

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        paths = [s.path for s in self.sections]
        if len(set(paths)) != len(paths):
            raise ValueError("section paths must be unique within a corpus")


@dataclass(frozen=True)
class Chunk:
    """An isolated training fragment: one subsection's title plus body text."""

    chunk_id: str
    expert_name: str
    source_path: tuple[int, ...]
    text: str
    token_count: int

    def __post_init__(self):
        if not self.expert_name:
            raise ValueError("expert_name must be non-empty")
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")


@dataclass(frozen=True)
class OverlapEntry:
    chunk_id_a: str
    chunk_id_b: str
    shared_prefix_token_count: int
    shared_prefix_text: str


@dataclass(frozen=True)
class OverlapReport:
    entries: tuple[OverlapEntry, ...]
    threshold: int


def parse_document(
    raw: str,
    format: str = "markdown-headings",
    *,
    doc_id: str | None = None,
    title: str = "",
) -> Corpus:
    """Parse a document into its section tree.

    ``format`` is ``markdown-headings`` (ATX ``#`` headings define the tree)
    or ``manifest-json`` (a JSON tree of ``{title, body, children}`` whose
    root names the document). Section order matches document order and bodies
    exclude heading lines. Raises :class:`ParseError` on malformed input and
    :class:`EmptyCorpusError` when no sections result.
    """
    if format == "markdown-headings":
        sections = _parse_markdown(raw)
        doc_title = title
    elif format == "manifest-json":
        doc_title, sections = _parse_manifest(raw)
        if title:
            doc_title = title
    else:
        raise ValueError(f"unknown document format {format!r}")
    if not sections:
        raise EmptyCorpusError("document contains no sections")
    if doc_id is None:
        doc_id = "doc-" + hashlib.sha256(raw.encode("utf-8")).hexdigest()[:12]
    return Corpus(doc_id=doc_id, title=doc_title, sections=tuple(sections))


def _parse_markdown(raw: str) -> list[Section]:
    sections: list[Section] = []
    # (depth, path, title, body lines) for the section currently being filled
    open_stack: list[list] = []
    finished: list[tuple[tuple[int, ...], str, list[str]]] = []
    child_counts: list[int] = []  # child_counts[d] = headings seen at depth d+1 under current parent

    def close_to(depth: int) -> None:
        while open_stack and open_stack[-1][0] >= depth:
            d, path, sec_title, body_lines = open_stack.pop()
            finished.append((path, sec_title, body_lines))

    for lineno, line in enumerate(raw.splitlines(), start=1):
        match = _HEADING_RE.match(line)
        if match:
            depth = len(match.group(1))
            heading_title = (match.group(2) or "").rstrip("# ").strip()
            current_depth = open_stack[-1][0] if open_stack else 0
            if depth > current_depth + 1:
                raise ParseError(
                    f"heading level jumps from {current_depth} to {depth}", line=lineno
                )
            close_to(depth)
            del child_counts[depth:]
            while len(child_counts) < depth:
                child_counts.append(0)
            child_counts[depth - 1] += 1
            parent_path = open_stack[-1][1] if open_stack else ()
            path = tuple(parent_path) + (child_counts[depth - 1],)
            open_stack.append([depth, path, heading_title, []])
        else:
            if not open_stack:
                if line.strip():
                    raise ParseError("content before first heading", line=lineno)
                continue
            open_stack[-1][3].append(line)
    close_to(1)

    sections = [
        Section(path=path, title=sec_title, body="\n".join(body).strip("\n"), depth=len(path))
        for path, sec_title, body in finished
    ]
    sections.sort(key=lambda s: s.path)
    return sections


def _parse_manifest(raw: str) -> tuple[str, list[Section]]:
    try:
        root = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid manifest JSON: {exc.msg}", line=exc.lineno, offset=exc.colno)
    if not isinstance(root, dict):
        raise ParseError("manifest root must be an object")
    doc_title = str(root.get("title", ""))
    if str(root.get("body", "") or "").strip():
        raise ParseError("manifest root must not carry body text; move it into a section")
    sections: list[Section] = []

    def walk(node: dict, path: tuple[int, ...]) -> None:
        if not isinstance(node, dict):
            raise ParseError(f"manifest node at {'.'.join(map(str, path))} must be an object")
        sections.append(
            Section(
                path=path,
                title=str(node.get("title", "")),
                body=str(node.get("body", "") or "").strip("\n"),
                depth=len(path),
            )
        )
        children = node.get("children", [])
        if not isinstance(children, list):
            raise ParseError(f"children at {'.'.join(map(str, path))} must be a list")
        for index, child in enumerate(children, start=1):
            walk(child, path + (index,))

    children = root.get("children", [])
    if not isinstance(children, list):
        raise ParseError("manifest root children must be a list")
    for index, child in enumerate(children, start=1):
        walk(child, (index,))
    return doc_title, sections


def normalize_expert_name(title: str) -> str:
    """Normalize a section title into an expert label.

    Uppercases, collapses whitespace, strips leading numbering tokens
    ("3.1", "A.") and drops characters other than alphanumerics, spaces,
    and hyphens. Idempotent. Raises :class:`InvalidTitleError` when nothing
    survives.
    """
    if not title or not title.strip():
        raise InvalidTitleError(f"title {title!r} is empty")
    text = title.strip()
    while True:
        stripped = _LEADING_NUMBERING_RE.sub("", text, count=1)
        if stripped == text:
            break
        text = stripped
    text = _NAME_CHARS_RE.sub("", text)
    text = re.sub(r"\s+", " ", text).strip().upper()
    if not text:
        raise InvalidTitleError(f"title {title!r} normalizes to an empty name")
    return text


def chunk_by_subsection(
    corpus: Corpus,
    target_depth: int = DEFAULT_TARGET_DEPTH,
    min_tokens: int = DEFAULT_MIN_TOKENS,
) -> list[Chunk]:
    """Emit one chunk per section at ``target_depth``.

    A chunk's text is its section's title, the section body, and every
    descendant body, in document order. Sections above the target depth
    contribute no chunk. Chunks under ``min_tokens`` are merged into the
    preceding chunk (the first chunk, having no predecessor, is carried
    forward into the next one), so tiny subsections never become degenerate
    experts.
    """
    if target_depth < 1:
        raise ValueError("target_depth must be >= 1")
    targets = [s for s in corpus.sections if s.depth == target_depth]
    if not targets:
        raise ChunkingError(f"no sections at depth {target_depth} in corpus {corpus.doc_id!r}")

    names: dict[str, list[tuple[int, ...]]] = {}
    for section in targets:
        name = normalize_expert_name(section.title)
        names.setdefault(name, []).append(section.path)
    for name, paths in names.items():
        if len(paths) > 1:
            raise NameCollisionError(name, paths)

    raw_chunks: list[Chunk] = []
    for section in targets:
        descendants = [
            s
            for s in corpus.sections
            if s.depth > target_depth and s.path[:target_depth] == section.path
        ]
        parts = [section.title]
        parts.extend(s.body for s in [section] + descendants if s.body.strip())
        text = "\n\n".join(parts)
        raw_chunks.append(
            Chunk(
                chunk_id=f"{corpus.doc_id}:{'.'.join(map(str, section.path))}",
                expert_name=normalize_expert_name(section.title),
                source_path=section.path,
                text=text,
                token_count=token_count(text),
            )
        )

    if min_tokens <= 0:
        return raw_chunks

    def absorb(base: Chunk, extra_text: str) -> Chunk:
        combined = base.text + "\n\n" + extra_text
        return Chunk(
            chunk_id=base.chunk_id,
            expert_name=base.expert_name,
            source_path=base.source_path,
            text=combined,
            token_count=token_count(combined),
        )

    merged: list[Chunk] = []
    carried: str | None = None
    for index, chunk in enumerate(raw_chunks):
        text = chunk.text if carried is None else carried + "\n\n" + chunk.text
        carried = None
        count = token_count(text)
        if count >= min_tokens or (not merged and index == len(raw_chunks) - 1):
            merged.append(
                Chunk(
                    chunk_id=chunk.chunk_id,
                    expert_name=chunk.expert_name,
                    source_path=chunk.source_path,
                    text=text,
                    token_count=count,
                )
            )
        elif merged:
            merged.append(absorb(merged.pop(), text))
        else:
            carried = text
    return merged


def _common_prefix_len(a: tuple[str, ...], b: tuple[str, ...]) -> int:
    n = 0
    for token_a, token_b in zip(a, b):
        if token_a != token_b:
            break
        n += 1
    return n


def audit_overlap(chunks: list[Chunk], threshold_tokens: int = DEFAULT_OVERLAP_THRESHOLD) -> OverlapReport:
    """Report chunk pairs whose sentences collide on a long token prefix.

    A pair is reported when any sentence in one chunk shares a token prefix
    of at least ``threshold_tokens`` with any sentence in the other; the
    entry carries the longest such prefix. Entries are deduplicated per
    unordered pair and ordered by descending prefix length, then chunk ids.
    """
    if threshold_tokens < 1:
        raise ValueError("threshold_tokens must be >= 1")
    sentence_tokens: list[list[tuple[str, ...]]] = [
        [tokenize(s).tokens for s in split_sentences(chunk.text)] for chunk in chunks
    ]
    entries: list[OverlapEntry] = []
    for i in range(len(chunks)):
        for j in range(i + 1, len(chunks)):
            best = 0
            best_prefix: tuple[str, ...] = ()
            for sent_a in sentence_tokens[i]:
                for sent_b in sentence_tokens[j]:
                    n = _common_prefix_len(sent_a, sent_b)
                    if n > best:
                        best = n
                        best_prefix = sent_a[:n]
            if best >= threshold_tokens:
                id_a, id_b = sorted((chunks[i].chunk_id, chunks[j].chunk_id))
                entries.append(
                    OverlapEntry(
                        chunk_id_a=id_a,
                        chunk_id_b=id_b,
                        shared_prefix_token_count=best,
                        shared_prefix_text=" ".join(best_prefix),
                    )
                )
    entries.sort(key=lambda e: (-e.shared_prefix_token_count, e.chunk_id_a, e.chunk_id_b))
    return OverlapReport(entries=tuple(entries), threshold=threshold_tokens)


def chunk_to_record(chunk: Chunk) -> dict:
    return {
        "chunk_id": chunk.chunk_id,
        "expert_name": chunk.expert_name,
        "source_path": list(chunk.source_path),
        "text": chunk.text,
        "token_count": chunk.token_count,
    }


def write_chunks_jsonl(chunks: list[Chunk], path: str | Path) -> None:
    lines = [json.dumps(chunk_to_record(c), ensure_ascii=False) for c in chunks]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_chunks_jsonl(path: str | Path) -> list[Chunk]:
    chunks: list[Chunk] = []
    required = ("chunk_id", "expert_name", "source_path", "text", "token_count")
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
        chunks.append(
            Chunk(
                chunk_id=record["chunk_id"],
                expert_name=record["expert_name"],
                source_path=tuple(record["source_path"]),
                text=record["text"],
                token_count=record["token_count"],
            )
        )
    return chunks


def overlap_report_to_json(report: OverlapReport) -> str:
    payload = {
        "threshold": report.threshold,
        "entries": [
            {
                "chunk_id_a": e.chunk_id_a,
                "chunk_id_b": e.chunk_id_b,
                "shared_prefix_token_count": e.shared_prefix_token_count,
                "shared_prefix_text": e.shared_prefix_text,
            }
            for e in report.entries
        ],
    }
    return json.dumps(payload, indent=2, ensure_ascii=False)
