"""Shared text units: one tokenizer for chunk sizing, routing, matching, and metrics.

Every token count in the system comes from :func:`tokenize` so that chunk
sizes, overlap audits, similarity scores, and metric denominators agree.
"""
from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+|\n+")


@dataclass(frozen=True)
class TokenSequence:
    """Tokens produced by the shared tokenizer, tagged with their role."""

    tokens: tuple[str, ...]
    source: str = "prediction"  # "prediction" | "reference"

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def tokenize(text: str, source: str = "prediction") -> TokenSequence:
    """NFC-normalize, lowercase, split punctuation from words, split on whitespace.

    "The cat sat." -> (the, cat, sat, .); "Wing  Fuel-Bay" -> (wing, fuel, -, bay).
    Empty input yields an empty sequence.
    """
    normalized = unicodedata.normalize("NFC", text).lower()
    return TokenSequence(tuple(_TOKEN_RE.findall(normalized)), source)


def token_count(text: str) -> int:
    return len(tokenize(text))


def split_sentences(text: str) -> list[str]:
    """Split on '.', '!', '?' followed by whitespace, or on line breaks.

    Line breaks are sentence boundaries so an unpunctuated heading line never
    fuses onto the paragraph that follows it. Terminators are kept.
    """
    parts = [part.strip() for part in _SENTENCE_SPLIT_RE.split(text)]
    return [part for part in parts if part]


def stem(token: str) -> str:
    """Suffix-stripping stemmer covering plural/ed/ing classes.

    Deterministic and intentionally shallow; adequate for technical English
    where it folds e.g. "repairs"/"repaired"/"repairing" onto "repair".
    """
    t = token
    if len(t) > 4 and t.endswith("sses"):
        t = t[:-2]
    elif len(t) > 4 and t.endswith("ies"):
        t = t[:-3] + "y"
    elif t.endswith("ss"):
        pass
    elif len(t) > 3 and t.endswith("s"):
        t = t[:-1]
    if len(t) > 5 and t.endswith("ing"):
        t = t[:-3]
    elif len(t) > 4 and t.endswith("ed"):
        t = t[:-2]
    return t
