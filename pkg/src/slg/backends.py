"""Generation backends behind a single chat-style contract.

Every component that produces text (experts, routers, remote models) accepts
a :class:`GenerationRequest` and returns a :class:`GenerationResponse`, so
graphs can mix deterministic in-process backends with remote fine-tuned
models without changing call sites.

Deterministic backends double as measurement instruments: the memorization
expert replays its dataset verbatim, and the noisy router misroutes at a
configured rate, which lets evaluation isolate routing error from answer
error.
"""
from __future__ import annotations

import hashlib
import math
import os
import random
import threading
import time
import unicodedata
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import requests

from .errors import (
    BackendError,
    EmptyGenerationError,
    GenerationTimeoutError,
    InvalidRequestError,
    ProtocolError,
)
from .tokenization import token_count, tokenize

_ROLES = ("system", "user", "assistant")

API_TOKEN_ENV = "SLG_API_TOKEN"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise InvalidRequestError(f"unknown role {self.role!r}; expected one of {_ROLES}")


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[ChatMessage, ...]
    max_tokens: int = 512
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.messages:
            raise InvalidRequestError("request carries no messages")
        if not any(m.role == "user" and m.content.strip() for m in self.messages):
            raise InvalidRequestError("request carries no non-empty user message")
        if self.max_tokens < 1:
            raise InvalidRequestError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0.0:
            raise InvalidRequestError(f"temperature must be >= 0, got {self.temperature}")

    @property
    def user_text(self) -> str:
        """Content of the last user message: the query a backend answers."""
        for message in reversed(self.messages):
            if message.role == "user":
                return message.content
        raise InvalidRequestError("request carries no user message")


def user_request(
    text: str,
    system: str | None = None,
    *,
    max_tokens: int = 512,
    temperature: float = 0.0,
    seed: int = 0,
) -> GenerationRequest:
    messages: list[ChatMessage] = []
    if system is not None:
        messages.append(ChatMessage(role="system", content=system))
    messages.append(ChatMessage(role="user", content=text))
    return GenerationRequest(
        messages=tuple(messages), max_tokens=max_tokens, temperature=temperature, seed=seed
    )


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class GenerationResponse:
    content: str
    backend_id: str
    latency: float
    usage: Usage = field(default_factory=Usage)


@dataclass(frozen=True)
class BackendCapabilities:
    deterministic: bool
    remote: bool


class GenerationBackend(ABC):
    """Anything that turns a chat request into text."""

    @property
    @abstractmethod
    def backend_id(self) -> str: ...

    @abstractmethod
    def capabilities(self) -> BackendCapabilities: ...

    @abstractmethod
    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


def normalize_lookup(text: str) -> str:
    """Matching key for verbatim-recall lookups: NFC, casefold, one-space runs."""
    return " ".join(unicodedata.normalize("NFC", text).casefold().split())


def _pair_fields(pair) -> tuple[str, str, str, str]:
    if isinstance(pair, Mapping):
        return (
            pair["pair_id"],
            pair["question"],
            pair["answer"],
            pair.get("split", "train"),
        )
    return (pair.pair_id, pair.question, pair.answer, getattr(pair, "split", "train"))


def _usage_for(request: GenerationRequest, content: str) -> Usage:
    prompt = sum(token_count(m.content) for m in request.messages)
    return Usage(prompt_tokens=prompt, completion_tokens=token_count(content))


class MemorizationExpert(GenerationBackend):
    """Expert that answers by recalling its dataset.

    Stands in for a perfectly memorized fine-tune: an exact
    (normalized) question match returns the stored answer, otherwise the
    answer of the highest Jaccard-overlap question wins, ties going to the
    lowest pair id. Useful as a ceiling: with correct routing it scores
    perfect exact match on its own training questions.
    """

    def __init__(self, name: str, pairs: Iterable, splits: Sequence[str] | None = ("train",)):
        self.name = name
        self._entries: list[tuple[str, str, frozenset[str], str]] = []
        exact: dict[str, tuple[str, str]] = {}
        for pair in pairs:
            pair_id, question, answer, split = _pair_fields(pair)
            if splits is not None and split not in splits:
                continue
            key = normalize_lookup(question)
            if key not in exact or pair_id < exact[key][0]:
                exact[key] = (pair_id, answer)
            self._entries.append((pair_id, question, frozenset(tokenize(question).tokens), answer))
        self._exact = exact
        self._entries.sort(key=lambda e: e[0])

    @property
    def backend_id(self) -> str:
        return f"memorization:{self.name}"

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(deterministic=True, remote=False)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        start = time.perf_counter()
        query = request.user_text
        hit = self._exact.get(normalize_lookup(query))
        if hit is not None:
            answer = hit[1]
        else:
            if not self._entries:
                raise BackendError(f"expert {self.name!r} holds no pairs to recall")
            query_tokens = frozenset(tokenize(query).tokens)
            best_score = -1.0
            answer = self._entries[0][3]
            for _pair_id, _question, tokens, candidate in self._entries:
                union = len(query_tokens | tokens)
                score = (len(query_tokens & tokens) / union) if union else 0.0
                if score > best_score:
                    best_score = score
                    answer = candidate
        return GenerationResponse(
            content=answer,
            backend_id=self.backend_id,
            latency=time.perf_counter() - start,
            usage=_usage_for(request, answer),
        )


class LexicalRouter(GenerationBackend):
    """TF-IDF router over expert question profiles.

    Each expert's training questions form one bag-of-tokens document;
    queries are scored by cosine similarity against those profiles with
    idf = ln(number of experts / document frequency). This is the
    deterministic orchestrator: its reply is exactly one expert name.
    """

    def __init__(self, profiles: Mapping[str, Sequence[str]]):
        if not profiles:
            raise BackendError("router needs at least one expert profile")
        self._names = sorted(profiles)
        counts = {name: Counter() for name in self._names}
        for name in self._names:
            for question in profiles[name]:
                counts[name].update(tokenize(question).tokens)
        df = Counter()
        for name in self._names:
            df.update(set(counts[name]))
        n = len(self._names)
        self._idf = {token: math.log(n / d) for token, d in df.items()}
        self._vectors: dict[str, dict[str, float]] = {}
        self._norms: dict[str, float] = {}
        for name in self._names:
            vec = {t: c * self._idf[t] for t, c in counts[name].items()}
            self._vectors[name] = vec
            self._norms[name] = math.sqrt(sum(w * w for w in vec.values()))

    @classmethod
    def fit(cls, question_sets: Mapping[str, Iterable[str]]) -> "LexicalRouter":
        return cls({name: list(questions) for name, questions in question_sets.items()})

    @property
    def expert_names(self) -> tuple[str, ...]:
        return tuple(self._names)

    @property
    def backend_id(self) -> str:
        return f"lexical-router:{len(self._names)}"

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(deterministic=True, remote=False)

    def score(self, query: str) -> dict[str, float]:
        query_counts = Counter(tokenize(query).tokens)
        query_vec = {
            t: c * self._idf[t] for t, c in query_counts.items() if self._idf.get(t, 0.0) != 0.0
        }
        query_norm = math.sqrt(sum(w * w for w in query_vec.values()))
        scores: dict[str, float] = {}
        for name in self._names:
            vec = self._vectors[name]
            denom = query_norm * self._norms[name]
            if denom == 0.0:
                scores[name] = 0.0
                continue
            shared = query_vec.keys() & vec.keys()
            scores[name] = sum(query_vec[t] * vec[t] for t in shared) / denom
        return scores

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        start = time.perf_counter()
        scores = self.score(request.user_text)
        # max score wins; ties fall to the lexicographically smallest name
        winner = min(self._names, key=lambda name: (-scores[name], name))
        return GenerationResponse(
            content=winner,
            backend_id=self.backend_id,
            latency=time.perf_counter() - start,
            usage=_usage_for(request, winner),
        )


def _stable_unit(seed: int, tag: str, key: str) -> float:
    digest = hashlib.sha256(f"{seed}:{tag}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


class NoisyRouter(GenerationBackend):
    """Router that is right with probability ``p_correct``, per query.

    Wraps a truth table (question -> expert). Each query draws from a hash
    of (seed, normalized query), so a given query always routes the same
    way regardless of evaluation order, and misroutes pick uniformly among
    the wrong experts. ``p_correct=1.0`` is the routing oracle.
    """

    def __init__(
        self,
        truth: Mapping[str, str],
        names: Sequence[str],
        p_correct: float = 1.0,
        seed: int = 0,
    ):
        if not 0.0 <= p_correct <= 1.0:
            raise BackendError(f"p_correct must be within [0, 1], got {p_correct}")
        if not names:
            raise BackendError("router needs at least one expert name")
        self._truth = {normalize_lookup(q): name for q, name in truth.items()}
        self._names = sorted(set(names))
        self.p_correct = p_correct
        self.seed = seed

    @property
    def backend_id(self) -> str:
        return f"noisy-router:p={self.p_correct}"

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(deterministic=True, remote=False)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        start = time.perf_counter()
        key = normalize_lookup(request.user_text)
        correct = self._truth.get(key)
        if correct is None:
            index = int(_stable_unit(self.seed, "unknown", key) * len(self._names))
            choice = self._names[min(index, len(self._names) - 1)]
        elif len(self._names) == 1 or _stable_unit(self.seed, "draw", key) < self.p_correct:
            choice = correct
        else:
            others = [n for n in self._names if n != correct]
            index = int(_stable_unit(self.seed, "wrong", key) * len(others))
            choice = others[min(index, len(others) - 1)]
        return GenerationResponse(
            content=choice,
            backend_id=self.backend_id,
            latency=time.perf_counter() - start,
            usage=_usage_for(request, choice),
        )


class RemoteClient(GenerationBackend):
    """Chat-completion client for a fine-tuned model served over HTTP.

    POSTs ``{model, messages, max_tokens, temperature, seed}`` to
    ``{base_url}/v1/chat/completions`` and reads the first choice's message
    content. Connection failures and 5xx responses are retried with
    exponential backoff until the retry budget is spent; 4xx responses and
    malformed bodies are protocol errors and are not retried; a timeout
    surfaces immediately with the elapsed time. At most ``max_in_flight``
    requests run concurrently.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_token: str | None = None,
        timeout: float = 30.0,
        retry_budget: int = 2,
        backoff_base: float = 0.25,
        backoff_factor: float = 2.0,
        backoff_jitter: float = 0.2,
        max_in_flight: int = 4,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_token = api_token if api_token is not None else os.environ.get(API_TOKEN_ENV)
        self.timeout = timeout
        self.retry_budget = retry_budget
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.backoff_jitter = backoff_jitter
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._session = requests.Session()

    @property
    def backend_id(self) -> str:
        return f"remote:{self.model}"

    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(deterministic=False, remote=True)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_token:
            headers["Authorization"] = f"Bearer {self.api_token}"
        return headers

    def _sleep_before_retry(self, attempt: int) -> None:
        delay = self.backoff_base * self.backoff_factor ** (attempt - 1)
        delay *= 1.0 + random.uniform(-self.backoff_jitter, self.backoff_jitter)
        time.sleep(max(delay, 0.0))

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "seed": request.seed,
        }
        url = f"{self.base_url}/v1/chat/completions"
        start = time.perf_counter()
        attempt = 0
        with self._semaphore:
            while True:
                attempt += 1
                failure: str
                status: int | None = None
                try:
                    response = self._session.post(
                        url, json=payload, headers=self._headers(), timeout=self.timeout
                    )
                except requests.Timeout:
                    raise GenerationTimeoutError(
                        f"no response from {url} within {self.timeout}s",
                        elapsed=time.perf_counter() - start,
                    )
                except requests.ConnectionError as exc:
                    failure = f"connection failure: {exc}"
                else:
                    status = response.status_code
                    if status >= 500:
                        failure = f"server error {status}"
                    elif status >= 400:
                        raise ProtocolError(
                            f"request rejected with status {status}",
                            status=status,
                            body_excerpt=response.text[:200],
                        )
                    else:
                        return self._parse(response, request, start)
                if attempt > self.retry_budget:
                    message = f"retry budget exhausted after {attempt} attempts: {failure}"
                    if status is not None:
                        raise ProtocolError(message, status=status)
                    raise BackendError(message)
                self._sleep_before_retry(attempt)

    def _parse(self, response, request: GenerationRequest, start: float) -> GenerationResponse:
        try:
            body = response.json()
        except ValueError:
            raise ProtocolError(
                "response body is not JSON",
                status=response.status_code,
                body_excerpt=response.text[:200],
            )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError(
                "response body lacks choices[0].message.content",
                status=response.status_code,
                body_excerpt=response.text[:200],
            )
        if content is None or not str(content).strip():
            raise EmptyGenerationError(f"backend {self.backend_id} returned empty content")
        usage = body.get("usage") or {}
        return GenerationResponse(
            content=str(content),
            backend_id=self.backend_id,
            latency=time.perf_counter() - start,
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
        )
