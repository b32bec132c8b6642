"""Star-topology graph: one orchestrator routing to single-subject experts.

The orchestrator is itself a generation backend whose reply is read as an
expert name. Replies rarely come back byte-exact from a generative model,
so resolution normalizes the raw reply and, under the fuzzy policy, accepts
the nearest registered name within a token-level edit distance. Every query
produces a :class:`RouteTrace` whether it succeeds or not; failures raise
typed errors that carry the trace for diagnosis.
"""
from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .backends import (
    GenerationBackend,
    LexicalRouter,
    MemorizationExpert,
    RemoteClient,
    user_request,
)
from .corpus import normalize_expert_name
from .dataset import load_pairs_jsonl
from .errors import (
    ExpertInvocationError,
    GraphBuildError,
    InvalidTitleError,
    RoutingError,
    SlgError,
)

ROUTING_SYSTEM_PROMPT = (
    "You route maintenance questions to exactly one expert.\n"
    "The experts are:\n{names}\n"
    "Reply with exactly one expert name from the list and nothing else."
)
ROUTING_MAX_TOKENS = 64


@dataclass(frozen=True)
class Resolution:
    """How raw orchestrator output maps onto registered expert names."""

    mode: str = "fuzzy"
    max_edit_distance: int = 2

    def __post_init__(self):
        if self.mode not in ("exact", "fuzzy"):
            raise ValueError(f"mode must be 'exact' or 'fuzzy', got {self.mode!r}")
        if self.max_edit_distance < 0:
            raise ValueError("max_edit_distance must be >= 0")


@dataclass(frozen=True)
class RouteTrace:
    trace_id: str
    query: str
    orchestrator_raw: str
    expert_name: str | None
    resolved_by: str
    route_latency: float
    answer_latency: float | None
    orchestrator_backend: str
    expert_backend: str | None

    def to_record(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "query": self.query,
            "orchestrator_raw": self.orchestrator_raw,
            "expert_name": self.expert_name,
            "resolved_by": self.resolved_by,
            "route_latency": self.route_latency,
            "answer_latency": self.answer_latency,
            "orchestrator_backend": self.orchestrator_backend,
            "expert_backend": self.expert_backend,
        }


@dataclass(frozen=True)
class Answer:
    text: str
    expert_name: str
    trace: RouteTrace


def _token_edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    previous = list(range(len(b) + 1))
    for i, token_a in enumerate(a, start=1):
        current = [i]
        for j, token_b in enumerate(b, start=1):
            cost = 0 if token_a == token_b else 1
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost))
        previous = current
    return previous[-1]


def resolve_expert_name(
    raw: str, registered: Sequence[str], resolution: Resolution = Resolution()
) -> tuple[str | None, str]:
    """Map raw orchestrator output to a registered name.

    Returns ``(name, "exact")`` when the normalized reply matches a
    registered name outright, ``(name, "fuzzy")`` for the nearest name
    within the edit-distance bound (ties to the lexicographically smallest),
    and ``(None, "failed")`` otherwise.
    """
    try:
        normalized = normalize_expert_name(raw)
    except InvalidTitleError:
        return None, "failed"
    if normalized in registered:
        return normalized, "exact"
    if resolution.mode == "fuzzy":
        tokens = normalized.split()
        best_name = None
        best_distance = resolution.max_edit_distance + 1
        for name in sorted(registered):
            distance = _token_edit_distance(tokens, name.split())
            if distance < best_distance:
                best_distance = distance
                best_name = name
        if best_name is not None:
            return best_name, "fuzzy"
    return None, "failed"


class Graph:
    """One orchestrator plus a frozen registry of expert backends."""

    def __init__(
        self,
        orchestrator: GenerationBackend,
        experts: Mapping[str, GenerationBackend],
        resolution: Resolution = Resolution(),
    ):
        self.orchestrator = orchestrator
        self.experts: Mapping[str, GenerationBackend] = MappingProxyType(dict(experts))
        self.resolution = resolution
        self._routing_system = ROUTING_SYSTEM_PROMPT.format(
            names="\n".join(f"- {name}" for name in self.expert_names)
        )

    @property
    def expert_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.experts))

    def route(self, query: str, *, seed: int = 0) -> RouteTrace:
        """Ask the orchestrator where ``query`` belongs.

        Raises :class:`RoutingError` (trace attached) when the reply cannot
        be resolved to a registered expert.
        """
        request = user_request(
            query,
            system=self._routing_system,
            max_tokens=ROUTING_MAX_TOKENS,
            temperature=0.0,
            seed=seed,
        )
        start = time.perf_counter()
        try:
            response = self.orchestrator.generate(request)
        except SlgError as exc:
            trace = self._trace(query, f"<error: {exc}>", None, "failed", time.perf_counter() - start)
            raise RoutingError(str(exc), registered=list(self.expert_names), trace=trace)
        raw = response.content
        name, method = resolve_expert_name(raw, self.expert_names, self.resolution)
        trace = self._trace(query, raw, name, method, time.perf_counter() - start)
        if name is None:
            raise RoutingError(raw, registered=list(self.expert_names), trace=trace)
        return trace

    def answer(self, query: str, *, seed: int = 0, max_tokens: int = 512) -> Answer:
        """Route ``query`` and return the chosen expert's verbatim reply."""
        trace = self.route(query, seed=seed)
        expert = self.experts[trace.expert_name]
        request = user_request(query, max_tokens=max_tokens, temperature=0.0, seed=seed)
        start = time.perf_counter()
        try:
            response = expert.generate(request)
        except SlgError as exc:
            failed = replace(
                trace, expert_backend=expert.backend_id,
                answer_latency=time.perf_counter() - start,
            )
            raise ExpertInvocationError(trace.expert_name, str(exc), trace=failed)
        done = replace(
            trace, expert_backend=expert.backend_id, answer_latency=time.perf_counter() - start
        )
        return Answer(text=response.content, expert_name=trace.expert_name, trace=done)

    def _trace(
        self, query: str, raw: str, name: str | None, method: str, route_latency: float
    ) -> RouteTrace:
        return RouteTrace(
            trace_id=uuid.uuid4().hex,
            query=query,
            orchestrator_raw=raw,
            expert_name=name,
            resolved_by=method,
            route_latency=route_latency,
            answer_latency=None,
            orchestrator_backend=self.orchestrator.backend_id,
            expert_backend=None,
        )


def build_graph(
    orchestrator: GenerationBackend,
    experts: Mapping[str, GenerationBackend],
    resolution: Resolution = Resolution(),
) -> Graph:
    """Validate and assemble a star graph.

    Expert names must be non-empty, unique, and already in normalized form
    (fixed points of name normalization), so routing output and registry
    keys live in the same space.
    """
    if not experts:
        raise GraphBuildError("a graph needs at least one expert")
    for name in experts:
        try:
            fixed = normalize_expert_name(name)
        except InvalidTitleError as exc:
            raise GraphBuildError(f"invalid expert name {name!r}: {exc}")
        if fixed != name:
            raise GraphBuildError(
                f"expert name {name!r} is not normalized (expected {fixed!r})"
            )
    return Graph(orchestrator=orchestrator, experts=experts, resolution=resolution)


@dataclass(frozen=True)
class ExpertRouteStats:
    correct: int
    total: int
    failed: int


@dataclass(frozen=True)
class RouteAudit:
    accuracy: float
    total: int
    per_expert: Mapping[str, ExpertRouteStats]


def route_audit(graph: Graph, pairs: Iterable, *, seed: int = 0) -> RouteAudit:
    """Measure routing accuracy against labeled pairs.

    ``pairs`` need ``question`` and ``expert_name`` attributes (orchestrator
    or expert pairs both work). Routing failures count as incorrect and are
    tallied per expert.
    """
    counts: dict[str, list[int]] = {}
    total = 0
    correct = 0
    for pair in pairs:
        total += 1
        stats = counts.setdefault(pair.expert_name, [0, 0, 0])
        stats[1] += 1
        try:
            trace = graph.route(pair.question, seed=seed)
        except RoutingError:
            stats[2] += 1
            continue
        if trace.expert_name == pair.expert_name:
            stats[0] += 1
            correct += 1
    if total == 0:
        raise ValueError("route_audit needs at least one labeled pair")
    return RouteAudit(
        accuracy=correct / total,
        total=total,
        per_expert={
            name: ExpertRouteStats(correct=c, total=t, failed=f)
            for name, (c, t, f) in sorted(counts.items())
        },
    )


def load_graph_spec(path: str | Path) -> dict:
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphBuildError(f"graph spec {path} is not valid JSON: {exc.msg}")
    if not isinstance(spec, dict) or "experts" not in spec or "orchestrator" not in spec:
        raise GraphBuildError(f"graph spec {path} must define 'orchestrator' and 'experts'")
    return spec


def build_graph_from_spec(spec: dict, *, base_dir: str | Path = ".") -> Graph:
    """Instantiate a graph from its JSON description.

    Backend types: ``memorization`` (params: dataset path, optional splits),
    ``lexical-router`` (params: optional name->dataset-path map; defaults to
    the experts' own datasets), ``remote`` (params passed to the HTTP
    client). Relative dataset paths resolve against ``base_dir``.
    """
    base = Path(base_dir)

    def resolve_path(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    expert_specs = spec.get("experts", [])
    if not isinstance(expert_specs, list) or not expert_specs:
        raise GraphBuildError("graph spec lists no experts")
    experts: dict[str, GenerationBackend] = {}
    expert_dataset_paths: dict[str, Path] = {}
    for entry in expert_specs:
        name = entry.get("name")
        backend_spec = entry.get("backend", {})
        if not name:
            raise GraphBuildError("expert entry is missing a name")
        if name in experts:
            raise GraphBuildError(f"expert {name!r} appears twice")
        experts[name] = _build_backend(name, backend_spec, resolve_path, expert_dataset_paths)

    orch_spec = spec.get("orchestrator", {})
    orchestrator = _build_orchestrator(orch_spec, resolve_path, expert_dataset_paths)

    res_spec = spec.get("resolution", {})
    resolution = Resolution(
        mode=res_spec.get("mode", "fuzzy"),
        max_edit_distance=res_spec.get("max_edit_distance", 2),
    )
    return build_graph(orchestrator, experts, resolution)


def _build_backend(name, backend_spec, resolve_path, expert_dataset_paths) -> GenerationBackend:
    backend_type = backend_spec.get("type")
    params = backend_spec.get("params", {})
    if backend_type == "memorization":
        dataset = params.get("dataset")
        if not dataset:
            raise GraphBuildError(f"memorization expert {name!r} needs a dataset path")
        dataset_path = resolve_path(dataset)
        expert_dataset_paths[name] = dataset_path
        splits = params.get("splits", ["train"])
        return MemorizationExpert(name, load_pairs_jsonl(dataset_path), splits=splits)
    if backend_type == "remote":
        return RemoteClient(**params)
    raise GraphBuildError(f"unknown expert backend type {backend_type!r} for {name!r}")


def _build_orchestrator(orch_spec, resolve_path, expert_dataset_paths) -> GenerationBackend:
    backend_type = orch_spec.get("type")
    params = orch_spec.get("params", {})
    if backend_type == "lexical-router":
        dataset_map = params.get("datasets")
        if dataset_map:
            paths = {name: resolve_path(p) for name, p in dataset_map.items()}
        elif expert_dataset_paths:
            paths = dict(expert_dataset_paths)
        else:
            raise GraphBuildError(
                "lexical-router orchestrator needs dataset paths (none given, and no "
                "memorization experts to borrow them from)"
            )
        splits = set(params.get("splits", ["train"]))
        profiles = {
            name: [p.question for p in load_pairs_jsonl(path) if p.split in splits]
            for name, path in sorted(paths.items())
        }
        return LexicalRouter(profiles)
    if backend_type == "remote":
        return RemoteClient(**params)
    raise GraphBuildError(f"unknown orchestrator backend type {backend_type!r}")
