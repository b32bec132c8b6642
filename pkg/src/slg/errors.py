"""Exception types shared across the slg package."""
from __future__ import annotations


class SlgError(Exception):
    """Base class for every error raised by this package."""


class ParseError(SlgError):
    """Malformed document input. Carries the offending line (1-based) when known."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        self.line = line
        self.offset = offset
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", offset {offset}" if offset is not None else "") + ")"
        super().__init__(message + where)


class EmptyCorpusError(SlgError):
    """Document parsed to zero sections."""


class ChunkingError(SlgError):
    """No sections exist at the requested chunking depth."""


class NameCollisionError(SlgError):
    """Two sections at the chunking depth normalize to the same expert name."""

    def __init__(self, name: str, paths: list[tuple[int, ...]]):
        self.name = name
        self.paths = paths
        rendered = ", ".join(".".join(str(p) for p in path) for path in paths)
        super().__init__(f"expert name {name!r} produced by multiple sections: {rendered}")


class InvalidTitleError(SlgError):
    """A section title normalizes to the empty string."""


class DatasetIntegrityError(SlgError):
    """A QA pair references an expert that no chunk defines."""


class DatasetLoadError(SlgError):
    """A dataset file line failed to parse or failed schema validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message + (f" (line {line})" if line is not None else ""))


class InvalidRequestError(SlgError):
    """A generation request violates the request contract."""


class BackendError(SlgError):
    """Base class for generation backend failures."""


class GenerationTimeoutError(BackendError):
    """The backend did not answer within the configured timeout."""

    def __init__(self, message: str, elapsed: float):
        self.elapsed = elapsed
        super().__init__(f"{message} (elapsed {elapsed:.3f}s)")


class ProtocolError(BackendError):
    """A remote backend broke the wire protocol (bad status or bad JSON)."""

    def __init__(self, message: str, status: int | None = None, body_excerpt: str = ""):
        self.status = status
        self.body_excerpt = body_excerpt
        detail = message
        if status is not None:
            detail += f" (status {status})"
        if body_excerpt:
            detail += f": {body_excerpt}"
        super().__init__(detail)


class EmptyGenerationError(BackendError):
    """The backend returned empty content."""


class QAGenerationError(SlgError):
    """Question generation failed for a chunk; wraps the backend failure."""

    def __init__(self, chunk_id: str, message: str):
        self.chunk_id = chunk_id
        super().__init__(f"chunk {chunk_id}: {message}")


class QuestionFormatError(SlgError):
    """The backend's question list could not be parsed. Carries the raw output."""

    def __init__(self, message: str, raw_output: str):
        self.raw_output = raw_output
        super().__init__(f"{message}; raw output: {raw_output!r}")


class GraphBuildError(SlgError):
    """The graph spec cannot be assembled into a valid star topology."""


class RoutingError(SlgError):
    """The orchestrator output could not be resolved to a registered expert."""

    def __init__(self, orchestrator_raw: str, registered: list[str], trace=None):
        self.orchestrator_raw = orchestrator_raw
        self.registered = registered
        self.trace = trace
        super().__init__(
            f"orchestrator output {orchestrator_raw!r} does not resolve to any of: "
            + ", ".join(registered)
        )


class ExpertInvocationError(SlgError):
    """A resolved expert backend failed while answering. Carries the partial trace."""

    def __init__(self, expert_name: str, message: str, trace=None):
        self.expert_name = expert_name
        self.trace = trace
        super().__init__(f"expert {expert_name!r} failed: {message}")


class ManifestError(SlgError):
    """A sweep/run manifest is invalid or references missing files."""


class RunExistsError(SlgError):
    """A run with this run_id already has persisted results."""

    def __init__(self, run_id: str):
        self.run_id = run_id
        super().__init__(f"run {run_id!r} already exists; pass force to overwrite")


class RunError(SlgError):
    """An experiment run failed; a partial record was persisted."""
