"""Small language graph: many narrow experts behind one router.

A document is chunked so each subsection belongs to exactly one expert;
each expert learns (or memorizes) only its own chunk, and an orchestrator
routes every query to exactly one expert. The package covers the full
loop: corpus parsing and chunk isolation, QA dataset construction, graph
assembly over pluggable generation backends, reference metrics, an HTTP
service, and staged hyperparameter sweeps.
"""
from .backends import (
    BackendCapabilities,
    ChatMessage,
    GenerationBackend,
    GenerationRequest,
    GenerationResponse,
    LexicalRouter,
    MemorizationExpert,
    NoisyRouter,
    RemoteClient,
    Usage,
    user_request,
)
from .corpus import (
    Chunk,
    Corpus,
    OverlapEntry,
    OverlapReport,
    Section,
    audit_overlap,
    chunk_by_subsection,
    normalize_expert_name,
    parse_document,
    read_chunks_jsonl,
    write_chunks_jsonl,
)
from .dataset import (
    Dataset,
    QAPair,
    TemplateQuestionBackend,
    build_expert_datasets,
    build_orchestrator_dataset,
    build_qa_datasets,
    generate_qa,
    load_dataset,
    load_pairs_jsonl,
    save_dataset_jsonl,
    split_dataset,
)
from .errors import SlgError
from .evaluation import (
    MeteorScore,
    MetricReport,
    RougeScore,
    evaluate_run,
    exact_match,
    lcs_length,
    meteor,
    render_comparison_csv,
    rouge_l,
)
from .experiment import (
    DEFAULT_BASELINE,
    ExperimentConfig,
    FixedHyperparameters,
    SweepPlan,
    SweepStage,
    carried_config,
    default_sweep,
    enumerate_configs,
    plan_to_manifests,
    run_experiment,
    run_sweep,
)
from .graph import (
    Answer,
    Graph,
    Resolution,
    RouteTrace,
    build_graph,
    build_graph_from_spec,
    load_graph_spec,
    resolve_expert_name,
    route_audit,
)
from .service import create_app
from .tokenization import TokenSequence, split_sentences, stem, token_count, tokenize

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # corpus
    "Corpus",
    "Section",
    "Chunk",
    "OverlapEntry",
    "OverlapReport",
    "parse_document",
    "chunk_by_subsection",
    "normalize_expert_name",
    "audit_overlap",
    "read_chunks_jsonl",
    "write_chunks_jsonl",
    # dataset
    "QAPair",
    "Dataset",
    "TemplateQuestionBackend",
    "generate_qa",
    "build_expert_datasets",
    "build_orchestrator_dataset",
    "build_qa_datasets",
    "split_dataset",
    "save_dataset_jsonl",
    "load_dataset",
    "load_pairs_jsonl",
    # backends
    "ChatMessage",
    "GenerationRequest",
    "GenerationResponse",
    "Usage",
    "BackendCapabilities",
    "GenerationBackend",
    "MemorizationExpert",
    "LexicalRouter",
    "NoisyRouter",
    "RemoteClient",
    "user_request",
    # graph
    "Graph",
    "Answer",
    "Resolution",
    "RouteTrace",
    "build_graph",
    "build_graph_from_spec",
    "load_graph_spec",
    "resolve_expert_name",
    "route_audit",
    # evaluation
    "RougeScore",
    "MeteorScore",
    "MetricReport",
    "lcs_length",
    "rouge_l",
    "exact_match",
    "meteor",
    "evaluate_run",
    "render_comparison_csv",
    # experiment
    "DEFAULT_BASELINE",
    "ExperimentConfig",
    "FixedHyperparameters",
    "SweepStage",
    "SweepPlan",
    "carried_config",
    "default_sweep",
    "enumerate_configs",
    "plan_to_manifests",
    "run_experiment",
    "run_sweep",
    # service
    "create_app",
    # tokenization
    "TokenSequence",
    "tokenize",
    "token_count",
    "split_sentences",
    "stem",
    # errors
    "SlgError",
]
