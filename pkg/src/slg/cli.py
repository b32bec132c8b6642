"""Command-line interface.

Subcommands cover the pipeline end to end: ``ingest`` (document to chunks
plus overlap audit), ``dataset`` (chunks to expert and orchestrator QA
datasets), ``serve`` (HTTP front end for a graph), ``query`` (one-shot
answer), ``eval`` (metric report for a graph over a test set), and
``sweep`` (staged hyperparameter sweep with manifests, records, and a
summary table).

Exit codes: 0 on success, 1 for usage or input errors, 2 when ``ingest
--fail-on-overlap`` finds overlap entries, 3 when ``query`` cannot route.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from .backends import RemoteClient
from .corpus import (
    DEFAULT_MIN_TOKENS,
    DEFAULT_OVERLAP_THRESHOLD,
    DEFAULT_TARGET_DEPTH,
    audit_overlap,
    chunk_by_subsection,
    overlap_report_to_json,
    parse_document,
    read_chunks_jsonl,
    write_chunks_jsonl,
)
from .dataset import (
    DEFAULT_RATIOS,
    TemplateQuestionBackend,
    build_qa_datasets,
    load_pairs_jsonl,
    save_dataset_jsonl,
)
from .errors import RoutingError, SlgError
from .evaluation import evaluate_run, render_comparison_csv
from .experiment import default_sweep, load_manifest, load_plan, run_experiment, run_sweep
from .graph import build_graph_from_spec, load_graph_spec
from .service import create_app

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_AUDIT = 2
EXIT_ROUTING = 3

OUT_DIR_ENV = "SLG_OUT_DIR"

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit 1, not argparse's default 2.

    Exit code 2 is reserved for overlap-audit failures.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_out_argument(parser: argparse.ArgumentParser, help_text: str) -> None:
    env_default = os.environ.get(OUT_DIR_ENV)
    parser.add_argument(
        "--out",
        default=env_default,
        required=env_default is None,
        help=f"{help_text} (defaults to ${OUT_DIR_ENV} when set)",
    )


def build_parser(defaults: dict | None = None) -> argparse.ArgumentParser:
    parser = _Parser(prog="slg", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of default option values")
    parser.add_argument(
        "--log-level",
        default="warning",
        choices=("debug", "info", "warning", "error"),
        help="logging verbosity",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse a document into chunks and audit overlap")
    p.add_argument("--input", required=True, help="document file to parse")
    p.add_argument(
        "--format",
        default="markdown-headings",
        choices=("markdown-headings", "manifest-json"),
    )
    p.add_argument("--depth", type=int, default=DEFAULT_TARGET_DEPTH, help="chunking depth")
    p.add_argument("--min-tokens", type=int, default=DEFAULT_MIN_TOKENS)
    p.add_argument("--overlap-threshold", type=int, default=DEFAULT_OVERLAP_THRESHOLD)
    p.add_argument(
        "--fail-on-overlap",
        action="store_true",
        help="exit 2 when the audit reports any entry",
    )
    _add_out_argument(p, "directory for chunks.jsonl and overlap.json")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("dataset", help="build QA datasets from chunks")
    p.add_argument("--chunks", required=True, help="chunks.jsonl from ingest")
    p.add_argument("--backend", default="template", choices=("template", "remote"))
    p.add_argument("--base-url", help="chat-completion endpoint (remote backend)")
    p.add_argument("--model", help="model name (remote backend)")
    p.add_argument("--n-questions", type=int, default=3)
    p.add_argument(
        "--ratios",
        default=",".join(str(r) for r in DEFAULT_RATIOS),
        help="train,validation,test fractions",
    )
    p.add_argument("--answer-mode", default="full", choices=("full", "extractive"))
    p.add_argument("--seed", type=int, default=0)
    _add_out_argument(p, "directory for expert datasets and the manifest")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("serve", help="serve a graph over HTTP")
    p.add_argument("--graph-spec", required=True, help="graph description JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--trace-dir", help="directory for trace JSONL files")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", help="answer one query through a graph")
    p.add_argument("--graph-spec", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--trace", action="store_true", help="include the routing trace")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score a graph against a test set")
    p.add_argument("--graph-spec", required=True)
    p.add_argument("--test", required=True, help="JSONL of QA pairs; only split=test is scored")
    p.add_argument("--report", required=True, help="where to write the metric report JSON")
    p.add_argument("--csv", help="optional comparison CSV path")
    p.add_argument("--name", default="slg", help="system label for the CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a staged hyperparameter sweep")
    p.add_argument("--plan", default="default", help='"default" or a plan JSON path')
    p.add_argument("--datasets", required=True, help="dataset directory from the dataset command")
    p.add_argument("--mode", default="deterministic", choices=("deterministic", "remote"))
    p.add_argument("--base-url", help="serving endpoint for remote mode")
    p.add_argument("--system", default="slg", choices=("slg", "single-model"))
    p.add_argument("--selection-metric", default="exact_match")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite existing run records")
    p.add_argument(
        "--run-pending",
        action="store_true",
        help="execute previously pending manifests against --base-url instead of planning",
    )
    _add_out_argument(p, "directory for manifests, runs, and the summary")
    p.set_defaults(func=cmd_sweep)

    if defaults:
        # subparsers parse into their own namespace, so defaults must be
        # pushed into each of them, not just the root parser
        parser.set_defaults(**defaults)
        for subparser in sub.choices.values():
            subparser.set_defaults(**defaults)
    return parser


def cmd_ingest(args) -> int:
    raw = Path(args.input).read_text(encoding="utf-8")
    corpus = parse_document(raw, args.format)
    chunks = chunk_by_subsection(corpus, target_depth=args.depth, min_tokens=args.min_tokens)
    report = audit_overlap(chunks, threshold_tokens=args.overlap_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_chunks_jsonl(chunks, out / "chunks.jsonl")
    (out / "overlap.json").write_text(overlap_report_to_json(report) + "\n", encoding="utf-8")
    print(f"wrote {len(chunks)} chunks ({out / 'chunks.jsonl'})")
    print(f"overlap entries at threshold {report.threshold}: {len(report.entries)}")
    if args.fail_on_overlap and report.entries:
        print("overlap audit failed: chunks share long sentence prefixes", file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise SlgError(f"--ratios needs three comma-separated numbers, got {text!r}")
    try:
        ratios = tuple(float(p) for p in parts)
    except ValueError:
        raise SlgError(f"--ratios needs three comma-separated numbers, got {text!r}")
    return ratios  # type: ignore[return-value]


def cmd_dataset(args) -> int:
    chunks = read_chunks_jsonl(args.chunks)
    if args.backend == "template":
        backend = TemplateQuestionBackend(chunks)
    else:
        if not args.base_url or not args.model:
            print("error: --backend remote needs --base-url and --model", file=sys.stderr)
            return EXIT_USAGE
        backend = RemoteClient(args.base_url, args.model)
    ratios = _parse_ratios(args.ratios)
    try:
        expert_datasets, orchestrator = build_qa_datasets(
            chunks,
            backend,
            args.n_questions,
            ratios=ratios,
            seed=args.seed,
            answer_mode=args.answer_mode,
        )
    except (SlgError, ValueError) as exc:
        # everything is built in memory before anything is written
        print(f"error: {exc} (no output written)", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    experts_dir = out / "experts"
    if experts_dir.exists():
        shutil.rmtree(experts_dir)
    experts_dir.mkdir(parents=True, exist_ok=True)
    for name in sorted(expert_datasets):
        save_dataset_jsonl(expert_datasets[name], experts_dir / f"{name}.jsonl")
    save_dataset_jsonl(orchestrator, out / "orchestrator.jsonl")
    split_counts = {"train": 0, "validation": 0, "test": 0}
    for dataset in expert_datasets.values():
        for pair in dataset.pairs:
            split_counts[pair.split] += 1
    manifest = {
        "chunks": str(args.chunks),
        "backend": args.backend,
        "n_questions": args.n_questions,
        "ratios": list(ratios),
        "seed": args.seed,
        "answer_mode": args.answer_mode,
        "experts": {name: f"experts/{name}.jsonl" for name in sorted(expert_datasets)},
        "orchestrator": "orchestrator.jsonl",
        "pair_counts": {"total": sum(split_counts.values()), "by_split": split_counts},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    print(
        f"wrote {len(expert_datasets)} expert datasets and "
        f"{len(orchestrator.pairs)} orchestrator pairs ({out})"
    )
    return EXIT_OK


def _load_graph(graph_spec_path: str):
    spec = load_graph_spec(graph_spec_path)
    return build_graph_from_spec(spec, base_dir=Path(graph_spec_path).parent)


def cmd_serve(args) -> int:
    import uvicorn

    graph = _load_graph(args.graph_spec)
    app = create_app(graph, trace_dir=args.trace_dir)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except (OSError, SystemExit) as exc:
        print(f"error: could not serve on {args.host}:{args.port} ({exc})", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_query(args) -> int:
    graph = _load_graph(args.graph_spec)
    try:
        answer = graph.answer(args.query, seed=args.seed)
    except RoutingError as exc:
        payload = {"error": "routing_failure", "message": str(exc)}
        if exc.trace is not None:
            payload["trace"] = exc.trace.to_record()
        print(json.dumps(payload, ensure_ascii=False))
        return EXIT_ROUTING
    payload = {"answer": answer.text, "expert": answer.expert_name}
    if args.trace:
        payload["trace"] = answer.trace.to_record()
    print(json.dumps(payload, ensure_ascii=False))
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = load_pairs_jsonl(args.test)
    test_pairs = [p for p in pairs if p.split == "test"]
    if not test_pairs:
        print(f"error: no test-split pairs in {args.test}", file=sys.stderr)
        return EXIT_USAGE
    graph = _load_graph(args.graph_spec)
    report = evaluate_run(graph, test_pairs, seed=args.seed)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    if args.csv:
        csv_path = Path(args.csv)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(render_comparison_csv({args.name: report}), encoding="utf-8")
    routing = (
        f" routing_accuracy={report.routing_accuracy:.4f}"
        if report.routing_accuracy is not None
        else ""
    )
    print(
        f"n={report.n_examples} failures={report.failures} "
        f"exact_match={report.exact_match:.4f} rouge_l_f1={report.rouge_l_f1:.4f} "
        f"meteor={report.meteor:.4f}{routing}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.run_pending:
        return _run_pending(args)
    plan = default_sweep() if args.plan == "default" else load_plan(args.plan)
    result = run_sweep(
        plan,
        datasets_dir=args.datasets,
        out_dir=args.out,
        system=args.system,
        mode=args.mode,
        base_url=args.base_url,
        selection_metric=args.selection_metric,
        seed=args.seed,
        force=args.force,
    )
    statuses = [r.status for r in result.records]
    print(
        f"ran {len(result.records)} configs: "
        f"{statuses.count('complete')} complete, {statuses.count('pending')} pending"
    )
    for s in result.selections:
        print(
            f"stage {s.stage_index} ({s.tuned_field}): selected {s.selected_value} "
            f"[{s.selected_run_id}] {s.metric}={s.metric_value:.4f}"
        )
    print(f"summary: {Path(args.out) / 'sweep_summary.csv'}")
    return EXIT_OK


def _run_pending(args) -> int:
    if not args.base_url:
        print("error: --run-pending needs --base-url", file=sys.stderr)
        return EXIT_USAGE
    manifests_dir = Path(args.out) / "manifests"
    if not manifests_dir.is_dir():
        print(f"error: no manifests under {args.out}", file=sys.stderr)
        return EXIT_USAGE
    executed = 0
    for path in sorted(manifests_dir.glob("*.json")):
        manifest = load_manifest(path)
        record_path = Path(args.out) / "runs" / manifest["run_id"] / "record.json"
        if record_path.exists() and not args.force:
            continue
        manifest["backends"]["mode"] = "remote"
        manifest["backends"]["base_url"] = args.base_url
        record, _ = run_experiment(manifest, out_dir=args.out, force=args.force)
        print(f"{record.run_id}: {record.status}")
        executed += 1
    print(f"executed {executed} pending runs")
    return EXIT_OK


def _config_defaults(path: str) -> dict:
    try:
        defaults = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SlgError(f"cannot read config {path}: {exc}")
    if not isinstance(defaults, dict):
        raise SlgError(f"config {path} must hold a JSON object")
    normalized = {key.replace("-", "_"): value for key, value in defaults.items()}
    reserved = {"func", "command", "config"}.intersection(normalized)
    if reserved:
        raise SlgError(f"config {path} sets reserved keys: {sorted(reserved)}")
    return normalized


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    defaults = None
    if known.config:
        try:
            # defaults for optional flags only; required arguments must still
            # be given on the command line
            defaults = _config_defaults(known.config)
        except SlgError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    parser = build_parser(defaults)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=getattr(logging, args.log_level.upper()))
    try:
        return args.func(args)
    except (SlgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
