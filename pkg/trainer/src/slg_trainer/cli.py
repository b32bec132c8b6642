"""Command line entry points: finetune a manifest, serve its adapters."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import TrainerError
from .serving import create_serving_app, load_hosts
from .training import finetune


def _quiet_transformers() -> None:
    from transformers.utils import logging as hf_logging

    hf_logging.set_verbosity_error()
    hf_logging.disable_progress_bar()


def cmd_finetune(args) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read manifest: {exc}", file=sys.stderr)
        return 1
    try:
        artifacts = finetune(
            manifest,
            out_dir=args.out,
            base_model=args.base_model,
            base_dir=manifest_path.parent,
        )
    except TrainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    run_dir = Path(args.out) / manifest["trainer"]["output_dir"]
    # point the manifest at the report so the sweep runner can pick up
    # wall times when it records this run
    manifest.setdefault("trainer", {})["report"] = str(run_dir / "report.json")
    if args.base_model:
        manifest["trainer"].setdefault("base_model", str(args.base_model))
    manifest_path.write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )

    for artifact in artifacts:
        print(
            f"{artifact.expert_name}: {len(artifact.train_loss_curve)} epochs,"
            f" selected {artifact.selected_epoch} ({artifact.adapter_path})"
        )
    print(f"trained {len(artifacts)} adapters under {run_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    try:
        hosts = load_hosts(args.run_dir, base_model=args.base_model)
    except (TrainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    app = create_serving_app(hosts)
    print(f"serving {len(hosts)} adapters on {args.host}:{args.port}")
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except OSError as exc:
        print(f"error: could not serve: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slg-train", description="Fine-tune and serve per-expert adapters"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    finetune_parser = sub.add_parser("finetune", help="train adapters from a run manifest")
    finetune_parser.add_argument("--manifest", required=True, help="run manifest JSON")
    finetune_parser.add_argument("--out", required=True, help="sweep output root")
    finetune_parser.add_argument("--base-model", help="base model directory or id")
    finetune_parser.set_defaults(func=cmd_finetune)

    serve_parser = sub.add_parser("serve", help="serve trained adapters over HTTP")
    serve_parser.add_argument("--run-dir", required=True, help="run directory with adapters/")
    serve_parser.add_argument("--base-model", help="override the recorded base model")
    serve_parser.add_argument("--host", default="127.0.0.1")
    serve_parser.add_argument("--port", type=int, default=8800)
    serve_parser.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    _quiet_transformers()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
