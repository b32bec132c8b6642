import copy
import json
from pathlib import Path

import pytest

from slg_trainer import build_tiny_base

# two tiny manuals with disjoint vocabularies, so adapters trained on one
# cannot accidentally fit the other
ALPHA_PAIRS = [
    ("a:q1", "how do i patch the alpha panel", "apply a doubler patch to the alpha panel", "train"),
    ("a:q2", "what rivets does the alpha panel use", "the alpha panel uses solid rivets", "train"),
    ("a:q3", "when is the alpha panel replaced", "replace the alpha panel when cracked", "train"),
    ("a:q4", "who inspects the alpha panel", "the alpha panel inspector signs off", "validation"),
    ("a:q5", "where is the alpha panel drawing", "see the alpha panel drawing index", "test"),
]
BRAVO_PAIRS = [
    ("b:q1", "how do i torque the bravo fitting", "torque the bravo fitting to spec", "train"),
    ("b:q2", "what grease suits the bravo fitting", "use bearing grease on the bravo fitting", "train"),
    ("b:q3", "when is the bravo fitting serviced", "service the bravo fitting every cycle", "train"),
    ("b:q4", "who services the bravo fitting", "the bravo fitting crew services it", "validation"),
    ("b:q5", "where is the bravo fitting listed", "the bravo fitting appears in the catalog", "test"),
]
EXPERTS = {"ALPHA PANEL": ALPHA_PAIRS, "BRAVO FITTING": BRAVO_PAIRS}


def write_datasets(base: Path) -> dict:
    """Lay out expert JSONL files plus the orchestrator union."""
    experts_dir = base / "experts"
    experts_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    orchestrator_lines = []
    for name, rows in sorted(EXPERTS.items()):
        lines = []
        for pair_id, question, answer, split in rows:
            record = {
                "pair_id": pair_id,
                "question": question,
                "answer": answer,
                "expert_name": name,
                "split": split,
            }
            lines.append(json.dumps(record))
            orchestrator_lines.append(
                json.dumps({**record, "answer": name})
            )
        path = experts_dir / f"{name}.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths[name] = str(path)
    orchestrator = base / "orchestrator.jsonl"
    orchestrator.write_text("\n".join(orchestrator_lines) + "\n", encoding="utf-8")
    return {"experts": paths, "orchestrator": str(orchestrator)}


def make_config(**overrides) -> dict:
    """A manifest config with the standard fixed block."""
    fixed = {
        "lora_dropout": 0.05,
        "optimizer": "adamw",
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "weight_decay": 0.001,
        "label_smoothing": 0.01,
        "lr_schedule": "linear",
        "warmup_ratio": 0.03,
        "max_grad_norm": 0.5,
        "per_device_batch_size": 2,
        "num_epochs": 25,
        "early_stopping_patience": 3,
        "save_total_limit": 4,
        "load_best_model_at_end": True,
        "half_precision": True,
    }
    fixed.update({k: v for k, v in overrides.items() if k in fixed})
    config = {
        "learning_rate": 1e-3,
        "lora_rank": 4,
        "gradient_accumulation": 2,
        "lora_alpha": 8,
        "fixed": fixed,
    }
    config.update({k: v for k, v in overrides.items() if k in config and k != "fixed"})
    return config


def make_manifest(datasets: dict, base_model: str, run_id: str = "smoke-s0c0-deadbeef", **config_overrides) -> dict:
    return {
        "schema_version": 1,
        "run_id": run_id,
        "system": "smoke",
        "stage": {"index": 0, "tuned_field": "learning_rate", "candidate_index": 0, "candidate_value": 1e-3},
        "config": make_config(**config_overrides),
        "datasets": copy.deepcopy(datasets),
        "backends": {"mode": "remote", "base_url": None, "models": {}, "orchestrator_model": "orchestrator"},
        "trainer": {"output_dir": f"runs/{run_id}", "selection_split": "validation", "base_model": base_model},
        "selection_metric": "exact_match",
        "seed": 0,
    }


def corpus_texts() -> list[str]:
    texts = []
    for name, rows in EXPERTS.items():
        texts.append(name)
        for _, question, answer, _ in rows:
            texts.extend([question, answer])
    return texts


@pytest.fixture(scope="session", autouse=True)
def quiet_transformers():
    from transformers.utils import logging as hf_logging

    hf_logging.set_verbosity_error()
    hf_logging.disable_progress_bar()


@pytest.fixture(scope="session")
def tiny_base(tmp_path_factory) -> Path:
    return build_tiny_base(tmp_path_factory.mktemp("base-model"), corpus_texts(), seed=0)


@pytest.fixture(scope="session")
def dataset_paths(tmp_path_factory) -> dict:
    return write_datasets(tmp_path_factory.mktemp("datasets"))


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory, tiny_base, dataset_paths):
    """One full finetune shared by training, serving, and integration tests."""
    from slg_trainer import finetune

    out = tmp_path_factory.mktemp("smoke-out")
    manifest = make_manifest(dataset_paths, str(tiny_base), num_epochs=6)
    artifacts = finetune(manifest, out_dir=out)
    return manifest, out, artifacts
