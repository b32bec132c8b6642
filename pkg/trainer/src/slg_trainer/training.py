"""Fine-tune one low-rank adapter per expert from a run manifest.

The manifest (produced by the sweep tooling) names the expert and
orchestrator JSONL datasets and carries the full hyperparameter block.
Training applies that block exactly and re-emits it as
``training_args.json``; the dump being field-equal to the manifest config
is the contract that nothing was silently substituted. Each adapter is
trained only on its own dataset file, never a concatenation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .data import IGNORE_INDEX, Pair, batched, collate, encode_pair, load_pairs, split_pairs
from .errors import DatasetMismatchError, TrainerError, TrainingFailedError
from .lora import adapter_parameters, adapter_state_dict, inject_adapters, load_adapter_state, reset_adapters

ORCHESTRATOR_NAME = "orchestrator"

FIXED_KEYS = (
    "lora_dropout",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "weight_decay",
    "label_smoothing",
    "lr_schedule",
    "warmup_ratio",
    "max_grad_norm",
    "per_device_batch_size",
    "num_epochs",
    "early_stopping_patience",
    "save_total_limit",
    "load_best_model_at_end",
    "half_precision",
)


@dataclass(frozen=True)
class TrainingSettings:
    """The applied hyperparameters, parsed strictly from a manifest config."""

    learning_rate: float
    lora_rank: int
    gradient_accumulation: int
    lora_alpha: int
    lora_dropout: float
    optimizer: str
    adam_beta1: float
    adam_beta2: float
    weight_decay: float
    label_smoothing: float
    lr_schedule: str
    warmup_ratio: float
    max_grad_norm: float
    per_device_batch_size: int
    num_epochs: int
    early_stopping_patience: int
    save_total_limit: int
    load_best_model_at_end: bool
    half_precision: bool

    @classmethod
    def from_config(cls, config: dict) -> "TrainingSettings":
        """Strict parse: unknown or missing fields are errors, not warnings.

        Strictness is what makes the training_args echo meaningful - the
        dump equals the manifest config only if every field was understood.
        """
        if not isinstance(config, dict):
            raise TrainerError("manifest config must be an object")
        top = {"learning_rate", "lora_rank", "gradient_accumulation", "lora_alpha", "fixed"}
        unknown = set(config) - top
        if unknown:
            raise TrainerError(f"unknown config fields: {sorted(unknown)}")
        missing = top - set(config)
        if missing:
            raise TrainerError(f"missing config fields: {sorted(missing)}")
        fixed = config["fixed"]
        if not isinstance(fixed, dict):
            raise TrainerError("config.fixed must be an object")
        if set(fixed) != set(FIXED_KEYS):
            extra = sorted(set(fixed) - set(FIXED_KEYS))
            absent = sorted(set(FIXED_KEYS) - set(fixed))
            raise TrainerError(f"fixed block mismatch (unknown {extra}, missing {absent})")
        settings = cls(
            learning_rate=float(config["learning_rate"]),
            lora_rank=int(config["lora_rank"]),
            gradient_accumulation=int(config["gradient_accumulation"]),
            lora_alpha=int(config["lora_alpha"]),
            **{key: fixed[key] for key in FIXED_KEYS},
        )
        if settings.optimizer != "adamw":
            raise TrainerError(f"unsupported optimizer {settings.optimizer!r}")
        if settings.lr_schedule != "linear":
            raise TrainerError(f"unsupported lr schedule {settings.lr_schedule!r}")
        return settings

    def to_config_dict(self) -> dict:
        """Rebuild the manifest-shaped config from the applied values."""
        return {
            "learning_rate": self.learning_rate,
            "lora_rank": self.lora_rank,
            "gradient_accumulation": self.gradient_accumulation,
            "lora_alpha": self.lora_alpha,
            "fixed": {key: getattr(self, key) for key in FIXED_KEYS},
        }


@dataclass(frozen=True)
class AdapterArtifact:
    expert_name: str
    base_model_id: str
    adapter_path: Path
    config: dict
    train_loss_curve: tuple[tuple[int, float], ...]
    selected_epoch: int

    def __post_init__(self):
        if self.selected_epoch < 1 or self.selected_epoch > len(self.train_loss_curve):
            raise ValueError(
                f"selected_epoch {self.selected_epoch} outside the trained range"
            )


def early_stop_epoch(losses: Sequence[float], patience: int) -> tuple[int, int]:
    """(stop_epoch, selected_epoch) for a per-epoch validation loss curve.

    Both are 1-indexed. The selected epoch is the earliest minimum;
    training stops once the loss has failed to improve for ``patience``
    consecutive epochs, otherwise it runs the whole curve. A plateau
    counts as no improvement: only a strictly lower loss resets patience.
    """
    if not losses:
        raise ValueError("need at least one epoch loss")
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    best = 0
    since = 0
    for i in range(1, len(losses)):
        if losses[i] < losses[best]:
            best, since = i, 0
        else:
            since += 1
            if since >= patience:
                return i + 1, best + 1
    return len(losses), best + 1


def _linear_schedule(optimizer, *, warmup_steps: int, total_steps: int):
    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / max(warmup_steps, 1)
        remaining = max(total_steps - step, 0)
        return remaining / max(total_steps - warmup_steps, 1)

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def _batch_loss(model, batch: dict, label_smoothing: float) -> tuple[torch.Tensor, int]:
    """Smoothed cross entropy over assistant tokens, plus the token count."""
    logits = model(
        input_ids=batch["input_ids"], attention_mask=batch["attention_mask"]
    ).logits
    shifted = logits[:, :-1, :].contiguous()
    targets = batch["labels"][:, 1:].contiguous()
    loss = nn.functional.cross_entropy(
        shifted.view(-1, shifted.size(-1)),
        targets.view(-1),
        ignore_index=IGNORE_INDEX,
        label_smoothing=label_smoothing,
    )
    return loss, int((targets != IGNORE_INDEX).sum())


def _adapter_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def _prune_checkpoints(checkpoint_dir: Path, keep_epoch: int, limit: int) -> None:
    # oldest first, but the best epoch's checkpoint is never deleted
    existing = sorted(
        checkpoint_dir.glob("epoch-*"), key=lambda p: int(p.name.split("-")[1])
    )
    removable = [p for p in existing if int(p.name.split("-")[1]) != keep_epoch]
    while len(existing) > limit and removable:
        victim = removable.pop(0)
        existing.remove(victim)
        for child in victim.iterdir():
            child.unlink()
        victim.rmdir()


def train_adapter(
    model,
    tokenizer,
    pairs: Sequence[Pair],
    settings: TrainingSettings,
    *,
    name: str,
    base_model_id: str,
    adapter_dir: Path,
    seed: int,
) -> AdapterArtifact:
    """Train the injected adapters on one dataset and persist the result.

    The adapters are re-initialized from a per-adapter seed first, so one
    loaded base model serves every expert without state bleeding across
    trainings. Validation loss drives early stopping and best-epoch
    selection; without a validation split the train loss stands in.
    """
    train = split_pairs(pairs, "train")
    if not train:
        raise DatasetMismatchError(f"{name}: dataset has no train pairs")
    validation = split_pairs(pairs, "validation")

    reset_adapters(model, _adapter_seed(seed, name))
    model.train()

    encoded_train = [encode_pair(tokenizer, pair) for pair in train]
    encoded_val = [encode_pair(tokenizer, pair) for pair in validation]
    pad_id = tokenizer.pad_token_id

    optimizer = torch.optim.AdamW(
        adapter_parameters(model),
        lr=settings.learning_rate,
        betas=(settings.adam_beta1, settings.adam_beta2),
        weight_decay=settings.weight_decay,
    )
    steps_per_epoch = math.ceil(
        len(encoded_train) / settings.per_device_batch_size / settings.gradient_accumulation
    )
    total_steps = steps_per_epoch * settings.num_epochs
    scheduler = _linear_schedule(
        optimizer,
        warmup_steps=math.ceil(settings.warmup_ratio * total_steps),
        total_steps=total_steps,
    )

    adapter_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_dir = adapter_dir / "checkpoints"
    checkpoint_dir.mkdir(exist_ok=True)

    curve: list[tuple[int, float, float]] = []
    monitor_losses: list[float] = []
    best_state = None
    shuffler = random.Random(_adapter_seed(seed, name) ^ 0xA5A5A5)

    for epoch in range(1, settings.num_epochs + 1):
        order = list(range(len(encoded_train)))
        shuffler.shuffle(order)
        batches = batched([encoded_train[i] for i in order], settings.per_device_batch_size)

        model.train()
        optimizer.zero_grad()
        epoch_loss = 0.0
        for index, batch in enumerate(batches):
            loss, _ = _batch_loss(model, collate(batch, pad_id), settings.label_smoothing)
            epoch_loss += float(loss.detach())
            (loss / settings.gradient_accumulation).backward()
            at_boundary = (index + 1) % settings.gradient_accumulation == 0
            if at_boundary or index + 1 == len(batches):
                torch.nn.utils.clip_grad_norm_(
                    adapter_parameters(model), settings.max_grad_norm
                )
                optimizer.step()
                scheduler.step()
                optimizer.zero_grad()
        train_loss = epoch_loss / len(batches)

        if encoded_val:
            model.eval()
            with torch.no_grad():
                val_batches = batched(encoded_val, settings.per_device_batch_size)
                val_loss = sum(
                    float(_batch_loss(model, collate(b, pad_id), settings.label_smoothing)[0])
                    for b in val_batches
                ) / len(val_batches)
        else:
            val_loss = train_loss

        curve.append((epoch, train_loss, val_loss))
        monitor_losses.append(val_loss)
        _, selected = early_stop_epoch(monitor_losses, settings.early_stopping_patience)
        if selected == epoch:
            best_state = adapter_state_dict(model)

        epoch_dir = checkpoint_dir / f"epoch-{epoch}"
        epoch_dir.mkdir(exist_ok=True)
        torch.save(adapter_state_dict(model), epoch_dir / "adapter.pt")
        _prune_checkpoints(checkpoint_dir, selected, settings.save_total_limit)

        if epoch - selected >= settings.early_stopping_patience:
            break

    stop_epoch, selected_epoch = early_stop_epoch(
        monitor_losses, settings.early_stopping_patience
    )
    assert stop_epoch == len(curve)
    if settings.load_best_model_at_end and best_state is not None:
        load_adapter_state(model, best_state)

    torch.save(best_state, adapter_dir / "adapter.pt")
    (adapter_dir / "adapter_config.json").write_text(
        json.dumps(
            {
                "expert_name": name,
                "base_model_id": base_model_id,
                "lora_rank": settings.lora_rank,
                "lora_alpha": settings.lora_alpha,
                "lora_dropout": settings.lora_dropout,
                "selected_epoch": selected_epoch,
                "epochs_run": len(curve),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    with open(adapter_dir / "loss_curve.csv", "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_loss", "validation_loss"])
        writer.writerows(curve)

    return AdapterArtifact(
        expert_name=name,
        base_model_id=base_model_id,
        adapter_path=adapter_dir,
        config=settings.to_config_dict(),
        train_loss_curve=tuple((epoch, train) for epoch, train, _ in curve),
        selected_epoch=selected_epoch,
    )


def _validate_datasets(manifest: dict, base_dir: Path) -> dict[str, list[Pair]]:
    """Load every dataset up front; nothing trains if any file is bad."""
    datasets = manifest.get("datasets")
    if not isinstance(datasets, dict) or "experts" not in datasets or "orchestrator" not in datasets:
        raise DatasetMismatchError("manifest.datasets must name experts and orchestrator")
    if ORCHESTRATOR_NAME in datasets["experts"]:
        raise DatasetMismatchError(f"expert name {ORCHESTRATOR_NAME!r} is reserved")
    loaded: dict[str, list[Pair]] = {}
    for name in sorted(datasets["experts"]):
        path = Path(datasets["experts"][name])
        pairs = load_pairs(path if path.is_absolute() else base_dir / path)
        mislabeled = sorted({p.expert_name for p in pairs} - {name})
        if mislabeled:
            raise DatasetMismatchError(
                f"dataset for {name!r} contains pairs labeled {mislabeled}"
            )
        loaded[name] = pairs
    orchestrator_path = Path(datasets["orchestrator"])
    loaded[ORCHESTRATOR_NAME] = load_pairs(
        orchestrator_path if orchestrator_path.is_absolute() else base_dir / orchestrator_path
    )
    return loaded


def _is_out_of_memory(exc: BaseException) -> bool:
    if isinstance(exc, MemoryError):
        return True
    return isinstance(exc, RuntimeError) and "out of memory" in str(exc).lower()


def finetune(
    manifest: dict,
    *,
    out_dir: str | Path,
    base_model: str | Path | None = None,
    base_dir: str | Path = ".",
) -> list[AdapterArtifact]:
    """Train one adapter per expert dataset plus the orchestrator adapter.

    Artifacts land under ``out_dir / manifest.trainer.output_dir``:
    ``training_args.json`` (the applied config, field-equal to the
    manifest's), one adapter directory per model, and ``report.json``
    with wall times. Completed adapters survive a mid-run failure.
    """
    from transformers import AutoModelForCausalLM, AutoTokenizer

    settings = TrainingSettings.from_config(manifest.get("config"))
    echo = settings.to_config_dict()
    if echo != manifest["config"]:
        raise TrainerError("applied settings do not reproduce the manifest config")

    base = manifest.get("trainer", {}).get("base_model") or base_model
    if not base:
        raise TrainerError("no base model: set trainer.base_model or pass base_model")
    base = str(base)

    loaded = _validate_datasets(manifest, Path(base_dir))

    run_dir = Path(out_dir) / manifest.get("trainer", {}).get("output_dir", manifest["run_id"])
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "training_args.json").write_text(
        json.dumps(echo, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )

    tokenizer = AutoTokenizer.from_pretrained(base)
    model = AutoModelForCausalLM.from_pretrained(base)
    inject_adapters(
        model,
        rank=settings.lora_rank,
        alpha=settings.lora_alpha,
        dropout=settings.lora_dropout,
    )
    half_applied = bool(settings.half_precision and torch.cuda.is_available())
    if half_applied:
        model = model.half().cuda()

    seed = int(manifest.get("seed", 0))
    adapters_dir = run_dir / "adapters"
    artifacts: list[AdapterArtifact] = []
    timings: dict[str, dict] = {}
    started = time.perf_counter()
    for name, pairs in loaded.items():
        adapter_started = time.perf_counter()
        try:
            artifact = train_adapter(
                model,
                tokenizer,
                pairs,
                settings,
                name=name,
                base_model_id=base,
                adapter_dir=adapters_dir / name.replace("/", "_"),
                seed=seed,
            )
        except Exception as exc:
            if _is_out_of_memory(exc):
                raise TrainingFailedError(
                    f"out of memory while training adapter {name!r}",
                    completed=tuple(a.expert_name for a in artifacts),
                ) from exc
            raise
        artifacts.append(artifact)
        timings[name] = {
            "seconds": round(time.perf_counter() - adapter_started, 6),
            "epochs_run": len(artifact.train_loss_curve),
            "selected_epoch": artifact.selected_epoch,
        }

    report = {
        "run_id": manifest.get("run_id"),
        "base_model": base,
        "half_precision_applied": half_applied,
        "training_seconds": round(time.perf_counter() - started, 6),
        "adapters": timings,
    }
    (run_dir / "report.json").write_text(
        json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return artifacts
