"""Dataset loading and tokenization for QA fine-tuning.

Datasets arrive as JSONL with one record per line carrying exactly
pair_id, question, answer, expert_name, and split. Each pair renders
through the base model's chat template (question as the user turn,
answer as the assistant turn); loss applies to assistant tokens only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .errors import DatasetMismatchError

REQUIRED_FIELDS = ("pair_id", "question", "answer", "expert_name", "split")
IGNORE_INDEX = -100


@dataclass(frozen=True)
class Pair:
    pair_id: str
    question: str
    answer: str
    expert_name: str
    split: str


def load_pairs(path: str | Path) -> list[Pair]:
    """Read and validate one JSONL dataset file."""
    path = Path(path)
    if not path.is_file():
        raise DatasetMismatchError(f"dataset file not found: {path}")
    pairs: list[Pair] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetMismatchError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
        if not isinstance(record, dict):
            raise DatasetMismatchError(f"{path}:{lineno}: record must be an object")
        missing = [field for field in REQUIRED_FIELDS if field not in record]
        if missing:
            raise DatasetMismatchError(f"{path}:{lineno}: missing fields {missing}")
        values = {field: record[field] for field in REQUIRED_FIELDS}
        bad = [field for field, value in values.items() if not isinstance(value, str) or not value]
        if bad:
            raise DatasetMismatchError(f"{path}:{lineno}: non-string or empty fields {bad}")
        if values["split"] not in ("train", "validation", "test"):
            raise DatasetMismatchError(f"{path}:{lineno}: unknown split {values['split']!r}")
        pairs.append(Pair(**values))
    if not pairs:
        raise DatasetMismatchError(f"{path}: dataset is empty")
    return pairs


def split_pairs(pairs: Sequence[Pair], split: str) -> list[Pair]:
    return [pair for pair in pairs if pair.split == split]


@dataclass(frozen=True)
class EncodedPair:
    input_ids: torch.Tensor
    labels: torch.Tensor


def encode_pair(tokenizer, pair: Pair) -> EncodedPair:
    """Render through the chat template and mask everything but the answer.

    The prompt is the user turn plus the generation cue; labels cover the
    assistant tokens and the closing EOS so the model learns to stop.
    """
    user = [{"role": "user", "content": pair.question}]
    prompt_ids = list(
        tokenizer.apply_chat_template(user, add_generation_prompt=True)["input_ids"]
    )
    answer_ids = tokenizer.encode(pair.answer, add_special_tokens=False)
    input_ids = prompt_ids + list(answer_ids) + [tokenizer.eos_token_id]
    labels = [IGNORE_INDEX] * len(prompt_ids) + list(answer_ids) + [tokenizer.eos_token_id]
    return EncodedPair(
        input_ids=torch.tensor(input_ids, dtype=torch.long),
        labels=torch.tensor(labels, dtype=torch.long),
    )


def collate(batch: Sequence[EncodedPair], pad_id: int) -> dict[str, torch.Tensor]:
    width = max(len(item.input_ids) for item in batch)
    input_ids = torch.full((len(batch), width), pad_id, dtype=torch.long)
    labels = torch.full((len(batch), width), IGNORE_INDEX, dtype=torch.long)
    attention = torch.zeros((len(batch), width), dtype=torch.long)
    for row, item in enumerate(batch):
        n = len(item.input_ids)
        input_ids[row, :n] = item.input_ids
        labels[row, :n] = item.labels
        attention[row, :n] = 1
    return {"input_ids": input_ids, "labels": labels, "attention_mask": attention}


def batched(items: Sequence, size: int) -> list[list]:
    return [list(items[i : i + size]) for i in range(0, len(items), size)]
