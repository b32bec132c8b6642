"""Build a desk-scale causal base model for smoke training and tests.

A two-layer, 64-wide decoder with a word-level tokenizer over a supplied
corpus: small enough to fine-tune in seconds on a CPU, complete enough
to exercise the whole pipeline (chat template, adapter injection,
generation). Everything is constructed locally; nothing is downloaded.
"""

from __future__ import annotations

import re
from pathlib import Path

import torch

ROLE_WORDS = ("user", "assistant", "system", ":")
SPECIALS = ("<unk>", "<pad>", "<s>", "</s>")
CHAT_TEMPLATE = (
    "{% for message in messages %}{{ message['role'] }} : {{ message['content'] }}\n"
    "{% endfor %}{% if add_generation_prompt %}assistant :{% endif %}"
)

_WORD = re.compile(r"\w+|[^\w\s]")


def build_tiny_base(
    path: str | Path,
    corpus_texts: list[str],
    *,
    hidden_size: int = 64,
    num_layers: int = 2,
    num_heads: int = 2,
    seed: int = 0,
) -> Path:
    """Create and save the model + tokenizer; returns the directory."""
    from tokenizers import Tokenizer
    from tokenizers.models import WordLevel
    from tokenizers.pre_tokenizers import Whitespace
    from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast

    words: list[str] = list(SPECIALS) + list(ROLE_WORDS)
    seen = set(words)
    for text in corpus_texts:
        for word in _WORD.findall(text):
            if word not in seen:
                seen.add(word)
                words.append(word)
    vocab = {word: index for index, word in enumerate(words)}

    tokenizer = Tokenizer(WordLevel(vocab, unk_token="<unk>"))
    tokenizer.pre_tokenizer = Whitespace()
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tokenizer,
        unk_token="<unk>",
        pad_token="<pad>",
        bos_token="<s>",
        eos_token="</s>",
    )
    fast.chat_template = CHAT_TEMPLATE

    torch.manual_seed(seed)
    config = LlamaConfig(
        vocab_size=len(vocab),
        hidden_size=hidden_size,
        intermediate_size=hidden_size * 2,
        num_hidden_layers=num_layers,
        num_attention_heads=num_heads,
        num_key_value_heads=num_heads,
        max_position_embeddings=1024,
        pad_token_id=vocab["<pad>"],
        bos_token_id=vocab["<s>"],
        eos_token_id=vocab["</s>"],
    )
    model = LlamaForCausalLM(config)

    target = Path(path)
    target.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(target)
    fast.save_pretrained(target)
    return target
