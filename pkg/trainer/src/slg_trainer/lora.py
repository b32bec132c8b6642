"""Low-rank adapters injected into attention projections.

Only the added A/B matrices train; the wrapped projection stays frozen.
B starts at zero so injection is exactly output-preserving until the
first optimizer step, and the update is scaled by alpha/rank as usual.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterable, Iterator

import torch
from torch import nn

DEFAULT_TARGETS = ("q_proj", "v_proj")


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: int, dropout: float):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.lora_dropout = nn.Dropout(dropout)
        self.lora_a = nn.Linear(base.in_features, rank, bias=False)
        self.lora_b = nn.Linear(rank, base.out_features, bias=False)
        self.reset_adapter()
        for param in self.base.parameters():
            param.requires_grad_(False)

    def reset_adapter(self, seed: int | None = None) -> None:
        if seed is not None:
            torch.manual_seed(seed)
        nn.init.kaiming_uniform_(self.lora_a.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_b.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.lora_b(self.lora_a(self.lora_dropout(x))) * self.scaling


def inject_adapters(
    model: nn.Module,
    *,
    rank: int,
    alpha: int,
    dropout: float,
    targets: Iterable[str] = DEFAULT_TARGETS,
) -> list[str]:
    """Replace every matching projection with a LoRA wrapper.

    Freezes all base parameters, leaves only adapter weights trainable,
    and returns the module names that were wrapped (sorted).
    """
    suffixes = tuple(targets)
    wrapped: list[str] = []
    for name, module in list(model.named_modules()):
        for child_name, child in list(module.named_children()):
            full = f"{name}.{child_name}" if name else child_name
            if isinstance(child, nn.Linear) and full.endswith(suffixes):
                setattr(module, child_name, LoraLinear(child, rank, alpha, dropout))
                wrapped.append(full)
    if not wrapped:
        raise ValueError(f"no modules matched targets {suffixes}")
    for param_name, param in model.named_parameters():
        param.requires_grad_("lora_a" in param_name or "lora_b" in param_name)
    return sorted(wrapped)


def adapter_parameters(model: nn.Module) -> Iterator[nn.Parameter]:
    for name, param in model.named_parameters():
        if "lora_a" in name or "lora_b" in name:
            yield param


def adapter_state_dict(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Just the trainable adapter tensors, cloned and detached."""
    state = OrderedDict()
    for name, param in sorted(model.named_parameters()):
        if "lora_a" in name or "lora_b" in name:
            state[name] = param.detach().clone()
    return state


def load_adapter_state(model: nn.Module, state: dict) -> None:
    expected = set(adapter_state_dict(model))
    if set(state) != expected:
        missing = sorted(expected - set(state))[:3]
        extra = sorted(set(state) - expected)[:3]
        raise ValueError(f"adapter state mismatch (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name in state:
                param.copy_(state[name])


def reset_adapters(model: nn.Module, seed: int) -> None:
    """Reinitialize every adapter in place, deterministically."""
    torch.manual_seed(seed)
    for module in model.modules():
        if isinstance(module, LoraLinear):
            module.reset_adapter()
