"""Low-rank adapter fine-tuning and serving for expert-graph run manifests."""

from .data import IGNORE_INDEX, Pair, collate, encode_pair, load_pairs, split_pairs
from .errors import DatasetMismatchError, TrainerError, TrainingFailedError
from .lora import (
    LoraLinear,
    adapter_parameters,
    adapter_state_dict,
    inject_adapters,
    load_adapter_state,
    reset_adapters,
)
from .serving import AdapterHost, create_serving_app, load_hosts
from .tiny import build_tiny_base
from .training import (
    ORCHESTRATOR_NAME,
    AdapterArtifact,
    TrainingSettings,
    early_stop_epoch,
    finetune,
    train_adapter,
)

__all__ = [
    "AdapterArtifact",
    "AdapterHost",
    "DatasetMismatchError",
    "IGNORE_INDEX",
    "LoraLinear",
    "ORCHESTRATOR_NAME",
    "Pair",
    "TrainerError",
    "TrainingFailedError",
    "TrainingSettings",
    "adapter_parameters",
    "adapter_state_dict",
    "build_tiny_base",
    "collate",
    "create_serving_app",
    "early_stop_epoch",
    "encode_pair",
    "finetune",
    "inject_adapters",
    "load_adapter_state",
    "load_hosts",
    "load_pairs",
    "reset_adapters",
    "split_pairs",
    "train_adapter",
]
