"""Serve trained adapters behind the chat-completion wire protocol.

The ``model`` field of a request selects the adapter by expert name; the
routing adapter is registered under the reserved name ``orchestrator``.
Each adapter owns its own model instance and generation lock, so requests
for different experts run concurrently while a single adapter generates
one completion at a time. Temperature 0 (or omitted) means greedy
decoding, which is deterministic for fixed artifacts.
"""

from __future__ import annotations

import json
import threading
import uuid
from pathlib import Path

import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .errors import TrainerError
from .lora import inject_adapters, load_adapter_state

DEFAULT_MAX_TOKENS = 64


class AdapterHost:
    """One base-model instance with one adapter's weights applied."""

    def __init__(self, name: str, model, tokenizer):
        self.name = name
        self.model = model
        self.tokenizer = tokenizer
        self.lock = threading.Lock()

    def complete(self, messages: list[dict], max_tokens: int, temperature: float, seed) -> str:
        encoded = self.tokenizer.apply_chat_template(messages, add_generation_prompt=True)
        input_ids = torch.tensor([list(encoded["input_ids"])], dtype=torch.long)
        kwargs = {
            "max_new_tokens": max_tokens,
            "pad_token_id": self.tokenizer.pad_token_id,
        }
        if temperature and temperature > 0.0:
            kwargs.update(do_sample=True, temperature=float(temperature))
        else:
            kwargs.update(do_sample=False)
        with self.lock, torch.no_grad():
            if seed is not None:
                torch.manual_seed(int(seed))
            output = self.model.generate(input_ids, **kwargs)
        return self.tokenizer.decode(
            output[0][input_ids.shape[1] :], skip_special_tokens=True
        )


def load_hosts(run_dir: str | Path, *, base_model: str | Path | None = None) -> dict[str, AdapterHost]:
    """Instantiate one host per adapter directory under ``run_dir/adapters``."""
    from transformers import AutoModelForCausalLM, AutoTokenizer

    adapters_root = Path(run_dir) / "adapters"
    adapter_dirs = sorted(p for p in adapters_root.iterdir() if (p / "adapter.pt").is_file())
    if not adapter_dirs:
        raise TrainerError(f"no adapters found under {adapters_root}")

    hosts: dict[str, AdapterHost] = {}
    for adapter_dir in adapter_dirs:
        config = json.loads((adapter_dir / "adapter_config.json").read_text(encoding="utf-8"))
        base = str(base_model or config["base_model_id"])
        tokenizer = AutoTokenizer.from_pretrained(base)
        model = AutoModelForCausalLM.from_pretrained(base)
        inject_adapters(
            model,
            rank=config["lora_rank"],
            alpha=config["lora_alpha"],
            dropout=config["lora_dropout"],
        )
        model.eval()
        state = torch.load(adapter_dir / "adapter.pt", weights_only=True)
        load_adapter_state(model, state)
        name = config["expert_name"]
        hosts[name] = AdapterHost(name, model, tokenizer)
    return hosts


def _protocol_error(status: int, kind: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status, content={"error": {"type": kind, "message": message}}
    )


def create_serving_app(hosts: dict[str, AdapterHost]) -> FastAPI:
    app = FastAPI()
    app.state.hosts = hosts

    @app.get("/v1/models")
    def list_models():
        return {"object": "list", "data": [{"id": name} for name in sorted(hosts)]}

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            payload = json.loads(await request.body())
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _protocol_error(400, "invalid_request_error", "body is not valid JSON")
        if not isinstance(payload, dict):
            return _protocol_error(400, "invalid_request_error", "body must be an object")

        name = payload.get("model")
        if not isinstance(name, str) or not name:
            return _protocol_error(400, "invalid_request_error", "model must be a string")
        host = hosts.get(name)
        if host is None:
            return _protocol_error(
                404, "model_not_found", f"model {name!r} is not served here"
            )

        messages = payload.get("messages")
        if (
            not isinstance(messages, list)
            or not messages
            or not all(
                isinstance(m, dict)
                and isinstance(m.get("role"), str)
                and isinstance(m.get("content"), str)
                for m in messages
            )
        ):
            return _protocol_error(
                400, "invalid_request_error", "messages must be role/content objects"
            )

        max_tokens = payload.get("max_tokens", DEFAULT_MAX_TOKENS)
        temperature = payload.get("temperature", 0.0)
        if not isinstance(max_tokens, int) or max_tokens < 1:
            return _protocol_error(400, "invalid_request_error", "max_tokens must be >= 1")

        content = host.complete(messages, max_tokens, temperature, payload.get("seed"))
        return {
            "id": f"cmpl-{uuid.uuid4().hex}",
            "object": "chat.completion",
            "model": name,
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop",
                }
            ],
        }

    return app
