"""OpenAI-compatible chat completion service with per-request adapter routing.

HTTP requests are accepted concurrently, generation runs FIFO on a single
model worker thread. Before each job the worker activates the LoRA adapter
named by `request.model` (or none for `base`), weights are never merged.
"""

# pylint: disable-msg=too-few-public-methods,too-many-arguments

import asyncio
import codecs
import json
import queue
import threading
import time
import uuid
from concurrent.futures import Future
from pathlib import Path
from typing import List, Literal, Optional

import uvicorn
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse
from loguru import logger as log
from pydantic import BaseModel, Field

from .checkpoint import load_adapter, load_checkpoint
from .exceptions import (
    QueueFullError,
    ShapeError,
    TemplateError,
    TunerError,
)
from .model import GenerationParams, stream_tokens
from .template import TemplateSpec, encode_prompt, record_from_messages
from .tuners import activate_adapter, deactivate_adapter

BASE_MODEL = "base"
DEFAULT_QUEUE_SIZE = 32
OWNER = "tunekit"


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant"]
    content: str


class ChatCompletionRequest(BaseModel):

    """Body of a `POST /v1/chat/completions` request."""

    model: str
    messages: List[ChatMessage]
    temperature: float = Field(0.0, ge=0.0)
    max_tokens: int = Field(64, ge=1)
    stream: bool = False
    seed: int = 0
    top_k: int = Field(0, ge=0)
    tools: Optional[list] = None


class ModelWorker:

    """Single thread executing generation jobs in submission order.

    Attributes
    ----------
    model : TinyTransformer
    queue_size : int
        Maximum number of pending jobs, further submissions are refused.
    """

    def __init__(self, model, queue_size=DEFAULT_QUEUE_SIZE):
        self.model = model
        self.queue_size = queue_size
        self._jobs = queue.Queue(maxsize=queue_size)
        self._thread = threading.Thread(
            target=self._run, name="tunekit-worker", daemon=True
        )
        self._thread.start()

    def __str__(self):
        return f"ModelWorker(pending={self._jobs.qsize()}/{self.queue_size})"

    def submit(self, adapter, func):
        """Queue `func(model)` to run with `adapter` activated.

        Returns
        -------
        concurrent.futures.Future

        Raises
        ------
        QueueFullError
            Raised if `queue_size` jobs are already pending.
        """
        future = Future()
        try:
            self._jobs.put_nowait((adapter, func, future))
        except queue.Full as err:
            msg = f"Model worker queue is full ({self.queue_size} pending requests)"
            log.warning(msg)
            raise QueueFullError(msg) from err
        return future

    def route(self, adapter):
        """Make `adapter` the only active one (`base` deactivates all)."""
        for name, state in self.model.adapters.items():
            if name != adapter and state.active and state.variant == "lora":
                deactivate_adapter(self.model, name)
        if adapter != BASE_MODEL:
            activate_adapter(self.model, adapter)

    def _run(self):
        while True:
            job = self._jobs.get()
            if job is None:
                break
            adapter, func, future = job
            if not future.set_running_or_notify_cancel():
                continue
            try:
                self.route(adapter)
                future.set_result(func(self.model))
            except Exception as err:  # pylint: disable-msg=broad-except
                future.set_exception(err)

    def close(self, timeout=5.0):
        """Stop the worker after the pending jobs."""
        self._jobs.put(None, timeout=timeout)
        self._thread.join(timeout)


def servable_adapters(model):
    """Names of the attached, unmerged LoRA adapters."""
    return [
        name
        for name, state in model.adapters.items()
        if state.variant == "lora" and not state.merged
    ]


def error_response(status, message, err_type, code=None):
    """An OpenAI style error object."""
    body = {"error": {"message": message, "type": err_type, "code": code}}
    return JSONResponse(status_code=status, content=body)


def _completion_id():
    return f"chatcmpl-{uuid.uuid4().hex[:24]}"


class _Stream:

    """Bridge between the worker thread and a streaming response."""

    DONE = object()

    def __init__(self):
        self.items = queue.Queue()
        self.finish_reason = None

    def run(self, tokens):
        try:
            for token in tokens:
                self.items.put(token)
            self.finish_reason = tokens.finish_reason
        except Exception as err:  # pylint: disable-msg=broad-except
            self.items.put(err)
        self.items.put(self.DONE)


def create_app(model, template=None, adapters=None, queue_size=DEFAULT_QUEUE_SIZE):
    """Create the FastAPI application serving a model.

    Parameters
    ----------
    model : TinyTransformer
        The base model with its LoRA adapters attached (not merged).
    template : TemplateSpec, optional
        The chat template used to render requests.
    adapters : list(str), optional
        Adapter names to expose, by default every unmerged LoRA adapter.
    queue_size : int, optional
        Bound of the request queue, by default 32.

    Returns
    -------
    fastapi.FastAPI
        The worker is available as `app.state.worker`.

    Raises
    ------
    TunerError
        Raised for unknown, merged or non-LoRA adapter names or an adapter
        named `base`.
    """
    template = (template or TemplateSpec()).validate()
    tokenizer = template.tokenizer()
    stop_token = tokenizer.token_id(template.im_end)
    servable = servable_adapters(model)
    names = list(servable if adapters is None else adapters)
    for name in names:
        if name == BASE_MODEL or name not in servable:
            msg = f"Adapter '{name}' can't be served (servable: {servable})"
            log.error(msg)
            raise TunerError(msg)
    models = [BASE_MODEL] + names

    app = FastAPI(title="tunekit", version="1")
    worker = ModelWorker(model, queue_size)
    app.state.worker = worker
    app.state.models = models

    @app.exception_handler(RequestValidationError)
    async def validation_handler(
        _request: Request, exc: RequestValidationError
    ):  # pylint: disable-msg=unused-variable
        details = "; ".join(
            f"{'.'.join(str(p) for p in err.get('loc', []))}: {err.get('msg')}"
            for err in exc.errors()
        )
        return error_response(
            400, f"Invalid request body: {details}", "invalid_request_error"
        )

    @app.get("/v1/models")
    async def list_models():  # pylint: disable-msg=unused-variable
        created = int(time.time())
        data = [
            {"id": name, "object": "model", "created": created, "owned_by": OWNER}
            for name in models
        ]
        return {"object": "list", "data": data}

    @app.post("/v1/chat/completions")
    async def chat_completions(
        body: ChatCompletionRequest,
    ):  # pylint: disable-msg=unused-variable
        if body.model not in models:
            msg = f"The model '{body.model}' does not exist"
            log.warning(msg)
            return error_response(404, msg, "invalid_request_error", "model_not_found")
        try:
            messages = [{"role": m.role, "content": m.content} for m in body.messages]
            record = record_from_messages(messages, body.tools)
            prompt = encode_prompt(record, template, tokenizer)
            params = GenerationParams(
                max_new_tokens=body.max_tokens,
                temperature=body.temperature,
                top_k=body.top_k,
                seed=body.seed,
                stop_token=stop_token,
            )
            tokens = stream_tokens(model, prompt, params)
        except (TemplateError, ShapeError) as err:
            code = "context_length_exceeded" if isinstance(err, ShapeError) else None
            return error_response(400, str(err), "invalid_request_error", code)

        if body.stream:
            return _stream_response(body.model, tokens, worker, tokenizer)

        def job(_model):
            generated = list(tokens)
            return generated, tokens.finish_reason

        try:
            future = worker.submit(body.model, job)
        except QueueFullError as err:
            return error_response(429, str(err), "rate_limit_error", "queue_full")
        try:
            generated, finish_reason = await asyncio.wrap_future(future)
        except Exception as err:  # pylint: disable-msg=broad-except
            log.error("Generation failed: {}", err)
            return error_response(500, str(err), "server_error")

        n_prompt = len(prompt)
        return {
            "id": _completion_id(),
            "object": "chat.completion",
            "created": int(time.time()),
            "model": body.model,
            "choices": [
                {
                    "index": 0,
                    "message": {
                        "role": "assistant",
                        "content": tokenizer.decode(generated, errors="replace"),
                    },
                    "finish_reason": finish_reason,
                }
            ],
            "usage": {
                "prompt_tokens": n_prompt,
                "completion_tokens": len(generated),
                "total_tokens": n_prompt + len(generated),
            },
        }

    return app


def _stream_response(name, tokens, worker, tokenizer):
    """Queue a streamed generation, one SSE chunk per generated token."""
    bridge = _Stream()
    try:
        worker.submit(name, lambda _model: bridge.run(tokens))
    except QueueFullError as err:
        return error_response(429, str(err), "rate_limit_error", "queue_full")

    completion_id = _completion_id()
    created = int(time.time())

    def chunk(delta, finish_reason=None):
        payload = {
            "id": completion_id,
            "object": "chat.completion.chunk",
            "created": created,
            "model": name,
            "choices": [{"index": 0, "delta": delta, "finish_reason": finish_reason}],
        }
        return f"data: {json.dumps(payload, ensure_ascii=False)}\n\n"

    def events():
        decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")
        yield chunk({"role": "assistant", "content": ""})
        while True:
            item = bridge.items.get()
            if item is _Stream.DONE:
                break
            if isinstance(item, Exception):
                log.error("Streamed generation failed: {}", item)
                error = {
                    "error": {
                        "message": str(item),
                        "type": "server_error",
                        "code": None,
                    }
                }
                yield f"data: {json.dumps(error)}\n\n"
                break
            yield chunk({"content": decoder.decode(tokenizer.token_bytes(item))})
        tail = decoder.decode(b"", final=True)
        if tail:
            yield chunk({"content": tail})
        yield chunk({}, bridge.finish_reason or "stop")
        yield "data: [DONE]\n\n"

    return StreamingResponse(events(), media_type="text/event-stream")


def parse_adapter_arg(value):
    """Split a `name=path` adapter argument, the name defaults to the last path part."""
    if "=" in value:
        name, path = value.split("=", 1)
        return name, Path(path)
    return Path(value).name, Path(value)


def load_served_model(checkpoint, adapter_dirs=()):
    """Load a checkpoint and attach extra adapter checkpoints for serving.

    Parameters
    ----------
    checkpoint : str or Path
    adapter_dirs : list(str), optional
        Entries of the form `name=path` or `path`.

    Returns
    -------
    (TinyTransformer, TemplateSpec)

    Raises
    ------
    TunerError
        Raised for duplicate adapter names.
    """
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    for entry in adapter_dirs:
        name, path = parse_adapter_arg(entry)
        if name in model.adapters or name == BASE_MODEL:
            msg = f"Duplicate adapter name '{name}'"
            log.error(msg)
            raise TunerError(msg)
        load_adapter(model, path, name)
        log.info("Loaded adapter '{}' from [{}]", name, path)
    return model, ckpt.template


def serve(
    checkpoint,
    adapter_dirs=(),
    host="127.0.0.1",
    port=8000,
    queue_size=DEFAULT_QUEUE_SIZE,
):  # pragma: no cover
    """Load a checkpoint and run the HTTP service until interrupted."""
    model, template = load_served_model(checkpoint, adapter_dirs)
    app = create_app(model, template, queue_size=queue_size)
    log.info("Serving {} on http://{}:{}", app.state.models, host, port)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        app.state.worker.close()
