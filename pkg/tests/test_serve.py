"""Tests for the 'tunekit.serve' module."""

# pylint: disable-msg=redefined-outer-name

import json
import threading
import time

import numpy as np
import pytest
import uvicorn

from fastapi.testclient import TestClient

from tunekit import serve as S
from tunekit.checkpoint import save_checkpoint
from tunekit.client import ChatClient
from tunekit.exceptions import QueueFullError, TunerError
from tunekit.model import GenerationParams, generate
from tunekit.template import TemplateSpec, encode_prompt, record_from_messages
from tunekit.tuners import (
    LoraConfig,
    TunerConfig,
    activate_adapter,
    deactivate_adapter,
    prepare_model,
)


def with_math_adapter(model):
    """Attach a LoRA adapter named `math` with non-zero B matrices."""
    config = TunerConfig("lora", lora=LoraConfig(rank=2, alpha=4.0))
    prepare_model(model, {"math": config})
    rng = np.random.default_rng(11)
    for entry in model.adapters["math"].targets.values():
        entry.lora_b.data = rng.normal(0.0, 0.5, size=entry.lora_b.shape).astype(
            np.float32
        )
    return model


def chat_body(text, model="base", **kwargs):
    """A chat completion request body with a single user turn."""
    body = {"model": model, "messages": [{"role": "user", "content": text}]}
    body.update(kwargs)
    return body


def expected_text(model, text, max_tokens):
    """Greedy answer produced by the model in its current adapter state."""
    template = TemplateSpec()
    tokenizer = template.tokenizer()
    record = record_from_messages([{"role": "user", "content": text}])
    params = GenerationParams(
        max_new_tokens=max_tokens, stop_token=tokenizer.token_id(template.im_end)
    )
    ids = generate(model, encode_prompt(record, template, tokenizer), params)
    return tokenizer.decode(ids, errors="replace")


@pytest.fixture
def served(tiny_model):
    """A model with a `math` adapter and the expected greedy answers."""
    model = with_math_adapter(tiny_model)
    deactivate_adapter(model, "math")
    expected = {"base": expected_text(model, "hello", 8)}
    activate_adapter(model, "math")
    expected["math"] = expected_text(model, "hello", 8)
    app = S.create_app(model)
    yield TestClient(app), expected
    app.state.worker.close()


def test_list_models(served):
    """Test listing the base model and its adapters."""
    http, _ = served
    response = http.get("/v1/models")
    assert response.status_code == 200
    body = response.json()
    assert body["object"] == "list"
    assert [entry["id"] for entry in body["data"]] == ["base", "math"]
    assert body["data"][0]["owned_by"] == "tunekit"


def test_chat_completion(served):
    """Test the shape and contents of a non-streamed completion."""
    http, expected = served
    response = http.post("/v1/chat/completions", json=chat_body("hello", max_tokens=8))
    assert response.status_code == 200
    body = response.json()
    assert body["object"] == "chat.completion"
    assert body["id"].startswith("chatcmpl-")
    choice = body["choices"][0]
    assert choice["message"]["role"] == "assistant"
    assert choice["message"]["content"] == expected["base"]
    assert choice["finish_reason"] in ("stop", "length")
    usage = body["usage"]
    assert usage["total_tokens"] == usage["prompt_tokens"] + usage["completion_tokens"]
    assert usage["completion_tokens"] <= 8


def test_adapter_routing(served):
    """Test that each request is answered with the adapter it names."""
    http, expected = served
    for name in ("math", "base", "math"):
        body = chat_body("hello", model=name, max_tokens=8)
        response = http.post("/v1/chat/completions", json=body)
        content = response.json()["choices"][0]["message"]["content"]
        assert content == expected[name]


def test_request_errors(served):
    """Test the error objects of refused requests."""
    http, _ = served
    response = http.post("/v1/chat/completions", json=chat_body("hi", model="nope"))
    assert response.status_code == 404
    assert response.json()["error"]["code"] == "model_not_found"

    response = http.post("/v1/chat/completions", json=chat_body("hi", temperature=-1))
    assert response.status_code == 400
    assert response.json()["error"]["type"] == "invalid_request_error"

    response = http.post("/v1/chat/completions", json={"messages": []})
    assert response.status_code == 400

    body = chat_body("hi")
    body["messages"].append({"role": "assistant", "content": "hello"})
    response = http.post("/v1/chat/completions", json=body)
    assert response.status_code == 400
    assert "last message" in response.json()["error"]["message"]

    response = http.post("/v1/chat/completions", json=chat_body("x" * 200))
    assert response.status_code == 400
    assert response.json()["error"]["code"] == "context_length_exceeded"


def test_streaming(served):
    """Test the server-sent event chunks of a streamed completion."""
    http, expected = served
    body = chat_body("hello", model="math", max_tokens=8, stream=True)
    response = http.post("/v1/chat/completions", json=body)
    assert response.status_code == 200
    assert response.headers["content-type"].startswith("text/event-stream")

    events = [line for line in response.text.split("\n\n") if line]
    assert events[-1] == "data: [DONE]"
    chunks = [json.loads(event[len("data: ") :]) for event in events[:-1]]
    assert all(c["object"] == "chat.completion.chunk" for c in chunks)
    assert len({c["id"] for c in chunks}) == 1
    assert chunks[0]["choices"][0]["delta"] == {"role": "assistant", "content": ""}
    assert chunks[-1]["choices"][0]["finish_reason"] in ("stop", "length")
    text = "".join(c["choices"][0]["delta"].get("content", "") for c in chunks)
    assert text == expected["math"]


def test_queue_full(tiny_model):
    """Test refusing requests while the worker queue is full."""
    app = S.create_app(tiny_model, queue_size=1)
    worker = app.state.worker
    release = threading.Event()
    busy = worker.submit("base", lambda _model: release.wait(5))
    deadline = time.time() + 5
    while not busy.running() and time.time() < deadline:
        time.sleep(0.01)
    waiting = worker.submit("base", lambda _model: None)
    with pytest.raises(QueueFullError):
        worker.submit("base", lambda _model: None)

    response = TestClient(app).post("/v1/chat/completions", json=chat_body("hi"))
    assert response.status_code == 429
    assert response.json()["error"]["code"] == "queue_full"

    release.set()
    assert busy.result(5) is True
    assert waiting.result(5) is None
    worker.close()


def test_create_app_errors(tiny_model):
    """Test refusing adapter names that can't be served."""
    with_math_adapter(tiny_model)
    with pytest.raises(TunerError):
        S.create_app(tiny_model, adapters=["nope"])
    with pytest.raises(TunerError):
        S.create_app(tiny_model, adapters=["base"])
    app = S.create_app(tiny_model, adapters=[])
    assert app.state.models == ["base"]
    app.state.worker.close()


def test_parse_adapter_arg(tmp_path):
    """Test the `name=path` adapter arguments."""
    name, path = S.parse_adapter_arg(f"math={tmp_path}")
    assert name == "math"
    assert path == tmp_path
    assert S.parse_adapter_arg(str(tmp_path / "chat"))[0] == "chat"


def test_load_served_model(tmp_path, tiny_model, make_model):
    """Test loading a base checkpoint with extra adapters."""
    base = save_checkpoint(tiny_model, tmp_path / "base")
    model = with_math_adapter(make_model())
    adapter = save_checkpoint(
        model, tmp_path / "adapter", adapter_only=True, base_checkpoint=str(base)
    )
    served_model, template = S.load_served_model(base, [f"math={adapter}"])
    assert S.servable_adapters(served_model) == ["math"]
    assert template.im_end == "<|im_end|>"

    with pytest.raises(TunerError):
        S.load_served_model(base, [f"math={adapter}", f"math={adapter}"])
    with pytest.raises(TunerError):
        S.load_served_model(base, [f"base={adapter}"])


@pytest.mark.online
def test_serve_real_port(tiny_model):
    """Test the service on a real TCP port through the chat client."""
    app = S.create_app(with_math_adapter(tiny_model))
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=8765, log_level="warning")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started and time.time() < deadline:
        time.sleep(0.05)
    try:
        client = ChatClient("http://127.0.0.1:8765", model="math")
        assert client.list_models() == ["base", "math"]
        answer = client.complete([{"role": "user", "content": "hi"}], max_tokens=4)
        assert isinstance(answer, str)
    finally:
        server.should_exit = True
        thread.join(10)
        app.state.worker.close()
