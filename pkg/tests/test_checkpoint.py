"""Tests for the 'tunekit.checkpoint' module."""

# pylint: disable-msg=redefined-outer-name

import json

import numpy as np
import pytest

from tunekit import checkpoint as C
from tunekit.exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ChecksumError,
    TunerError,
)
from tunekit.optim import OptimizerSpec, create_optimizer
from tunekit.quant import QuantizedTensor, qlora_wrap, quantize_blockwise
from tunekit.tensor import no_grad
from tunekit.tuners import LisaConfig, LoraConfig, TunerConfig, merge, prepare_model


IDS = np.array([[258, 117, 115, 101, 114, 10, 97, 98, 99, 259]])


def logits_of(model):
    """Forward pass without recording."""
    with no_grad():
        return model.forward(IDS).data


def with_lora(model, name="default", seed=0, target="all-linears"):
    """Attach a LoRA adapter with non-zero B matrices."""
    config = TunerConfig("lora", lora=LoraConfig(rank=2, alpha=4.0, target=target))
    prepare_model(model, {name: config})
    rng = np.random.default_rng(seed)
    for entry in model.adapters[name].targets.values():
        entry.lora_b.data = rng.normal(0.0, 0.2, size=entry.lora_b.shape).astype(
            np.float32
        )
    return model


@pytest.fixture
def base_dir(tmp_path, tiny_model):
    """A saved base model checkpoint."""
    return C.save_checkpoint(tiny_model, tmp_path / "base")


def test_tensor_file_roundtrip(tmp_path):
    """Test writing and reading plain and quantized tensors."""
    tensors = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5, -2.25]),
        "ids": np.array([[1, 2], [3, 4]], dtype=np.int64),
        "q": quantize_blockwise(np.linspace(-1, 1, 10), bits=4, block_size=4),
    }
    path = tmp_path / "tensors.bin"
    size = C.write_tensor_file(path, tensors)
    assert size == path.stat().st_size

    raw = path.read_bytes()
    assert raw.startswith(C.MAGIC)

    loaded = C.read_tensor_file(path)
    assert list(loaded) == ["a", "b", "ids", "q"]
    assert loaded["a"].dtype == np.float32
    np.testing.assert_array_equal(loaded["a"], tensors["a"])
    np.testing.assert_array_equal(loaded["b"], tensors["b"])
    assert loaded["ids"].dtype == np.int64
    assert isinstance(loaded["q"], QuantizedTensor)
    np.testing.assert_array_equal(loaded["q"].dequantize(), tensors["q"].dequantize())


def test_tensor_file_corruption(tmp_path):
    """Test the bad magic, truncation and checksum checks."""
    path = tmp_path / "tensors.bin"
    C.write_tensor_file(path, {"a": np.ones(8, dtype=np.float32)})
    raw = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXXX\n" + raw[6:])
    with pytest.raises(CheckpointError):
        C.read_tensor_file(bad)

    bad.write_bytes(raw[:-7])
    with pytest.raises(CheckpointError):
        C.read_tensor_file(bad)

    flipped = bytearray(raw)
    flipped[-5] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        C.read_tensor_file(bad)


def test_model_roundtrip(tmp_path, tiny_model):
    """Test that a saved model produces identical logits after loading."""
    with_lora(tiny_model)
    expected = logits_of(tiny_model)
    directory = C.save_checkpoint(tiny_model, tmp_path / "ckpt")
    assert (directory / C.CONFIG_FILE).is_file()
    assert (directory / C.WEIGHTS_FILE).is_file()

    ckpt = C.load_checkpoint(directory)
    assert ckpt.kind == "model"
    assert list(ckpt.model.adapters) == ["default"]
    assert ckpt.template.im_end == "<|im_end|>"
    np.testing.assert_array_equal(logits_of(ckpt.model), expected)

    config = json.loads((directory / C.CONFIG_FILE).read_text(encoding="utf-8"))
    assert config["format_version"] == C.FORMAT_VERSION
    assert config["tokenizer"]["specials"]["<|im_end|>"] == 259


def test_version_check(tmp_path, tiny_model):
    """Test refusing an unknown format version and missing checkpoints."""
    directory = C.save_checkpoint(tiny_model, tmp_path / "ckpt")
    config_file = directory / C.CONFIG_FILE
    config = json.loads(config_file.read_text(encoding="utf-8"))
    config["format_version"] = 2
    config_file.write_text(json.dumps(config), encoding="utf-8")
    with pytest.raises(CheckpointVersionError):
        C.load_checkpoint(directory)

    with pytest.raises(CheckpointError):
        C.load_checkpoint(tmp_path / "nothing")


def test_adapter_checkpoint(tmp_path, base_dir, make_model):
    """Test an adapter-only checkpoint referencing its base."""
    model = with_lora(C.load_checkpoint(base_dir).model)
    expected = logits_of(model)
    adapter_dir = C.save_checkpoint(
        model, tmp_path / "adapter", adapter_only=True, base_checkpoint="../base"
    )
    base_size = (base_dir / C.WEIGHTS_FILE).stat().st_size
    assert (adapter_dir / C.WEIGHTS_FILE).stat().st_size < base_size

    ckpt = C.load_checkpoint(adapter_dir)
    assert ckpt.kind == "adapter"
    np.testing.assert_array_equal(logits_of(ckpt.model), expected)

    with pytest.raises(CheckpointError):
        C.save_checkpoint(model, tmp_path / "other", adapter_only=True)

    lisa = make_model()
    lisa_config = TunerConfig("lisa", lisa=LisaConfig(activated_layers=1))
    prepare_model(lisa, {"lisa": lisa_config})
    with pytest.raises(CheckpointError):
        C.save_checkpoint(
            lisa, tmp_path / "lisa", adapter_only=True, base_checkpoint=str(base_dir)
        )


def test_qlora_adapter_checkpoint(tmp_path, base_dir):
    """Test that the base gets re-quantized when loading a QLoRA adapter."""
    model = C.load_checkpoint(base_dir).model
    qlora_wrap(model, bits=4, block_size=16)
    with_lora(model)
    expected = logits_of(model)
    adapter_dir = C.save_checkpoint(
        model, tmp_path / "qlora", adapter_only=True, base_checkpoint=str(base_dir)
    )
    config = json.loads((adapter_dir / C.CONFIG_FILE).read_text(encoding="utf-8"))
    assert config["base_quant"] == {"bits": 4, "block_size": 16}

    loaded = C.load_checkpoint(adapter_dir).model
    assert loaded.params["blocks.0.attn.q_proj"].quant is not None
    np.testing.assert_array_equal(logits_of(loaded), expected)


def test_load_adapter(tmp_path, base_dir, make_model):
    """Test attaching a saved adapter under another name."""
    model = with_lora(C.load_checkpoint(base_dir).model, seed=3)
    expected = logits_of(model)
    adapter_dir = C.save_checkpoint(
        model, tmp_path / "adapter", adapter_only=True, base_checkpoint=str(base_dir)
    )

    served = C.load_checkpoint(base_dir).model
    assert C.load_adapter(served, adapter_dir, "math") == ["math"]
    np.testing.assert_array_equal(logits_of(served), expected)

    with pytest.raises(TunerError):
        C.load_adapter(served, adapter_dir, "math")

    other = make_model(d_model=8, d_ff=16)
    with pytest.raises(CheckpointError):
        C.load_adapter(other, adapter_dir)

    with pytest.raises(CheckpointError):
        C.load_adapter(served, base_dir)


def test_training_state(tmp_path, tiny_model):
    """Test storing optimizer and trainer state along with a checkpoint."""
    assert C.load_training_state(tmp_path) == (None, None)

    with_lora(tiny_model)
    opt = create_optimizer(tiny_model, OptimizerSpec(learning_rate=1e-3))
    for _, param in tiny_model.named_parameters():
        if param.requires_grad:
            param.grad = np.ones_like(param.data)
    opt.step(1)
    directory = C.save_checkpoint(
        tiny_model, tmp_path / "ckpt", optimizer=opt, trainer_state={"global_step": 1}
    )
    arrays, state = C.load_training_state(directory)
    assert state["global_step"] == 1
    assert state["optimizer"]["kind"] == "adamw"
    assert len(arrays) == 2 * len(opt.state)


def test_merged_save_warns(tmp_path, tiny_model, caplog):
    """Test the warning about saving an adapter in merged state."""
    with_lora(tiny_model)
    merge(tiny_model, "default")
    C.save_checkpoint(tiny_model, tmp_path / "ckpt")
    assert "merged state" in caplog.text


def test_export_copy(tmp_path, base_dir):
    """Test a plain export without merging or quantization."""
    report = C.export(base_dir, tmp_path / "copy")
    assert report["merged"] == []
    assert report["floats_before"] == report["floats_after"]
    assert (tmp_path / "copy" / C.WEIGHTS_FILE).read_bytes() == (
        base_dir / C.WEIGHTS_FILE
    ).read_bytes()

    with pytest.raises(CheckpointError):
        C.export(base_dir, base_dir)


def test_export_copy_adapter(tmp_path, base_dir):
    """Test that a copied adapter checkpoint still finds its base."""
    model = with_lora(C.load_checkpoint(base_dir).model)
    expected = logits_of(model)
    adapter_dir = C.save_checkpoint(
        model, tmp_path / "adapter", adapter_only=True, base_checkpoint="../base"
    )

    target = tmp_path / "exports" / "nested" / "copy"
    C.export(adapter_dir, target)
    config = C.read_config(target)
    assert config["base_checkpoint"] == str(base_dir.resolve())
    loaded = C.load_checkpoint(target)
    assert loaded.kind == "adapter"
    np.testing.assert_array_equal(logits_of(loaded.model), expected)


def test_export_merge_skips_inactive(tmp_path, base_dir, caplog):
    """Test that only the active adapter is folded in and reported."""
    model = with_lora(C.load_checkpoint(base_dir).model, name="first", seed=1)
    with_lora(model, name="second", seed=2)
    assert not model.adapters["second"].active
    expected = logits_of(model)
    adapter_dir = C.save_checkpoint(
        model, tmp_path / "adapter", adapter_only=True, base_checkpoint=str(base_dir)
    )

    report = C.export(adapter_dir, tmp_path / "merged", merge_lora=True)
    assert report["merged"] == ["first"]
    assert "Dropping inactive adapter 'second'" in caplog.text
    merged = C.load_checkpoint(tmp_path / "merged").model
    assert not merged.adapters
    np.testing.assert_allclose(logits_of(merged), expected, rtol=1e-4, atol=1e-4)


def test_export_merge(tmp_path, base_dir):
    """Test merging an adapter checkpoint into a stand-alone model."""
    model = with_lora(C.load_checkpoint(base_dir).model, seed=5)
    expected = logits_of(model)
    adapter_dir = C.save_checkpoint(
        model, tmp_path / "adapter", adapter_only=True, base_checkpoint=str(base_dir)
    )

    report = C.export(adapter_dir, tmp_path / "merged", merge_lora=True)
    assert report["merged"] == ["default"]
    assert report["floats_after"] < report["floats_before"]

    merged = C.load_checkpoint(tmp_path / "merged")
    assert merged.kind == "model"
    assert not merged.model.adapters
    np.testing.assert_allclose(logits_of(merged.model), expected, rtol=1e-4, atol=1e-4)

    with pytest.raises(CheckpointError):
        C.export(base_dir, tmp_path / "nothing", merge_lora=True)


def test_export_quantized(tmp_path, base_dir):
    """Test exporting with 8-bit weights."""
    report = C.export(base_dir, tmp_path / "q8", quant={"bits": 8, "block_size": 64})
    assert report["bytes_after"] < report["bytes_before"] / 2
    model = C.load_checkpoint(tmp_path / "q8").model
    assert model.params["lm_head"].quant.bits == 8
    assert np.all(np.isfinite(logits_of(model)))


def test_export_merged_four_bits(tmp_path, base_dir):
    """Test the on-disk size of a merged 4-bit export."""
    model = with_lora(C.load_checkpoint(base_dir).model)
    adapter_dir = C.save_checkpoint(
        model, tmp_path / "adapter", adapter_only=True, base_checkpoint=str(base_dir)
    )
    report = C.export(
        adapter_dir,
        tmp_path / "q4",
        merge_lora=True,
        quant={"bits": 4, "block_size": 64},
    )
    original = (base_dir / C.WEIGHTS_FILE).stat().st_size
    assert report["bytes_after"] <= 0.27 * original

    loaded = C.load_checkpoint(tmp_path / "q4").model
    assert loaded.params["blocks.0.attn.q_proj"].quant.bits == 4
    assert np.all(np.isfinite(logits_of(loaded)))
