"""Tests for the 'tunekit.quant' module."""

import numpy as np
import pytest

from tunekit import quant
from tunekit.exceptions import NonFiniteError, QuantizationError
from tunekit.tuners import LoraConfig, TunerConfig, prepare_model


def test_qmax():
    """Test the code ranges of the supported bit widths."""
    assert quant.qmax_for(4) == 7
    assert quant.qmax_for(8) == 127
    with pytest.raises(QuantizationError):
        quant.qmax_for(3)


def test_nibble_packing():
    """Test packing signed 4-bit codes, low nibble first."""
    codes = np.array([1, -1, 7, -7, 0], dtype=np.int8)
    packed = quant.pack_nibbles(codes)
    assert packed.dtype == np.uint8
    assert packed.size == 3
    assert packed[0] == 0xF1
    np.testing.assert_array_equal(quant.unpack_nibbles(packed, 5), codes)


@pytest.mark.parametrize("bits", [4, 8])
def test_quantization_error_bound(bits):
    """Test that every value is within half a quantization step."""
    rng = np.random.default_rng(bits)
    values = rng.normal(0.0, 2.0, size=(7, 19))
    qt = quant.quantize_blockwise(values, bits=bits, block_size=16)
    assert qt.n_blocks == 9
    assert qt.scales.dtype == np.float32
    assert np.all(qt.scales >= 0)

    restored = qt.dequantize()
    assert restored.shape == values.shape
    flat_err = np.abs(restored - values).reshape(-1)
    padded = np.zeros(qt.n_blocks * 16)
    padded[: flat_err.size] = flat_err
    per_block = padded.reshape(qt.n_blocks, 16).max(axis=1)
    assert np.all(per_block <= qt.scales.astype(np.float64) / 2)

    codes = qt.codes()
    qmax = quant.qmax_for(bits)
    assert codes.min() >= -qmax
    assert codes.max() <= qmax


@pytest.mark.parametrize("bits", [4, 8])
def test_error_bound_random_blocks(bits):
    """Test the half-step bound over ten thousand random blocks of 64 values."""
    rng = np.random.default_rng(100 + bits)
    values = rng.normal(0.0, 1.0, size=(10_000, 64))
    qt = quant.quantize_blockwise(values, bits=bits, block_size=64)
    assert qt.n_blocks == 10_000

    errors = np.abs(qt.dequantize() - values)
    bound = qt.scales.astype(np.float64)[:, None] / 2
    assert np.all(errors <= bound)


def test_worked_block_eight_bits():
    """Test the codes and the reconstruction of a small 8-bit block."""
    values = np.array([1.0, -2.0, 0.5, 4.0])
    qt = quant.quantize_blockwise(values, bits=8, block_size=4)
    assert qt.scales[0] == pytest.approx(4 / 127, rel=1e-6)
    np.testing.assert_array_equal(qt.codes(), [32, -64, 16, 127])

    restored = qt.dequantize()
    np.testing.assert_allclose(restored, [1.00787, -2.01575, 0.50394, 4.0], atol=1e-5)
    assert np.max(np.abs(restored - values)) == pytest.approx(0.015748, abs=1e-6)


def test_worked_block_four_bits():
    """Test the same block at 4 bits.

    The second value sits exactly on a half step in real arithmetic, the
    float32 scale is slightly larger than 4/7 so it rounds towards zero.
    """
    values = np.array([1.0, -2.0, 0.5, 4.0])
    qt = quant.quantize_blockwise(values, bits=4, block_size=4)
    assert qt.scales[0] == pytest.approx(4 / 7, rel=1e-6)
    np.testing.assert_array_equal(qt.codes(), [2, -3, 1, 7])

    errors = np.abs(qt.dequantize() - values)
    assert np.all(errors <= 2 / 7)
    assert np.all(errors <= float(qt.scales[0]) / 2)


@pytest.mark.parametrize("bits", [4, 8])
def test_requantize_is_exact(bits):
    """Test that quantizing dequantized values gives back codes and scales."""
    rng = np.random.default_rng(bits)
    values = rng.normal(0.0, 0.5, size=(12, 40))
    first = quant.quantize_blockwise(values, bits=bits, block_size=64)
    second = quant.quantize_blockwise(first.dequantize(), bits=bits, block_size=64)
    np.testing.assert_array_equal(second.codes(), first.codes())
    np.testing.assert_array_equal(second.scales, first.scales)
    np.testing.assert_array_equal(second.dequantize(), first.dequantize())


def test_block_maximum_is_kept():
    """Test that the largest magnitude of a block maps to the largest code."""
    values = np.array([0.1, -3.0, 0.5, 1.0])
    qt = quant.quantize_blockwise(values, bits=8, block_size=4)
    assert qt.codes()[1] == -127
    assert qt.dequantize()[1] == pytest.approx(-3.0, rel=1e-6)


def test_zero_block():
    """Test that an all-zero block has a zero scale and zero codes."""
    values = np.concatenate([np.zeros(4), np.ones(4)])
    qt = quant.quantize_blockwise(values, bits=4, block_size=4)
    assert qt.scales[0] == 0.0
    np.testing.assert_array_equal(qt.dequantize()[:4], np.zeros(4))
    np.testing.assert_allclose(qt.dequantize()[4:], np.ones(4), rtol=1e-6)


def test_storage_size():
    """Test the packed storage size of both bit widths."""
    values = np.ones((4, 32))
    four = quant.quantize_blockwise(values, bits=4, block_size=64)
    eight = quant.quantize_blockwise(values, bits=8, block_size=64)
    assert four.nbytes == 2 * 4 + 64
    assert eight.nbytes == 2 * 4 + 128
    odd = quant.quantize_blockwise(np.ones(5), bits=4, block_size=2)
    assert odd.packed.size == 3
    assert odd.n_blocks == 3


def test_quantize_errors():
    """Test the refused quantization requests."""
    with pytest.raises(QuantizationError):
        quant.quantize_blockwise(np.ones(4), bits=2)
    with pytest.raises(QuantizationError):
        quant.quantize_blockwise(np.ones(4), block_size=0)
    with pytest.raises(NonFiniteError):
        quant.quantize_blockwise(np.array([1.0, np.inf]))
    with pytest.raises(QuantizationError):
        quant.QuantizedTensor((4,), 8, 2, np.ones(3), np.zeros(4))


def test_quantize_model(tiny_model):
    """Test replacing the 2-D weights of a model by quantized ones."""
    before = quant.weight_bytes(tiny_model)
    count = quant.quantize_model(tiny_model, bits=4, block_size=16)
    # embedding, six projections per block and the head:
    assert count == 1 + 6 * 2 + 1
    assert quant.weight_bytes(tiny_model) < before / 4

    param = tiny_model.params["blocks.0.attn.q_proj"]
    assert param.quant is not None
    assert param.data.dtype == np.float32
    expected = param.quant.dequantize().astype(np.float32)
    np.testing.assert_array_equal(param.data, expected)
    assert tiny_model.params["final_norm.gain"].quant is None

    with pytest.raises(QuantizationError):
        quant.quantize_model(tiny_model)

    assert quant.dequantize_model(tiny_model) == count
    assert tiny_model.params["blocks.0.attn.q_proj"].quant is None


def test_qlora_wrap(tiny_model):
    """Test the frozen quantized base and the order of operations."""
    quant.qlora_wrap(tiny_model, bits=4, block_size=16)
    assert all(not p.requires_grad for _, p in tiny_model.params.items())

    config = TunerConfig("lora", lora=LoraConfig(rank=2, alpha=4.0))
    prepare_model(tiny_model, {"default": config})
    trainable = [n for n, p in tiny_model.named_parameters() if p.requires_grad]
    assert trainable
    assert all(".lora_" in name for name in trainable)

    with pytest.raises(QuantizationError):
        quant.qlora_wrap(tiny_model)
