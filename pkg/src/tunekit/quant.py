"""Symmetric blockwise quantization of weight tensors.

Every block of `block_size` consecutive values (row-major) shares one scale
`max|w| / qmax` with `qmax = 2^(bits-1) - 1`. Codes are rounded half away
from zero, 4-bit codes are packed two per byte (low nibble first, two's
complement). Scales are kept as 32-bit floats.
"""

import math

import numpy as np
from loguru import logger as log

from .common import round_half_away
from .exceptions import NonFiniteError, QuantizationError

SUPPORTED_BITS = (4, 8)
DEFAULT_BLOCK_SIZE = 64


def qmax_for(bits):
    """Largest code magnitude for a bit width."""
    if bits not in SUPPORTED_BITS:
        msg = f"Unsupported bit width {bits}, use one of {SUPPORTED_BITS}"
        log.error(msg)
        raise QuantizationError(msg)
    return 2 ** (bits - 1) - 1


def pack_nibbles(codes):
    """Pack signed 4-bit codes into bytes, low nibble first."""
    nibbles = (np.asarray(codes, dtype=np.int16) & 0xF).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed, count):
    """Inverse of `pack_nibbles()`, returning `count` signed codes."""
    packed = np.asarray(packed, dtype=np.uint8)
    nibbles = np.empty(packed.size * 2, dtype=np.int16)
    nibbles[0::2] = packed & 0xF
    nibbles[1::2] = packed >> 4
    nibbles = nibbles[:count]
    return np.where(nibbles >= 8, nibbles - 16, nibbles).astype(np.int8)


class QuantizedTensor:

    """A blockwise quantized tensor.

    Attributes
    ----------
    shape : tuple(int)
        Shape of the original tensor.
    bits : int
        4 or 8.
    block_size : int
    scales : np.ndarray(float32)
        One non-negative scale per block.
    packed : np.ndarray
        `int8` codes for 8 bits, `uint8` nibble pairs for 4 bits.
    dtype : numpy.dtype
        Value type of the tensor the codes were computed from.
    """

    def __init__(self, shape, bits, block_size, scales, packed, dtype="float32"):
        self.shape = tuple(int(s) for s in shape)
        self.bits = bits
        self.block_size = block_size
        self.scales = np.asarray(scales, dtype=np.float32)
        self.packed = np.asarray(packed, dtype=np.uint8 if bits == 4 else np.int8)
        self.dtype = np.dtype(dtype)
        self._values = None
        if self.scales.size != self.n_blocks:
            raise QuantizationError(
                f"Expected {self.n_blocks} scales for shape {self.shape}, "
                f"got {self.scales.size}"
            )

    def __str__(self):
        return (
            f"QuantizedTensor(shape={self.shape}, bits={self.bits}, "
            f"block_size={self.block_size}, blocks={self.n_blocks})"
        )

    @property
    def numel(self):
        """Number of quantized values."""
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def n_blocks(self):
        """Number of blocks, `ceil(numel / block_size)`."""
        return math.ceil(self.numel / self.block_size)

    @property
    def nbytes(self):
        """Storage size of scales and codes."""
        return self.scales.nbytes + self.packed.nbytes

    def codes(self):
        """The signed integer codes as a flat `int8` array."""
        if self.bits == 4:
            return unpack_nibbles(self.packed, self.numel)
        return self.packed.copy()

    def dequantize(self):
        """Reconstruct the values as 64-bit floats (`code * scale`)."""
        if self._values is None:
            codes = self.codes().astype(np.float64)
            padded = np.zeros(self.n_blocks * self.block_size)
            padded[: self.numel] = codes
            blocks = padded.reshape(self.n_blocks, self.block_size)
            values = blocks * self.scales.astype(np.float64)[:, None]
            self._values = values.reshape(-1)[: self.numel].reshape(self.shape)
        return self._values.copy()


def quantize_blockwise(tensor, bits=4, block_size=DEFAULT_BLOCK_SIZE):
    """Quantize a tensor blockwise.

    Parameters
    ----------
    tensor : array-like
        Finite values of any shape.
    bits : int, optional
        4 or 8, by default 4.
    block_size : int, optional
        By default 64.

    Returns
    -------
    QuantizedTensor

    Raises
    ------
    QuantizationError
        Raised for unsupported bit widths or block sizes.
    NonFiniteError
        Raised if the tensor holds NaN or Inf.
    """
    qmax = qmax_for(bits)
    if block_size < 1:
        raise QuantizationError(f"block_size must be >= 1, got {block_size}")
    source_dtype = np.asarray(tensor).dtype
    if not np.issubdtype(source_dtype, np.floating):
        source_dtype = np.dtype(np.float64)
    values = np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("quantize_blockwise: tensor contains non-finite values")

    flat = values.reshape(-1)
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    amax = np.max(np.abs(blocks), axis=1) if flat.size else np.zeros(0)
    # codes are rounded against the stored (float32) scale
    scales = (amax / qmax).astype(np.float32)
    steps = scales.astype(np.float64)
    safe = np.where(steps > 0, steps, 1.0)
    codes = round_half_away(blocks / safe[:, None])
    codes = np.where(steps[:, None] > 0, codes, 0.0)
    codes = np.clip(codes, -qmax, qmax).astype(np.int8).reshape(-1)[: flat.size]
    packed = pack_nibbles(codes) if bits == 4 else codes
    return QuantizedTensor(values.shape, bits, block_size, scales, packed, source_dtype)


def dequantize(quantized):
    """Values of a `QuantizedTensor` as 64-bit floats."""
    return quantized.dequantize()


def quantize_model(model, bits=4, block_size=DEFAULT_BLOCK_SIZE):
    """Replace every 2-D base weight of a model by its quantized form (in place).

    Returns
    -------
    int
        Number of quantized parameters.

    Raises
    ------
    QuantizationError
        Raised if the model already holds quantized weights.
    """
    if any(param.quant is not None for _, param in model.params.items()):
        msg = "Model weights are already quantized"
        log.error(msg)
        raise QuantizationError(msg)
    count = 0
    for _, param in model.params.items():
        if param.ndim == 2:
            param.set_quant(quantize_blockwise(param.data, bits, block_size))
            count += 1
    log.debug(
        "Quantized {} weights to {} bits (block size {})", count, bits, block_size
    )
    return count


def qlora_wrap(model, bits=4, block_size=DEFAULT_BLOCK_SIZE):
    """Freeze a model on a quantized base, ready for LoRA adapters.

    All 2-D base weights are stored quantized and dequantized on the fly,
    the whole base is frozen.

    Parameters
    ----------
    model : TinyTransformer
        A model without attached adapters.
    bits : int, optional
    block_size : int, optional

    Returns
    -------
    TinyTransformer
        The same model object.

    Raises
    ------
    QuantizationError
        Raised if adapters are attached or the model is already wrapped.
    """
    if model.adapters:
        msg = "qlora_wrap must be applied before attaching adapters"
        log.error(msg)
        raise QuantizationError(msg)
    quantize_model(model, bits, block_size)
    for _, param in model.params.items():
        param.requires_grad = False
        param.grad = None
    return model


def weight_bytes(model):
    """Storage bytes of the base weights, quantized ones at their packed size."""
    total = 0
    for _, param in model.params.items():
        if param.quant is not None:
            total += param.quant.nbytes
        else:
            total += param.data.nbytes
    return total


def dequantize_model(model):
    """Replace every quantized base weight by its plain values (in place)."""
    count = 0
    for _, param in model.params.items():
        if param.quant is not None:
            values = param.data
            param.quant = None
            param.data = values
            count += 1
    return count
