"""Checkpoint directories and the TKPT1 tensor file format.

A tensor file is laid out as

* the magic bytes `TKPT1\\n`,
* the header length as an 8-byte little-endian unsigned integer,
* a UTF-8 JSON header mapping each tensor name to `dtype`, `shape`,
  `byte_offset`, `byte_len` and, for quantized tensors, `quant`
  (`bits`, `block_size`),
* the payload: raw little-endian row-major tensor data, offsets relative to
  the payload start (quantized tensors store their float32 scales followed by
  the packed codes),
* the CRC32 of the payload as a 4-byte little-endian unsigned integer.

A checkpoint directory holds `config.json` (format version, model, adapter
and template configuration) and `weights.bin`, optionally
`optimizer_state.bin` and `trainer_state.json` for resuming. Adapter
checkpoints only store adapter tensors and reference their base checkpoint.
"""

import json
import math
import os
import shutil
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger as log

from .exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ChecksumError,
)
from .model import ModelConfig, build_model
from .quant import QuantizedTensor, dequantize_model, qlora_wrap, quantize_model
from .template import TemplateSpec
from .tuners import merge, remove_adapter, restore_adapter, set_adapter_tensors


MAGIC = b"TKPT1\n"
FORMAT_VERSION = 1
CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.bin"
OPTIMIZER_FILE = "optimizer_state.bin"
TRAINER_STATE_FILE = "trainer_state.json"


def _le(dtype):
    return np.dtype(dtype).newbyteorder("<")


def _entry_bytes(value):
    if isinstance(value, QuantizedTensor):
        return value.scales.astype(_le(np.float32)).tobytes() + value.packed.tobytes()
    arr = np.ascontiguousarray(value)
    return arr.astype(_le(arr.dtype)).tobytes(order="C")


def write_tensor_file(path, tensors):
    """Write named tensors in the TKPT1 format.

    Parameters
    ----------
    path : str or Path
    tensors : dict
        Name to `numpy.ndarray` or `QuantizedTensor`, written in this order.

    Returns
    -------
    int
        Size of the file in bytes.
    """
    header = {}
    chunks = []
    offset = 0
    for name, value in tensors.items():
        raw = _entry_bytes(value)
        if isinstance(value, QuantizedTensor):
            entry = {
                "dtype": np.dtype(value.dtype).name,
                "shape": list(value.shape),
                "byte_offset": offset,
                "byte_len": len(raw),
                "quant": {"bits": value.bits, "block_size": value.block_size},
            }
        else:
            entry = {
                "dtype": np.asarray(value).dtype.name,
                "shape": list(np.shape(value)),
                "byte_offset": offset,
                "byte_len": len(raw),
            }
        header[name] = entry
        chunks.append(raw)
        offset += len(raw)

    header_raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as outfile:
        outfile.write(MAGIC)
        outfile.write(struct.pack("<Q", len(header_raw)))
        outfile.write(header_raw)
        outfile.write(payload)
        outfile.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    os.replace(tmp, path)
    size = path.stat().st_size
    log.trace("Wrote {} tensors ({} bytes) to [{}]", len(header), size, path)
    return size


def _decode_entry(name, entry, payload):
    start = entry["byte_offset"]
    raw = payload[start : start + entry["byte_len"]]
    if len(raw) != entry["byte_len"]:
        raise CheckpointError(
            f"Tensor '{name}' extends past the payload (truncated file)"
        )
    shape = tuple(entry["shape"])
    quant = entry.get("quant")
    if quant is None:
        arr = np.frombuffer(raw, dtype=_le(entry["dtype"]))
        return arr.astype(np.dtype(entry["dtype"])).reshape(shape)

    numel = int(np.prod(shape, dtype=np.int64))
    n_blocks = math.ceil(numel / quant["block_size"])
    scale_len = 4 * n_blocks
    scales = np.frombuffer(raw[:scale_len], dtype=_le(np.float32)).astype(np.float32)
    code_dtype = np.uint8 if quant["bits"] == 4 else np.int8
    packed = np.frombuffer(raw[scale_len:], dtype=code_dtype).copy()
    expected = math.ceil(numel / 2) if quant["bits"] == 4 else numel
    if packed.size != expected:
        raise CheckpointError(f"Quantized tensor '{name}' has {packed.size} code bytes")
    return QuantizedTensor(
        shape, quant["bits"], quant["block_size"], scales, packed, dtype=entry["dtype"]
    )


def read_tensor_file(path):
    """Read a TKPT1 file.

    Returns
    -------
    dict
        Name to `numpy.ndarray` or `QuantizedTensor`, in file order.

    Raises
    ------
    CheckpointError
        Raised for a bad magic or a truncated file.
    ChecksumError
        Raised if the payload doesn't match the stored CRC32.
    """
    with open(path, "rb") as infile:
        data = infile.read()
    if not data.startswith(MAGIC):
        msg = f"[{path}] is not a TKPT1 tensor file (bad magic)"
        log.error(msg)
        raise CheckpointError(msg)
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"[{path}] is truncated (no header length)")
    (header_len,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    if len(data) < pos + header_len + 4:
        raise CheckpointError(f"[{path}] is truncated (header incomplete)")
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"[{path}] has a corrupt header: {err}") from err
    pos += header_len

    payload_len = sum(entry["byte_len"] for entry in header.values())
    if len(data) != pos + payload_len + 4:
        msg = (
            f"[{path}] is truncated or padded: expected {pos + payload_len + 4} bytes, "
            f"found {len(data)}"
        )
        log.error(msg)
        raise CheckpointError(msg)
    payload = data[pos : pos + payload_len]
    (stored,) = struct.unpack("<I", data[pos + payload_len :])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        msg = f"Checksum mismatch in [{path}]"
        log.error(msg)
        raise ChecksumError(msg)
    return {name: _decode_entry(name, entry, payload) for name, entry in header.items()}


def read_config(directory):
    """Read and version-check the `config.json` of a checkpoint directory."""
    path = Path(directory) / CONFIG_FILE
    if not path.is_file():
        raise CheckpointError(f"No checkpoint at [{directory}] ({CONFIG_FILE} missing)")
    with open(path, "r", encoding="utf-8") as infile:
        config = json.load(infile)
    version = config.get("format_version")
    if version != FORMAT_VERSION:
        msg = (
            f"Checkpoint [{directory}] has format_version {version}, "
            f"expected {FORMAT_VERSION}"
        )
        log.error(msg)
        raise CheckpointVersionError(msg)
    return config


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as outfile:
        json.dump(obj, outfile, indent=2, sort_keys=True)
        outfile.write("\n")


@dataclass
class Checkpoint:

    """A loaded checkpoint: the model plus the raw configuration."""

    directory: Path
    config: dict
    model: object

    @property
    def template(self):
        """The `TemplateSpec` stored with the checkpoint (the default if none)."""
        return TemplateSpec.from_dict(self.config.get("template") or {})

    @property
    def kind(self):
        return self.config["kind"]


def _base_quant(model):
    for _, param in model.params.items():
        if param.quant is not None:
            return {"bits": param.quant.bits, "block_size": param.quant.block_size}
    return None


def save_checkpoint(
    model,
    directory,
    template=None,
    adapter_only=False,
    base_checkpoint=None,
    optimizer=None,
    trainer_state=None,
):  # pylint: disable-msg=too-many-arguments,too-many-locals
    """Save a model (or only its adapters) to a checkpoint directory.

    Parameters
    ----------
    model : TinyTransformer
    directory : str or Path
        Created if needed, existing files are overwritten.
    template : TemplateSpec, optional
        Stored for rendering at inference time, by default the standard one.
    adapter_only : bool, optional
        Store only LoRA adapter tensors and a reference to `base_checkpoint`,
        by default False.
    base_checkpoint : str, optional
        Base checkpoint directory of an adapter checkpoint.
    optimizer : AdamW, optional
        If given its state is written to `optimizer_state.bin`.
    trainer_state : dict, optional
        Written to `trainer_state.json` (together with optimizer metadata).

    Returns
    -------
    Path

    Raises
    ------
    CheckpointError
        Raised for adapter checkpoints without base or with non-LoRA tuners.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    template = template or TemplateSpec()

    tensors = {}
    if adapter_only:
        if base_checkpoint is None:
            raise CheckpointError(
                "Adapter checkpoints need a base_checkpoint reference"
            )
        others = [s.name for s in model.adapters.values() if s.variant != "lora"]
        if others or not model.adapters:
            msg = (
                "Adapter-only checkpoints hold LoRA adapters only, "
                f"got {others or 'none'}"
            )
            log.error(msg)
            raise CheckpointError(msg)
    else:
        for path, param in model.params.items():
            tensors[path] = param.quant if param.quant is not None else param.data
    for state in model.adapters.values():
        if state.merged:
            log.warning(
                "Adapter '{}' is saved in merged state, it can't be unmerged later",
                state.name,
            )
        for name, param in state.named_parameters():
            tensors[name] = param.data

    config = {
        "format_version": FORMAT_VERSION,
        "kind": "adapter" if adapter_only else "model",
        "model": dict(model.config.to_dict(), n_layers=model.n_blocks),
        "adapters": {name: state.to_dict() for name, state in model.adapters.items()},
        "template": template.to_dict(),
        "tokenizer": {"specials": template.specials()},
        "base_checkpoint": str(base_checkpoint) if adapter_only else None,
        "base_quant": _base_quant(model) if adapter_only else None,
        "tensors": list(tensors),
    }
    write_tensor_file(directory / WEIGHTS_FILE, tensors)
    _write_json(directory / CONFIG_FILE, config)

    if optimizer is not None or trainer_state is not None:
        state = dict(trainer_state or {})
        if optimizer is not None:
            arrays, meta = optimizer.state_dict()
            write_tensor_file(directory / OPTIMIZER_FILE, arrays)
            state["optimizer"] = meta
        _write_json(directory / TRAINER_STATE_FILE, state)
    log.info(
        "Saved {} checkpoint with {} tensors to [{}]",
        config["kind"],
        len(tensors),
        directory,
    )
    return directory


def _resolve_base(directory, reference):
    base = Path(reference)
    if not base.is_absolute():
        base = Path(directory) / base
    return base


def _restore_adapters(model, adapters, tensors, rename=None):
    names = []
    for name, info in adapters.items():
        new_name = rename or name
        state = restore_adapter(model, new_name, info)
        suffix = f".{name}"
        values = {}
        for key, _ in state.named_parameters():
            stored = key[: -len(f".{new_name}")] + suffix
            if stored not in tensors:
                raise CheckpointError(
                    f"Adapter tensor '{stored}' missing from checkpoint"
                )
            values[key] = tensors[stored]
        set_adapter_tensors(model, new_name, values)
        names.append(new_name)
    return names


def load_checkpoint(directory):
    """Load a checkpoint directory.

    Adapter checkpoints load their base first (re-quantizing it if the
    adapters were trained on a quantized base) and attach the adapters.

    Returns
    -------
    Checkpoint

    Raises
    ------
    CheckpointError
        Raised for missing files or tensors, bad magic and truncation.
    CheckpointVersionError
        Raised for an unsupported `format_version`.
    ChecksumError
        Raised for corrupted payloads.
    """
    directory = Path(directory)
    config = read_config(directory)
    tensors = read_tensor_file(directory / WEIGHTS_FILE)
    missing = [name for name in config["tensors"] if name not in tensors]
    if missing or len(tensors) != len(config["tensors"]):
        msg = f"Tensors in [{directory}] don't match its config (missing: {missing})"
        log.error(msg)
        raise CheckpointError(msg)

    if config["kind"] == "adapter":
        base_dir = _resolve_base(directory, config["base_checkpoint"])
        model = load_checkpoint(base_dir).model
        if model.adapters:
            raise CheckpointError(
                f"Base checkpoint [{base_dir}] already carries adapters"
            )
        quant = config.get("base_quant")
        if quant and _base_quant(model) is None:
            qlora_wrap(model, quant["bits"], quant["block_size"])
    else:
        model = build_model(ModelConfig.from_dict(config["model"]))
        for path, param in model.params.items():
            if path not in tensors:
                raise CheckpointError(
                    f"Base tensor '{path}' missing from [{directory}]"
                )
            value = tensors[path]
            if isinstance(value, QuantizedTensor):
                param.set_quant(value)
            else:
                param.data = value
    _restore_adapters(model, config.get("adapters", {}), tensors)
    log.debug("Loaded {} checkpoint from [{}]: {}", config["kind"], directory, model)
    return Checkpoint(directory, config, model)


def load_adapter(model, directory, name=None):
    """Attach the adapters of a saved checkpoint to an already loaded model.

    Parameters
    ----------
    model : TinyTransformer
    directory : str or Path
        A checkpoint with LoRA adapters (adapter or full kind).
    name : str, optional
        New name for the adapter, only allowed for single-adapter checkpoints.

    Returns
    -------
    list(str)
        The names of the attached adapters.
    """
    directory = Path(directory)
    config = read_config(directory)
    adapters = config.get("adapters", {})
    lora = {k: v for k, v in adapters.items() if v["config"]["variant"] == "lora"}
    if not lora:
        raise CheckpointError(f"[{directory}] contains no LoRA adapter")
    if name is not None and len(lora) != 1:
        raise CheckpointError(f"Can't rename {len(lora)} adapters to '{name}'")
    for key in ("d_model", "vocab_size", "n_heads", "d_ff"):
        if config["model"][key] != getattr(model.config, key):
            raise CheckpointError(
                f"Adapter [{directory}] was trained for {key}={config['model'][key]}, "
                f"model has {getattr(model.config, key)}"
            )
    tensors = read_tensor_file(directory / WEIGHTS_FILE)
    return _restore_adapters(model, lora, tensors, rename=name)


def load_training_state(directory):
    """Optimizer arrays and the trainer state dict of a checkpoint (or None)."""
    directory = Path(directory)
    state_path = directory / TRAINER_STATE_FILE
    if not state_path.is_file():
        return None, None
    with open(state_path, "r", encoding="utf-8") as infile:
        state = json.load(infile)
    arrays = None
    if (directory / OPTIMIZER_FILE).is_file():
        arrays = read_tensor_file(directory / OPTIMIZER_FILE)
    return arrays, state


def _weights_size(directory, config):
    size = (Path(directory) / WEIGHTS_FILE).stat().st_size
    if config["kind"] == "adapter":
        base = _resolve_base(directory, config["base_checkpoint"])
        size += _weights_size(base, read_config(base))
    return size


def export(ckpt_dir, output_dir, merge_lora=False, quant=None):
    """Export a checkpoint, optionally merging adapters and quantizing weights.

    Merging folds every active LoRA adapter into the base (quantized base
    weights are dequantized first), block expansion and full tuning leave
    their weights in the base already. Quantization happens after merging
    and applies to all 2-D weights.

    Parameters
    ----------
    ckpt_dir : str or Path
    output_dir : str or Path
        Must differ from `ckpt_dir`.
    merge_lora : bool, optional
    quant : dict, optional
        `{"bits": 4 or 8, "block_size": 64}`.

    Returns
    -------
    dict
        Report with the names of the adapters folded into the base (dropped
        inactive ones are not listed) and float / byte counts before and
        after. A plain copy of an adapter checkpoint gets an absolute
        `base_checkpoint` reference.

    Raises
    ------
    CheckpointError
        Raised if the output equals the input or there is nothing to merge.
    TunerError
        Raised when merging a LISA adapter.
    """
    ckpt_dir, output_dir = Path(ckpt_dir), Path(output_dir)
    if ckpt_dir.resolve() == output_dir.resolve():
        raise CheckpointError("Export output directory must differ from the checkpoint")
    config = read_config(ckpt_dir)
    bytes_before = _weights_size(ckpt_dir, config)

    if not merge_lora and quant is None:
        output_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(ckpt_dir / WEIGHTS_FILE, output_dir / WEIGHTS_FILE)
        if config["kind"] == "adapter":
            base = _resolve_base(ckpt_dir, config["base_checkpoint"]).resolve()
            config["base_checkpoint"] = str(base)
        _write_json(output_dir / CONFIG_FILE, config)
        floats = load_checkpoint(ckpt_dir).model.parameter_count()
        report = {
            "merged": [],
            "quant": None,
            "floats_before": floats,
            "floats_after": floats,
            "bytes_before": bytes_before,
            "bytes_after": bytes_before,
        }
        log.info("Copied checkpoint [{}] to [{}]", ckpt_dir, output_dir)
        return report

    ckpt = load_checkpoint(ckpt_dir)
    model = ckpt.model
    floats_before = model.parameter_count()
    merged = []
    if merge_lora:
        if not model.adapters:
            raise CheckpointError(f"Checkpoint [{ckpt_dir}] has no adapters to merge")
        for name, state in list(model.adapters.items()):
            if state.variant == "lora" and not state.active:
                log.warning("Dropping inactive adapter '{}'", name)
            else:
                if state.variant != "full":
                    merge(model, name)
                merged.append(name)
            remove_adapter(model, name)
        for _, param in model.params.items():
            param.requires_grad = param.quant is None
    if quant is not None:
        dequantize_model(model)
        quantize_model(model, quant["bits"], quant.get("block_size", 64))

    save_checkpoint(model, output_dir, template=ckpt.template)
    report = {
        "merged": merged,
        "quant": quant,
        "floats_before": floats_before,
        "floats_after": model.parameter_count(),
        "bytes_before": bytes_before,
        "bytes_after": (output_dir / WEIGHTS_FILE).stat().st_size,
    }
    log.info(
        "Exported [{}] to [{}]: {} -> {} bytes",
        ckpt_dir,
        output_dir,
        report["bytes_before"],
        report["bytes_after"],
    )
    return report
