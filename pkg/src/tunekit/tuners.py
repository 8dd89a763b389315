"""Tuner configurations and their attach / activate / merge semantics.

Supported variants:

* `full`: every base weight is trained.
* `lora`: low-rank adapters on selected projections, with the `rs` scaling
  mode and optional weight decomposition (DoRA).
* `lisa`: the base is frozen and a random subset of blocks is re-selected
  for training every few optimizer steps.
* `llamapro`: identity-initialized block copies are inserted and only those
  get trained.
"""

# pylint: disable-msg=too-many-instance-attributes

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from loguru import logger as log

from .common import format_percent
from .exceptions import ConfigError, TunerError
from .model import (
    Parameter,
    block_index,
    block_param_names,
    resolve_targets,
)
from .tensor import add, matmul, mul, row_normalize, scale, transpose


VARIANTS = ("full", "lora", "lisa", "llamapro")

ALWAYS_TRAINABLE = ("embed.tok", "final_norm.gain", "lm_head")
"""Parameters LISA keeps trainable independent of the block selection."""


@dataclass
class LoraConfig:

    """Low-rank adapter settings."""

    rank: int = 8
    alpha: float = 32.0
    target: object = "all-linears"
    scaling_mode: str = "standard"
    use_dora: bool = False
    seed: int = 0

    def validate(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"LoRA alpha must be > 0, got {self.alpha}")
        if self.scaling_mode not in ("standard", "rs"):
            raise ConfigError(f"Unknown LoRA scaling mode '{self.scaling_mode}'")
        return self


@dataclass
class LisaConfig:

    """Layerwise sampling settings, `activated_layers` counts blocks only."""

    activated_layers: int = 2
    reselect_interval: int = 20
    seed: int = 0

    def validate(self):
        if self.activated_layers < 1:
            raise ConfigError(
                f"lisa activated_layers must be >= 1, got {self.activated_layers}"
            )
        if self.reselect_interval < 1:
            raise ConfigError(
                f"lisa reselect_interval must be >= 1, got {self.reselect_interval}"
            )
        return self


@dataclass
class LlamaProConfig:

    """Block expansion settings."""

    new_blocks: int = 4

    def validate(self):
        if self.new_blocks < 1:
            raise ConfigError(
                f"llamapro new_blocks must be >= 1, got {self.new_blocks}"
            )
        return self


SUB_CONFIGS = {"lora": LoraConfig, "lisa": LisaConfig, "llamapro": LlamaProConfig}


@dataclass
class TunerConfig:

    """Declarative tuner specification.

    Exactly the sub-configuration belonging to `variant` may be set, a
    missing one is filled with its defaults.
    """

    variant: str = "lora"
    lora: Optional[LoraConfig] = None
    lisa: Optional[LisaConfig] = None
    llamapro: Optional[LlamaProConfig] = None

    def __post_init__(self):
        if self.variant in SUB_CONFIGS and getattr(self, self.variant) is None:
            setattr(self, self.variant, SUB_CONFIGS[self.variant]())

    def validate(self):
        """Check the configuration, raising a `ConfigError` if it's invalid."""
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"Unknown tuner variant '{self.variant}', use one of {VARIANTS}"
            )
        for name in SUB_CONFIGS:
            sub = getattr(self, name)
            if name != self.variant and sub is not None:
                raise ConfigError(
                    f"Tuner variant '{self.variant}' can't carry "
                    f"a '{name}' configuration"
                )
            if sub is not None:
                sub.validate()
        return self

    def to_dict(self):
        """The configuration as a plain (JSON serializable) dict."""
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Create a configuration from a dict produced by `to_dict()`."""
        kwargs = {"variant": values.get("variant", "lora")}
        for name, sub_cls in SUB_CONFIGS.items():
            if values.get(name) is not None:
                kwargs[name] = sub_cls(**values[name])
        return cls(**kwargs).validate()


def lora_scaling(alpha, rank, mode="standard"):
    """The LoRA output scale: `alpha / rank`, or `alpha / sqrt(rank)` in `rs` mode."""
    if mode == "rs":
        return alpha / math.sqrt(rank)
    return alpha / rank


class LoraTarget:

    """Learned state of one adapter on one projection.

    Attributes
    ----------
    path : str
    lora_a : Parameter
        Shape `(r, d_in)`, seeded uniform in `[-1/sqrt(d_in), 1/sqrt(d_in)]`.
    lora_b : Parameter
        Shape `(d_out, r)`, all-zero at initialization.
    magnitude : Parameter or None
        Shape `(d_out,)`, per output unit norm of the base weight (DoRA only).
    scaling : float
    """

    def __init__(self, path, lora_a, lora_b, scaling, magnitude=None):
        self.path = path
        self.lora_a = lora_a
        self.lora_b = lora_b
        self.scaling = scaling
        self.magnitude = magnitude
        self.merge_record = None

    def delta(self, x):
        """The additive low-rank contribution `s * B A x`."""
        low = matmul(matmul(x, transpose(self.lora_a)), transpose(self.lora_b))
        return scale(low, self.scaling)

    def forward(self, weight, x):
        """Full output of the adapted projection for base weight `weight`."""
        if self.magnitude is None:
            return add(matmul(x, transpose(weight)), self.delta(x))
        update = scale(matmul(self.lora_b, self.lora_a), self.scaling)
        direction = row_normalize(add(weight, update))
        return mul(matmul(x, transpose(direction)), self.magnitude)

    def merged_weight(self, weight):
        """The plain weight equivalent to this adapter on top of `weight`."""
        update = self.scaling * (self.lora_b.data @ self.lora_a.data)
        combined = weight + update.astype(weight.dtype)
        if self.magnitude is None:
            return combined
        norms = np.maximum(np.linalg.norm(combined, axis=1, keepdims=True), 1e-12)
        return (self.magnitude.data[:, None] * (combined / norms)).astype(weight.dtype)


class AdapterState:

    """One attached adapter.

    Attributes
    ----------
    name : str
    config : TunerConfig
    targets : dict
        Path to `LoraTarget` (LoRA adapters only).
    active : bool
        Whether the adapter contributes to forward passes.
    merged : bool
        Whether the adapter has been folded into the base weights.
    blocks : list(int)
        Indices of inserted blocks (block expansion only).
    selected : list(int)
        Currently trainable blocks (LISA only).
    """

    def __init__(self, name, config):
        self.name = name
        self.config = config
        self.targets = {}
        self.active = True
        self.merged = False
        self.blocks = []
        self.selected = []

    def __str__(self):
        return (
            f"{self.name} [{self.config.variant}] targets={len(self.targets)} "
            f"active={self.active} merged={self.merged}"
        )

    @property
    def variant(self):
        """Shortcut for `config.variant`."""
        return self.config.variant

    def to_dict(self):
        """Runtime state and configuration as a JSON serializable dict."""
        return {
            "config": self.config.to_dict(),
            "active": self.active,
            "merged": self.merged,
            "blocks": list(self.blocks),
            "selected": list(self.selected),
        }

    def named_parameters(self):
        """(name, Parameter) pairs of the adapter's own tensors."""
        named = []
        for path, entry in self.targets.items():
            named.append((f"{path}.lora_A.{self.name}", entry.lora_a))
            named.append((f"{path}.lora_B.{self.name}", entry.lora_b))
            if entry.magnitude is not None:
                named.append((f"{path}.lora_magnitude.{self.name}", entry.magnitude))
        return named


def adapter_forward(weight, x, target):
    """Output of a projection with base weight `weight` and one adapter target.

    Standard LoRA computes `W0 x + s B (A x)`, the weight-decomposed form
    computes `(m * normalize(W0 + s B A)) x` where each output unit's row is
    normalized over the input axis.

    Parameters
    ----------
    weight : Tensor
        The frozen `(d_out, d_in)` base weight.
    x : Tensor
        Input with trailing dimension `d_in`.
    target : LoraTarget

    Returns
    -------
    Tensor
    """
    return target.forward(weight, x)


def _set_base_trainable(model, flag):
    for _, param in model.params.items():
        param.requires_grad = flag and param.quant is None


def _get_state(model, name):
    try:
        return model.adapters[name]
    except KeyError as err:
        raise TunerError(f"No adapter named '{name}' attached") from err


def _shares_targets(state, other):
    return bool(set(state.targets) & set(other.targets))


def _attach_lora(model, state):
    config = state.config.lora
    paths = resolve_targets(model.params, config.target)
    inserted = set()
    for other in model.adapters.values():
        if other.variant == "llamapro":
            inserted.update(other.blocks)
    overlap = [p for p in paths if block_index(p) in inserted]
    if overlap:
        msg = f"LoRA targets overlap with inserted expansion blocks: {overlap}"
        log.error(msg)
        raise TunerError(msg)
    if not inserted:
        _set_base_trainable(model, False)

    rng = np.random.default_rng(config.seed)
    scaling = lora_scaling(config.alpha, config.rank, config.scaling_mode)
    for path in paths:
        weight = model.params[path]
        if weight.ndim != 2:
            raise TunerError(f"LoRA target '{path}' is not a matrix")
        values = weight.data
        d_out, d_in = values.shape
        bound = 1.0 / math.sqrt(d_in)
        init = rng.uniform(-bound, bound, size=(config.rank, d_in))
        lora_a = Parameter(init.astype(values.dtype))
        lora_b = Parameter(np.zeros((d_out, config.rank), dtype=values.dtype))
        magnitude = None
        if config.use_dora:
            magnitude = Parameter(np.linalg.norm(values, axis=1).astype(values.dtype))
        state.targets[path] = LoraTarget(path, lora_a, lora_b, scaling, magnitude)

    state.active = not any(
        other.active and _shares_targets(state, other)
        for other in model.adapters.values()
    )
    log.debug(
        "Attached LoRA '{}' on {} targets (r={}, s={:g}, dora={}, active={})",
        state.name,
        len(paths),
        config.rank,
        scaling,
        config.use_dora,
        state.active,
    )


def prepare_model(model, adapters):
    """Attach one or more tuners to a model (in place).

    Block expansion is processed first so LoRA targets can be checked against
    the inserted blocks. Base weights are frozen for every variant but
    `full`. The first LoRA adapter on a set of targets is active, later ones
    sharing targets start deactivated.

    Parameters
    ----------
    model : TinyTransformer
    adapters : dict
        Adapter name to `TunerConfig`.

    Returns
    -------
    TinyTransformer
        The same model object.

    Raises
    ------
    TunerError
        Raised for duplicate names, invalid combinations or LoRA targets
        inside inserted blocks.
    TargetResolutionError
        Raised for target patterns that don't match.
    """
    if not adapters:
        raise TunerError("No adapters given")
    for name, config in adapters.items():
        if name in model.adapters or name == "base":
            raise TunerError(f"Adapter name '{name}' is already taken")
        config.validate()

    variants = [c.variant for c in adapters.values()]
    if "full" in variants and len(adapters) > 1:
        raise TunerError("Full tuning can't be combined with other tuners")
    exclusive = [
        s.variant for s in model.adapters.values() if s.variant in ("lisa", "llamapro")
    ]
    exclusive += [v for v in variants if v in ("lisa", "llamapro")]
    if len(exclusive) > 1:
        raise TunerError(
            f"At most one lisa / llamapro tuner per model, got {exclusive}"
        )

    ordered = sorted(adapters.items(), key=lambda item: item[1].variant != "llamapro")
    for name, config in ordered:
        state = AdapterState(name, config)
        if config.variant == "full":
            _set_base_trainable(model, True)
        elif config.variant == "llamapro":
            state.blocks = llamapro_expand(model, config.llamapro.new_blocks)
        elif config.variant == "lisa":
            if config.lisa.activated_layers > model.n_blocks:
                raise TunerError(
                    f"lisa activated_layers {config.lisa.activated_layers} exceeds "
                    f"the {model.n_blocks} blocks of the model"
                )
            _set_base_trainable(model, False)
        else:
            _attach_lora(model, state)
        model.adapters[name] = state
        if config.variant == "lisa":
            lisa_reselect(model, 0, config.lisa)
        log.debug("Prepared adapter {}", state)
    return model


def restore_adapter(model, name, info):
    """Re-attach an adapter from the dict produced by `AdapterState.to_dict()`.

    The model must already have its final block layout (block expansion is
    not repeated). LoRA tensors are re-created with their initial values and
    are expected to be overwritten with `set_adapter_tensors()`.

    Returns
    -------
    AdapterState
    """
    if name in model.adapters or name == "base":
        raise TunerError(f"Adapter name '{name}' is already taken")
    config = TunerConfig.from_dict(info["config"])
    state = AdapterState(name, config)
    if config.variant == "full":
        _set_base_trainable(model, True)
    elif config.variant == "llamapro":
        state.blocks = list(info.get("blocks", []))
        for path, param in model.params.items():
            trainable = block_index(path) in state.blocks and param.quant is None
            param.requires_grad = trainable
    elif config.variant == "lora":
        _attach_lora(model, state)
    model.adapters[name] = state
    if config.variant == "lisa":
        lisa_reselect(model, 0, config.lisa)
        selected = list(info.get("selected", []))
        if selected:
            for path, param in model.params.items():
                idx = block_index(path)
                if idx is not None:
                    param.requires_grad = idx in selected and param.quant is None
            state.selected = selected
    state.active = info.get("active", True)
    state.merged = info.get("merged", False)
    log.debug("Restored adapter {}", state)
    return state


def activate_adapter(model, name, stack=False):
    """Activate an adapter, by default deactivating others sharing its targets."""
    state = _get_state(model, name)
    if not stack:
        for other in model.adapters.values():
            if other is not state and _shares_targets(state, other):
                other.active = False
    state.active = True
    log.trace("Activated adapter '{}' (stack={})", name, stack)


def deactivate_adapter(model, name):
    """Deactivate an adapter, it won't contribute to forward passes anymore."""
    _get_state(model, name).active = False
    log.trace("Deactivated adapter '{}'", name)


def remove_adapter(model, name):
    """Detach an adapter from the model and return its state."""
    state = _get_state(model, name)
    del model.adapters[name]
    return state


def merge(model, name):
    """Fold an adapter into the base weights.

    LoRA targets become `W0 + s B A`, weight-decomposed ones
    `m * normalize(W0 + s B A)`. Both the original weight and the applied
    delta are remembered for `unmerge()`. Quantized base weights are replaced
    by plain ones. Merging block expansion or full tuning is a no-op.

    Parameters
    ----------
    model : TinyTransformer
    name : str

    Returns
    -------
    TinyTransformer

    Raises
    ------
    TunerError
        Raised for LISA adapters, which have no additive structure.
    """
    state = _get_state(model, name)
    if state.variant == "lisa":
        msg = f"Adapter '{name}' is a lisa tuner, which can't be merged"
        log.error(msg)
        raise TunerError(msg)
    if state.merged:
        log.warning("Adapter '{}' is already merged", name)
        return model
    for path, entry in state.targets.items():
        param = model.params[path]
        original = param.data.copy()
        merged = entry.merged_weight(original)
        entry.merge_record = {
            "original": original,
            "quant": param.quant,
            "merged": merged.copy(),
            "delta": merged - original,
        }
        param.quant = None
        param.data = merged
    state.merged = True
    log.debug("Merged adapter '{}' into {} weights", name, len(state.targets))
    return model


def unmerge(model, name):
    """Undo a `merge()`, restoring the original weights bit-exactly if untouched."""
    state = _get_state(model, name)
    if not state.merged:
        log.warning("Adapter '{}' is not merged", name)
        return model
    for path, entry in state.targets.items():
        param = model.params[path]
        record = entry.merge_record
        if record is None:
            raise TunerError(
                f"No merge record for '{path}', adapter '{name}' can't be unmerged"
            )
        if np.array_equal(param.data, record["merged"]):
            param.data = record["original"].copy()
            param.quant = record["quant"]
        else:
            log.warning(
                "Weight '{}' changed since merging, subtracting the delta", path
            )
            param.data = param.data - record["delta"]
        entry.merge_record = None
    state.merged = False
    return model


def lisa_reselect(model, step, config=None):
    """Re-select the trainable blocks of a LISA-tuned model.

    At every multiple of `reselect_interval`, `activated_layers` distinct
    blocks are drawn uniformly (seeded by the config seed and the step) and
    made trainable, all other blocks are frozen. The embedding, final norm
    and head always stay trainable. Other steps change nothing.

    Parameters
    ----------
    model : TinyTransformer
    step : int
        Zero-based optimizer step.
    config : LisaConfig, optional
        By default the config of the model's LISA adapter.

    Returns
    -------
    list(int)
        The currently selected block indices, sorted.

    Raises
    ------
    TunerError
        Raised if more blocks are requested than the model has.
    """
    states = [s for s in model.adapters.values() if s.variant == "lisa"]
    state = states[0] if states else None
    if config is None:
        if state is None:
            raise TunerError("Model has no lisa adapter")
        config = state.config.lisa
    if config.activated_layers > model.n_blocks:
        raise TunerError(
            f"Can't activate {config.activated_layers} of {model.n_blocks} blocks"
        )
    if step % config.reselect_interval != 0 and state is not None and state.selected:
        return list(state.selected)

    rng = np.random.default_rng([config.seed, step])
    chosen = rng.choice(model.n_blocks, size=config.activated_layers, replace=False)
    selected = sorted(int(i) for i in chosen)
    for path, param in model.params.items():
        idx = block_index(path)
        if idx is None:
            param.requires_grad = path in ALWAYS_TRAINABLE
        else:
            param.requires_grad = idx in selected
        if param.quant is not None:
            param.requires_grad = False
    if state is not None:
        state.selected = selected
    log.trace("LISA step {}: trainable blocks {}", step, selected)
    return selected


def llamapro_expand(model, n_new_blocks):
    """Insert identity-initialized block copies, evenly spread (in place).

    With `L` blocks and group size `g = ceil(L / n)` the k-th copy goes after
    block `min((k + 1) g, L) - 1`. Each copy duplicates its predecessor with
    zeroed `attn.o_proj` and `ffn.down_proj`, so it passes its input through
    unchanged. Only the inserted blocks are trainable afterwards, all paths
    are renumbered contiguously.

    Parameters
    ----------
    model : TinyTransformer
    n_new_blocks : int

    Returns
    -------
    list(int)
        The indices of the inserted blocks in the expanded model.

    Raises
    ------
    TunerError
        Raised if `n_new_blocks` is out of range or LoRA adapters are attached.
    """
    n_old = model.n_blocks
    if n_new_blocks < 1 or n_new_blocks > n_old:
        msg = f"Can't insert {n_new_blocks} blocks into a model with {n_old} blocks"
        log.error(msg)
        raise TunerError(msg)
    if any(state.targets for state in model.adapters.values()):
        raise TunerError("Block expansion must happen before attaching LoRA adapters")

    group = math.ceil(n_old / n_new_blocks)
    insert_after = [min((k + 1) * group, n_old) - 1 for k in range(n_new_blocks)]
    items = model.params.items()
    prefix = [(p, v) for p, v in items if block_index(p) is None and p == "embed.tok"]
    suffix = [(p, v) for p, v in items if block_index(p) is None and p != "embed.tok"]

    blocks = []
    inserted = []
    for i in range(n_old):
        old = [
            (name, model.params[f"blocks.{i}.{name}"]) for name in block_param_names()
        ]
        blocks.append(old)
        for _ in range(insert_after.count(i)):
            clone = []
            for name, param in old:
                values = param.data.copy()
                if name in ("attn.o_proj", "ffn.down_proj"):
                    values[...] = 0.0
                clone.append((name, Parameter(values)))
            inserted.append(len(blocks))
            blocks.append(clone)

    renumbered = []
    for idx, block in enumerate(blocks):
        for name, param in block:
            param.requires_grad = idx in inserted
            renumbered.append((f"blocks.{idx}.{name}", param))
    for _, param in prefix + suffix:
        param.requires_grad = False
    model.params.replace(prefix + renumbered + suffix)
    model.n_blocks = len(blocks)
    log.debug(
        "Expanded model from {} to {} blocks, new: {}", n_old, model.n_blocks, inserted
    )
    return inserted


def trainable_summary(model):
    """Trainable and total scalar counts, adapter tensors included."""
    named = model.named_parameters()
    trainable = sum(p.size for _, p in named if p.requires_grad)
    total = sum(p.size for _, p in named)
    return trainable, total


def trainable_report(model):
    """Per-parameter trainable accounting plus a `total` row.

    Parameters
    ----------
    model : TinyTransformer

    Returns
    -------
    list(dict)
        Rows with keys `name`, `trainable_count`, `total_count` and
        `percent` (formatted with two decimals, `100%` when complete).
    """
    rows = []
    for name, param in model.named_parameters():
        trainable = param.size if param.requires_grad else 0
        rows.append(
            {
                "name": name,
                "trainable_count": trainable,
                "total_count": param.size,
                "percent": format_percent(trainable, param.size),
            }
        )
    trainable, total = trainable_summary(model)
    rows.append(
        {
            "name": "total",
            "trainable_count": trainable,
            "total_count": total,
            "percent": format_percent(trainable, total),
        }
    )
    return rows


def set_adapter_tensors(model, name, tensors):
    """Overwrite an adapter's tensors from a name to array mapping."""
    state = _get_state(model, name)
    named = dict(state.named_parameters())
    for key, values in tensors.items():
        if key not in named:
            raise TunerError(f"Adapter '{name}' has no tensor '{key}'")
        if tuple(values.shape) != named[key].shape:
            raise TunerError(
                f"Shape mismatch for '{key}': {values.shape} vs {named[key].shape}"
            )
        named[key].data = np.array(values, dtype=named[key].data.dtype)


def clone_model(model):
    """A deep copy of a model including its adapters."""
    return copy.deepcopy(model)


@dataclass
class TunerPreset:

    """A named tuner setup as offered on the command line and in benchmarks."""

    name: str
    tuner: TunerConfig
    loraplus_ratio: float = 1.0
    use_galore: bool = False
    extra: dict = field(default_factory=dict)


PRESET_NAMES = (
    "full",
    "lora",
    "rslora",
    "dora",
    "lora+",
    "lisa",
    "llamapro",
    "galore",
    "qlora",
)


def make_preset(
    name,
    lora_rank=8,
    lora_alpha=32.0,
    target="all-linears",
    lisa_layers=2,
    lisa_interval=20,
    new_blocks=4,
    loraplus_ratio=16.0,
    seed=0,
):  # pylint: disable-msg=too-many-arguments
    """Translate a tuner name from the command line into a `TunerPreset`.

    Parameters
    ----------
    name : str
        One of `PRESET_NAMES`.
    lora_rank, lora_alpha, target : optional
        LoRA settings for the LoRA based presets.
    lisa_layers, lisa_interval : int, optional
        Settings for the `lisa` preset.
    new_blocks : int, optional
        Number of inserted blocks for the `llamapro` preset.
    loraplus_ratio : float, optional
        Learning rate ratio of the B matrices for the `lora+` preset.
    seed : int, optional
        Seed for adapter initialization and block selection.

    Returns
    -------
    TunerPreset

    Raises
    ------
    ConfigError
        Raised for unknown names.
    """

    def lora(**kwargs):
        return TunerConfig(
            "lora",
            lora=LoraConfig(
                rank=lora_rank, alpha=lora_alpha, target=target, seed=seed, **kwargs
            ),
        )

    if name == "full":
        return TunerPreset(name, TunerConfig("full"))
    if name == "lora":
        return TunerPreset(name, lora())
    if name == "rslora":
        return TunerPreset(name, lora(scaling_mode="rs"))
    if name == "dora":
        return TunerPreset(name, lora(use_dora=True))
    if name == "lora+":
        return TunerPreset(name, lora(), loraplus_ratio=loraplus_ratio)
    if name == "qlora":
        return TunerPreset(name, lora(), extra={"quant_bits": 4})
    if name == "lisa":
        config = LisaConfig(lisa_layers, lisa_interval, seed)
        return TunerPreset(name, TunerConfig("lisa", lisa=config))
    if name == "llamapro":
        llamapro = LlamaProConfig(new_blocks)
        return TunerPreset(name, TunerConfig("llamapro", llamapro=llamapro))
    if name == "galore":
        return TunerPreset(name, TunerConfig("full"), use_galore=True)
    raise ConfigError(f"Unknown tuner '{name}', use one of {PRESET_NAMES}")
