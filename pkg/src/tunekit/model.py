"""A tiny decoder-only transformer with a path-addressable parameter registry."""

# pylint: disable-msg=too-many-instance-attributes

import fnmatch
import math
import re
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from loguru import logger as log

from .exceptions import (
    ConfigError,
    QuantizationError,
    ShapeError,
    TargetResolutionError,
    TunerError,
)
from .tensor import (
    Tensor,
    add,
    causal_mask,
    default_dtype,
    embedding,
    matmul,
    no_grad,
    reshape,
    rms_norm,
    scale,
    silu,
    softmax,
    transpose,
)


LINEAR_PATTERN = re.compile(r"^blocks\.\d+\.(attn\.[qkvo]_proj|ffn\.(up|down)_proj)$")
"""Paths of the 2-D projections inside transformer blocks ("all-linears")."""

BLOCK_PATTERN = re.compile(r"^blocks\.(\d+)\.(.+)$")


@dataclass
class ModelConfig:

    """Dimensions of the tiny transformer.

    The default vocabulary holds the 256 byte values, four chat specials and
    one image placeholder token.
    """

    vocab_size: int = 261
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    seed: int = 0

    def validate(self):
        """Check the configuration, raising a `ConfigError` if it's invalid."""
        for name, value in asdict(self).items():
            if name != "seed" and (not isinstance(value, int) or value < 1):
                raise ConfigError(
                    f"ModelConfig.{name} must be a positive integer, got {value}"
                )
        if self.vocab_size < 260:
            raise ConfigError(f"vocab_size must be >= 260, got {self.vocab_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by "
                f"n_heads ({self.n_heads})"
            )
        return self

    def to_dict(self):
        """The configuration as a plain dict."""
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        """Create a configuration from a dict, ignoring unknown keys."""
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


@dataclass
class GenerationParams:

    """Decoding settings, a temperature of 0 means greedy decoding."""

    max_new_tokens: int = 64
    temperature: float = 0.0
    top_k: int = 0
    seed: int = 0
    stop_token: Optional[int] = None

    def validate(self):
        """Check the settings, raising a `ConfigError` if they're invalid."""
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0, got {self.top_k}")
        return self


class Parameter(Tensor):

    """A named model weight, optionally backed by a quantized tensor.

    While `quant` is set the `data` attribute is reconstructed from the
    quantized codes on every access and can't be assigned.
    """

    def __init__(self, data, requires_grad=True):
        self.quant = None
        self._value = None
        self.value_dtype = None
        super().__init__(data, requires_grad)

    @property
    def data(self):
        """The parameter values (dequantized for quantized parameters)."""
        if self.quant is not None:
            return self.quant.dequantize().astype(self.value_dtype)
        return self._value

    @data.setter
    def data(self, value):
        if self.quant is not None:
            raise QuantizationError("Can't assign values to a quantized parameter")
        self._value = value
        self.value_dtype = value.dtype

    @property
    def trainable(self):
        """Alias for `requires_grad`."""
        return self.requires_grad

    def set_quant(self, quant):
        """Back the parameter by a quantized tensor and freeze it."""
        self.value_dtype = np.dtype(quant.dtype)
        self.quant = quant
        self._value = None
        self.requires_grad = False
        self.grad = None


class ParamRegistry:

    """Ordered mapping of unique parameter paths to `Parameter` objects."""

    def __init__(self):
        self._params = {}

    def __len__(self):
        return len(self._params)

    def __contains__(self, path):
        return path in self._params

    def __iter__(self):
        return iter(self._params)

    def __getitem__(self, path):
        try:
            return self._params[path]
        except KeyError as err:
            raise TargetResolutionError(f"No parameter at path '{path}'") from err

    def add(self, path, param):
        """Register a parameter under a new path."""
        if path in self._params:
            raise ConfigError(f"Duplicate parameter path '{path}'")
        self._params[path] = param

    def items(self):
        """(path, parameter) pairs in registration order."""
        return list(self._params.items())

    def paths(self):
        """All paths in registration order."""
        return list(self._params)

    def total_count(self):
        """Number of scalar values over all registered parameters."""
        return sum(p.size for p in self._params.values())

    def trainable_count(self):
        """Number of scalar values in trainable parameters."""
        return sum(p.size for p in self._params.values() if p.requires_grad)

    def replace(self, items):
        """Replace the whole content by a new sequence of (path, parameter) pairs."""
        self._params = {}
        for path, param in items:
            self.add(path, param)


def block_param_names():
    """Names (relative to `blocks.<i>.`) of one block's parameters, in order."""
    return [
        "attn_norm.gain",
        "attn.q_proj",
        "attn.k_proj",
        "attn.v_proj",
        "attn.o_proj",
        "ffn_norm.gain",
        "ffn.up_proj",
        "ffn.down_proj",
    ]


def block_shapes(config):
    """Map block-relative parameter names to shapes `(d_out, d_in)` or `(d,)`."""
    dim, hidden = config.d_model, config.d_ff
    return {
        "attn_norm.gain": (dim,),
        "attn.q_proj": (dim, dim),
        "attn.k_proj": (dim, dim),
        "attn.v_proj": (dim, dim),
        "attn.o_proj": (dim, dim),
        "ffn_norm.gain": (dim,),
        "ffn.up_proj": (hidden, dim),
        "ffn.down_proj": (dim, hidden),
    }


def block_index(path):
    """The block number of a path like `blocks.3.attn.q_proj`, or None."""
    match = BLOCK_PATTERN.match(path)
    return int(match.group(1)) if match else None


def sinusoidal_positions(length, dim):
    """Fixed sinusoidal position encodings of shape `(length, dim)`."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs[: dim // 2])
    return table


class TinyTransformer:

    """Pre-norm decoder-only transformer without biases and an untied head.

    Attributes
    ----------
    config : ModelConfig
    params : ParamRegistry
        The base weights, addressable by path.
    n_blocks : int
        Current number of blocks (grows by block expansion).
    adapters : dict
        Attached adapters, name to `tunekit.tuners.AdapterState`.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.n_blocks = config.n_layers
        self.adapters = {}
        self._positions = sinusoidal_positions(config.max_seq_len, config.d_model)

    def __str__(self):
        return (
            f"TinyTransformer(d_model={self.config.d_model}, blocks={self.n_blocks}, "
            f"heads={self.config.n_heads}, vocab={self.config.vocab_size}, "
            f"adapters={list(self.adapters)})"
        )

    def named_parameters(self):
        """All (name, Parameter) pairs: base weights first, then adapter tensors."""
        named = self.params.items()
        for state in self.adapters.values():
            named.extend(state.named_parameters())
        return named

    def parameter_count(self):
        """Total number of scalar values including adapter tensors."""
        return sum(p.size for _, p in self.named_parameters())

    def linear(self, path, x):
        """Apply the projection at `path` to `x`, routed through active adapters.

        Parameters
        ----------
        path : str
            A registry path of a `(d_out, d_in)` weight.
        x : Tensor
            Input with trailing dimension `d_in`.

        Returns
        -------
        Tensor
            Output with trailing dimension `d_out`.
        """
        weight = self.params[path]
        entries = [
            state.targets[path]
            for state in self.adapters.values()
            if state.active and not state.merged and path in state.targets
        ]
        if not entries:
            return matmul(x, transpose(weight))
        decomposed = [entry for entry in entries if entry.magnitude is not None]
        if decomposed and len(entries) > 1:
            raise TunerError(f"Weight-decomposed adapters can't be stacked on '{path}'")
        if decomposed:
            return decomposed[0].forward(weight, x)
        out = matmul(x, transpose(weight))
        for entry in entries:
            out = add(out, entry.delta(x))
        return out

    def _check_ids(self, ids):
        if ids.ndim != 2 or ids.size == 0:
            raise ShapeError(
                f"forward: expected a non-empty batch x seq array, got {ids.shape}"
            )
        if not np.issubdtype(ids.dtype, np.integer):
            raise ShapeError(f"forward: token ids must be integers, got {ids.dtype}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ShapeError(
                f"forward: token id out of range [0, {self.config.vocab_size})"
            )
        if ids.shape[1] > self.config.max_seq_len:
            raise ShapeError(
                f"forward: sequence length {ids.shape[1]} exceeds "
                f"max_seq_len {self.config.max_seq_len}"
            )

    def forward(self, token_ids):
        """Compute next-token logits.

        Parameters
        ----------
        token_ids : array-like(int)
            Shape `(batch, seq)`.

        Returns
        -------
        Tensor
            Logits of shape `(batch, seq, vocab)`; position `t` only depends
            on tokens up to `t`.

        Raises
        ------
        ShapeError
            Raised for empty batches, out-of-range ids or overlong sequences.
        """
        ids = np.asarray(token_ids)
        self._check_ids(ids)
        batch, length = ids.shape
        dim, heads = self.config.d_model, self.config.n_heads
        head_dim = dim // heads

        tok = self.params["embed.tok"]
        x = embedding(tok, ids)
        x = add(x, Tensor(self._positions[:length].astype(x.data.dtype)))
        for i in range(self.n_blocks):
            prefix = f"blocks.{i}"
            h = rms_norm(x, self.params[f"{prefix}.attn_norm.gain"])
            split = []
            for name in ("q_proj", "k_proj", "v_proj"):
                proj = self.linear(f"{prefix}.attn.{name}", h)
                proj = reshape(proj, (batch, length, heads, head_dim))
                split.append(transpose(proj, (0, 2, 1, 3)))
            query, key, value = split
            scores = scale(matmul(query, transpose(key)), 1.0 / math.sqrt(head_dim))
            probs = softmax(causal_mask(scores))
            context = transpose(matmul(probs, value), (0, 2, 1, 3))
            context = reshape(context, (batch, length, dim))
            x = add(x, self.linear(f"{prefix}.attn.o_proj", context))

            h = rms_norm(x, self.params[f"{prefix}.ffn_norm.gain"])
            h = silu(self.linear(f"{prefix}.ffn.up_proj", h))
            x = add(x, self.linear(f"{prefix}.ffn.down_proj", h))

        x = rms_norm(x, self.params["final_norm.gain"])
        return self.linear("lm_head", x)

    __call__ = forward

    def next_token_logits(self, ids):
        """Logits for the token following a single sequence, without recording."""
        with no_grad():
            logits = self.forward(np.asarray(ids, dtype=np.int64)[None, :])
        return logits.data[0, -1]


def build_model(config):
    """Create a model with deterministically initialized weights.

    Projections are drawn from a normal distribution with standard deviation
    `1/sqrt(d_in)`, the token embedding with standard deviation 1, norm gains
    are set to ones. All parameters start out trainable.

    Parameters
    ----------
    config : ModelConfig

    Returns
    -------
    TinyTransformer

    Raises
    ------
    ConfigError
        Raised for invalid dimensions.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = default_dtype()
    registry = ParamRegistry()

    def normal(shape, std):
        return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))

    registry.add("embed.tok", normal((config.vocab_size, config.d_model), 1.0))
    shapes = block_shapes(config)
    for i in range(config.n_layers):
        for name in block_param_names():
            shape = shapes[name]
            if len(shape) == 1:
                param = Parameter(np.ones(shape, dtype=dtype))
            else:
                param = normal(shape, 1.0 / math.sqrt(shape[1]))
            registry.add(f"blocks.{i}.{name}", param)
    registry.add("final_norm.gain", Parameter(np.ones((config.d_model,), dtype=dtype)))
    registry.add(
        "lm_head",
        normal((config.vocab_size, config.d_model), 1.0 / math.sqrt(config.d_model)),
    )
    model = TinyTransformer(config, registry)
    log.debug("Built {} with {} parameters", model, registry.total_count())
    return model


def resolve_targets(registry, pattern):
    """Resolve a target specification to a list of parameter paths.

    Parameters
    ----------
    registry : ParamRegistry or TinyTransformer
    pattern : str or list(str)
        `all-linears` (every block projection), an explicit list of paths, a
        single path or a glob like `*.q_proj`.

    Returns
    -------
    list(str)
        Matching paths in registry order.

    Raises
    ------
    TargetResolutionError
        Raised if nothing matches or an explicit path doesn't exist.
    """
    if isinstance(registry, TinyTransformer):
        registry = registry.params
    paths = registry.paths()
    if isinstance(pattern, (list, tuple)):
        missing = [p for p in pattern if p not in registry]
        if missing:
            msg = f"Unknown target paths: {missing}"
            log.error(msg)
            raise TargetResolutionError(msg)
        wanted = set(pattern)
        found = [p for p in paths if p in wanted]
    elif pattern == "all-linears":
        found = [p for p in paths if LINEAR_PATTERN.match(p)]
    else:
        found = [p for p in paths if fnmatch.fnmatchcase(p, pattern)]
    if not found:
        msg = f"Target pattern {pattern!r} matches no parameter"
        log.error(msg)
        raise TargetResolutionError(msg)
    return found


class TokenStream:

    """Iterable producing generated token ids one at a time.

    After the iteration finished, `finish_reason` is `stop` if the stop token
    was produced (it is not yielded) or `length` if the token budget or the
    model's context size was exhausted.
    """

    def __init__(self, model, prompt_ids, params):
        params.validate()
        prompt = [int(t) for t in prompt_ids]
        if not prompt:
            raise ShapeError("generate: the prompt must not be empty")
        if len(prompt) > model.config.max_seq_len:
            raise ShapeError(
                f"generate: prompt of {len(prompt)} tokens exceeds "
                f"max_seq_len {model.config.max_seq_len}"
            )
        self.model = model
        self.prompt = prompt
        self.params = params
        self.finish_reason = None

    def _pick(self, logits, rng):
        if self.params.temperature == 0:
            return int(np.argmax(logits))
        scores = np.asarray(logits, dtype=np.float64) / self.params.temperature
        if 0 < self.params.top_k < scores.size:
            order = np.argsort(-scores, kind="stable")
            cut = np.full(scores.shape, -np.inf)
            keep = order[: self.params.top_k]
            cut[keep] = scores[keep]
            scores = cut
        probs = np.exp(scores - np.max(scores))
        cdf = np.cumsum(probs / probs.sum())
        index = np.searchsorted(cdf, rng.random(), side="right")
        return int(min(index, scores.size - 1))

    def __iter__(self):
        ids = list(self.prompt)
        rng = np.random.default_rng(self.params.seed)
        for _ in range(self.params.max_new_tokens):
            if len(ids) >= self.model.config.max_seq_len:
                self.finish_reason = "length"
                return
            token = self._pick(self.model.next_token_logits(ids), rng)
            if self.params.stop_token is not None and token == self.params.stop_token:
                self.finish_reason = "stop"
                return
            ids.append(token)
            yield token
        self.finish_reason = "length"


def stream_tokens(model, prompt_ids, params):
    """Create a `TokenStream` for incremental decoding."""
    return TokenStream(model, prompt_ids, params)


def generate(model, prompt_ids, params):
    """Generate a continuation (without the stop token) for a prompt.

    Parameters
    ----------
    model : TinyTransformer
    prompt_ids : list(int)
        Non-empty prompt.
    params : GenerationParams

    Returns
    -------
    list(int)
    """
    return list(TokenStream(model, prompt_ids, params))
