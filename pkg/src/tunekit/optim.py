"""AdamW with parameter groups, the GaLore projected variant and the lr schedule."""

import math
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np
from loguru import logger as log

from .exceptions import ConfigError
from .linalg import truncated_svd


@dataclass
class ParamGroup:

    """Parameters sharing one learning rate and weight decay setting."""

    name: str
    paths: List[str]
    lr: float
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class GaloreConfig:

    """Settings of the low-rank gradient projection.

    Parameters
    ----------
    rank : int
        Projection rank, clipped to the smaller dimension of each matrix.
    update_interval : int
        Number of steps between projector refreshes.
    scale : float
        Factor applied to the projected-back update.
    seed : int
        Seed of the truncated SVD start block.
    """

    rank: int = 128
    update_interval: int = 200
    scale: float = 0.25
    seed: int = 0

    def validate(self):
        if self.rank < 1:
            raise ConfigError(f"GaLore rank must be >= 1, got {self.rank}")
        if self.update_interval < 1:
            raise ConfigError(
                f"GaLore update_interval must be >= 1, got {self.update_interval}"
            )
        return self

    def to_dict(self):
        return asdict(self)


def build_param_groups(
    model,
    base_lr,
    loraplus_ratio=1.0,
    weight_decay=0.0,
    betas=(0.9, 0.999),
    eps=1e-8,
    include_frozen=False,
):  # pylint: disable-msg=too-many-arguments
    """Partition the trainable parameters into optimizer groups.

    LoRA `B` matrices go into their own group(s) with `loraplus_ratio` times
    the base learning rate. With a weight decay, 2-D weights (except the token
    embedding) are separated from the non-decaying rest.

    Parameters
    ----------
    model : TinyTransformer
    base_lr : float
    loraplus_ratio : float, optional
        Learning-rate ratio of the `B` matrices, by default 1.0.
    weight_decay : float, optional
        By default 0.0.
    betas : tuple(float, float), optional
    eps : float, optional
    include_frozen : bool, optional
        Also include currently frozen (non-quantized) parameters, required
        when the trainable set changes during training, by default False.

    Returns
    -------
    list(ParamGroup)

    Raises
    ------
    ConfigError
        Raised for a non-positive ratio or negative learning rate.
    """
    if loraplus_ratio <= 0:
        msg = f"loraplus_ratio must be > 0, got {loraplus_ratio}"
        log.error(msg)
        raise ConfigError(msg)
    if base_lr < 0:
        raise ConfigError(f"Learning rate must be >= 0, got {base_lr}")

    named = [
        (name, param)
        for name, param in model.named_parameters()
        if param.requires_grad or (include_frozen and param.quant is None)
    ]
    has_lora = any(".lora_B." in name for name, _ in named)
    if not has_lora and loraplus_ratio != 1.0:
        log.warning(
            "loraplus_ratio {} has no effect without LoRA adapters", loraplus_ratio
        )

    buckets = {}
    for name, param in named:
        is_b = has_lora and loraplus_ratio != 1.0 and ".lora_B." in name
        decays = weight_decay > 0 and param.ndim == 2 and name != "embed.tok"
        buckets.setdefault((is_b, decays), []).append(name)

    groups = []
    for is_b, decays in [(False, True), (False, False), (True, True), (True, False)]:
        paths = buckets.get((is_b, decays))
        if not paths:
            continue
        groups.append(
            ParamGroup(
                name=("lora_B" if is_b else "default")
                + ("" if decays else "_no_decay"),
                paths=paths,
                lr=base_lr * loraplus_ratio if is_b else base_lr,
                weight_decay=weight_decay if decays else 0.0,
                betas=tuple(betas),
                eps=eps,
            )
        )
    log.debug(
        "Parameter groups: {}",
        ", ".join(f"{g.name} ({len(g.paths)} tensors, lr={g.lr:g})" for g in groups),
    )
    return groups


class AdamW:

    """Adam with decoupled weight decay over named parameter groups.

    Attributes
    ----------
    groups : list(ParamGroup)
    params : dict
        Name to `Parameter`, resolved when the optimizer is created.
    state : dict
        Name to a dict with the moment buffers `exp_avg` and `exp_avg_sq`.
    """

    def __init__(self, model, groups):
        self.groups = groups
        self.params = dict(model.named_parameters())
        self.state = {}
        seen = set()
        for group in groups:
            for path in group.paths:
                if path in seen:
                    raise ConfigError(f"Parameter '{path}' is in more than one group")
                if path not in self.params:
                    raise ConfigError(
                        f"Unknown parameter '{path}' in group {group.name}"
                    )
                seen.add(path)
        missing = [
            n for n, p in self.params.items() if p.requires_grad and n not in seen
        ]
        if missing:
            raise ConfigError(f"Trainable parameters without a group: {missing}")

    def step(self, step, lr_factor=1.0):
        """Update every parameter that has a gradient, then drop the gradients.

        Parameters
        ----------
        step : int
            One-based step number, used for bias correction.
        lr_factor : float, optional
            Multiplier applied to every group's learning rate (the schedule),
            by default 1.0.

        Raises
        ------
        ConfigError
            Raised if `step` is smaller than 1.
        """
        if step < 1:
            raise ConfigError(f"Optimizer steps are counted from 1, got {step}")
        for group in self.groups:
            lr = group.lr * lr_factor
            for path in group.paths:
                param = self.params[path]
                if param.grad is not None and param.requires_grad:
                    self._update(path, param, group, lr, step)
                param.grad = None

    def zero_grad(self):
        """Drop all gradients."""
        for param in self.params.values():
            param.grad = None

    def _moments(self, path, shape, dtype):
        if path not in self.state:
            self.state[path] = {
                "exp_avg": np.zeros(shape, dtype=dtype),
                "exp_avg_sq": np.zeros(shape, dtype=dtype),
            }
        return self.state[path]

    @staticmethod
    def _adam_direction(state, grad, group, step):
        beta1, beta2 = group.betas
        state["exp_avg"] = beta1 * state["exp_avg"] + (1.0 - beta1) * grad
        state["exp_avg_sq"] = beta2 * state["exp_avg_sq"] + (1.0 - beta2) * grad * grad
        m_hat = state["exp_avg"] / (1.0 - beta1**step)
        v_hat = state["exp_avg_sq"] / (1.0 - beta2**step)
        return m_hat / (np.sqrt(v_hat) + group.eps)

    def _update(self, path, param, group, lr, step):
        values = param.data
        state = self._moments(path, values.shape, values.dtype)
        direction = self._adam_direction(state, param.grad, group, step)
        param.data = values - lr * (direction + group.weight_decay * values)

    def _tracked(self):
        for group in self.groups:
            for path in group.paths:
                param = self.params[path]
                if param.requires_grad:
                    yield path, param

    def state_floats(self):
        """Analytic number of floats kept as optimizer state (two moments each)."""
        return sum(2 * param.size for _, param in self._tracked())

    def state_dict(self):
        """Arrays and metadata needed to resume bit-exactly.

        Returns
        -------
        (dict, dict)
            Name to array mapping and a JSON-serializable metadata dict.
        """
        arrays = {}
        for path, state in self.state.items():
            for key, values in state.items():
                arrays[f"{path}.{key}"] = values
        return arrays, {"kind": "adamw", "paths": list(self.state)}

    def load_state_dict(self, arrays, meta):
        """Restore the state produced by `state_dict()`."""
        self.state = {}
        for path in meta.get("paths", []):
            self.state[path] = {
                "exp_avg": np.array(arrays[f"{path}.exp_avg"]),
                "exp_avg_sq": np.array(arrays[f"{path}.exp_avg_sq"]),
            }


class GaloreAdamW(AdamW):

    """AdamW running on low-rank projections of the 2-D gradients.

    For an `m x n` gradient with `m <= n` the projector `P` holds the `r`
    leading left singular vectors and the optimizer works on `P^T g`
    (`r x n`), otherwise `P` holds right singular vectors and it works on
    `g P` (`m x r`). Updates are projected back, scaled by `config.scale` and
    applied with decoupled weight decay. One-dimensional parameters take the
    plain AdamW path.
    """

    def __init__(self, model, groups, config=None):
        super().__init__(model, groups)
        self.config = (config or GaloreConfig()).validate()
        self.projections = {}
        self._clipped = set()

    def _rank(self, path, shape):
        rank = min(self.config.rank, min(shape))
        if rank < self.config.rank and path not in self._clipped:
            log.warning(
                "GaLore rank {} clipped to {} for '{}' of shape {}",
                self.config.rank,
                rank,
                path,
                shape,
            )
            self._clipped.add(path)
        if rank < 1:
            raise ConfigError(f"GaLore rank for '{path}' would be {rank}")
        return rank

    @staticmethod
    def _side(shape):
        return "left" if shape[0] <= shape[1] else "right"

    def _projected_shape(self, path, shape):
        rank = self._rank(path, shape)
        if self._side(shape) == "left":
            return (rank, shape[1])
        return (shape[0], rank)

    def inject_projector(self, path, projector):
        """Set a fixed projector for a parameter, disabling its refreshes.

        Parameters
        ----------
        path : str
        projector : array-like
            `m x r` for the left side or `n x r` for the right side, with
            orthonormal columns.
        """
        shape = self.params[path].shape
        projector = np.asarray(projector, dtype=np.float64)
        side = "left" if projector.shape[0] == shape[0] else "right"
        rank = projector.shape[1]
        moment_shape = (rank, shape[1]) if side == "left" else (shape[0], rank)
        self.projections[path] = {
            "projector": projector,
            "side": side,
            "last_refresh": 0,
            "frozen": True,
        }
        self.state[path] = {
            "exp_avg": np.zeros(moment_shape),
            "exp_avg_sq": np.zeros(moment_shape),
        }

    def _refresh(self, path, grad, step):
        rank = self._rank(path, grad.shape)
        side = self._side(grad.shape)
        result = truncated_svd(grad, rank, seed=self.config.seed)
        self.projections[path] = {
            "projector": result.U if side == "left" else result.V,
            "side": side,
            "last_refresh": step,
            "frozen": False,
        }
        log.trace("GaLore projector for '{}' refreshed at step {}", path, step)

    def _update(self, path, param, group, lr, step):
        if param.ndim != 2:
            super()._update(path, param, group, lr, step)
            return
        grad = np.asarray(param.grad, dtype=np.float64)
        proj = self.projections.get(path)
        if proj is None or (
            not proj["frozen"]
            and step - proj["last_refresh"] >= self.config.update_interval
        ):
            self._refresh(path, grad, step)
            proj = self.projections[path]
        projector = proj["projector"]
        if proj["side"] == "left":
            low = projector.T @ grad
        else:
            low = grad @ projector
        state = self._moments(path, low.shape, np.float64)
        direction = self._adam_direction(state, low, group, step)
        if proj["side"] == "left":
            update = projector @ direction
        else:
            update = direction @ projector.T
        values = param.data
        delta = lr * self.config.scale * update + lr * group.weight_decay * values
        param.data = values - delta.astype(values.dtype)

    def state_floats(self):
        """Analytic moment float count, projected shapes for 2-D parameters."""
        total = 0
        for path, param in self._tracked():
            if param.ndim == 2:
                rows, cols = self._projected_shape(path, param.shape)
                total += 2 * rows * cols
            else:
                total += 2 * param.size
        return total

    def projector_floats(self):
        """Analytic float count of all projectors."""
        total = 0
        for path, param in self._tracked():
            if param.ndim == 2:
                rank = self._rank(path, param.shape)
                side = self._side(param.shape)
                total += rank * (param.shape[0] if side == "left" else param.shape[1])
        return total

    def state_dict(self):
        arrays, meta = super().state_dict()
        meta["kind"] = "galore"
        meta["projections"] = {}
        for path, proj in self.projections.items():
            arrays[f"{path}.projector"] = proj["projector"]
            meta["projections"][path] = {
                key: proj[key] for key in ("side", "last_refresh", "frozen")
            }
        return arrays, meta

    def load_state_dict(self, arrays, meta):
        super().load_state_dict(arrays, meta)
        self.projections = {}
        for path, info in meta.get("projections", {}).items():
            projector = np.array(arrays[f"{path}.projector"])
            self.projections[path] = dict(info, projector=projector)


def lr_at(step, total_steps, warmup_ratio, base_lr):
    """Learning rate with linear warmup followed by a cosine decay to zero.

    Parameters
    ----------
    step : int
        Current step, `0 <= step <= total_steps`.
    total_steps : int
    warmup_ratio : float
        Fraction of the steps used for warmup, in `[0, 1)`; the warmup takes
        `ceil(warmup_ratio * total_steps)` steps.
    base_lr : float
        The peak learning rate.

    Returns
    -------
    float

    Raises
    ------
    ConfigError
        Raised for a ratio outside `[0, 1)` or a step outside the schedule.
    """
    if not 0.0 <= warmup_ratio < 1.0:
        raise ConfigError(f"warmup_ratio must be in [0, 1), got {warmup_ratio}")
    if step < 0 or step > total_steps:
        raise ConfigError(f"Step {step} outside the schedule [0, {total_steps}]")
    warmup = math.ceil(round(warmup_ratio * total_steps, 9))
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerSpec:

    """Everything needed to (re-)create the optimizer of a training run."""

    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    loraplus_ratio: float = 1.0
    galore: GaloreConfig = None
    betas: Tuple[float, float] = field(default=(0.9, 0.999))
    eps: float = 1e-8


def create_optimizer(model, spec, include_frozen=False):
    """Create an `AdamW` or `GaloreAdamW` for a prepared model."""
    groups = build_param_groups(
        model,
        spec.learning_rate,
        loraplus_ratio=spec.loraplus_ratio,
        weight_decay=spec.weight_decay,
        betas=spec.betas,
        eps=spec.eps,
        include_frozen=include_frozen,
    )
    if spec.galore is not None:
        return GaloreAdamW(model, groups, spec.galore)
    return AdamW(model, groups)
