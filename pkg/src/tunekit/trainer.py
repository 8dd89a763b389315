"""Training loops (pre-training / SFT, DPO), sampling with reward filtering,
evaluation and the tuner benchmark."""

# pylint: disable-msg=too-many-instance-attributes,too-many-locals

import csv
import json
import math
import re
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
from loguru import logger as log
from tqdm import tqdm

from .checkpoint import load_checkpoint, load_training_state, save_checkpoint
from .common import format_percent, write_jsonl
from .exceptions import ConfigError, DatasetError, TrainingError
from .model import GenerationParams, ModelConfig, build_model, generate
from .optim import GaloreConfig, OptimizerSpec, create_optimizer, lr_at
from .quant import qlora_wrap
from .template import (
    EncodedSample,
    StandardRecord,
    TemplateSpec,
    encode,
    encode_pretrain,
    encode_prompt,
    with_response,
)
from .tensor import (
    IGNORE_INDEX,
    Tensor,
    add,
    backward,
    grad_check,
    log_sigmoid,
    no_grad,
    precision,
    reshape,
    scale,
    weighted_cross_entropy,
)
from .tuners import (
    PRESET_NAMES,
    TunerConfig,
    clone_model,
    lisa_reselect,
    make_preset,
    prepare_model,
    trainable_summary,
)


DEFAULT_ADAPTER = "default"
BENCH_COLUMNS = (
    "tuner",
    "train_loss",
    "eval_loss",
    "trainable",
    "trainable_pct",
    "state_floats",
    "samples_per_s",
)
BENCH_TUNERS = ("full", "lora", "rslora", "dora", "lora+", "lisa", "llamapro", "galore")


@dataclass
class TrainConfig:

    """Settings of a training run.

    The effective batch size is `batch_size * gradient_accumulation_steps`.
    """

    batch_size: int = 1
    gradient_accumulation_steps: int = 16
    epochs: int = 1
    max_steps: Optional[int] = None
    max_length: int = 2048
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    seed: int = 42
    tuner: TunerConfig = field(default_factory=TunerConfig)
    adapter_name: str = DEFAULT_ADAPTER
    loraplus_ratio: float = 1.0
    galore: Optional[GaloreConfig] = None
    quant_bits: Optional[int] = None
    quant_block_size: int = 64
    loss_scale_enabled: bool = True
    train_history: bool = True
    dpo_beta: float = 0.1
    log_every: int = 10
    save_every: Optional[int] = None
    output_dir: Optional[str] = None
    progress: bool = False

    def validate(self):
        """Check the configuration, raising a `ConfigError` if it's invalid."""
        counts = (
            "batch_size",
            "gradient_accumulation_steps",
            "epochs",
            "max_length",
            "log_every",
        )
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(
                f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}"
            )
        if self.dpo_beta <= 0:
            raise ConfigError(f"dpo_beta must be > 0, got {self.dpo_beta}")
        if self.quant_bits not in (None, 4, 8):
            raise ConfigError(f"quant_bits must be 4 or 8, got {self.quant_bits}")
        self.tuner.validate()
        if self.galore is not None:
            self.galore.validate()
        return self

    @property
    def effective_batch_size(self):
        return self.batch_size * self.gradient_accumulation_steps

    def to_dict(self):
        out = asdict(self)
        out["tuner"] = self.tuner.to_dict()
        return out

    @classmethod
    def from_dict(cls, values):
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        if isinstance(known.get("tuner"), dict):
            known["tuner"] = TunerConfig.from_dict(known["tuner"])
        if isinstance(known.get("galore"), dict):
            known["galore"] = GaloreConfig(**known["galore"])
        return cls(**known).validate()


@dataclass
class RunMetrics:

    """Per-log-step records and final summary of a training run."""

    steps: List[dict] = field(default_factory=list)
    train_loss: Optional[float] = None
    eval_loss: Optional[float] = None
    samples_per_second: Optional[float] = None
    optimizer_state_floats: Optional[int] = None
    param_floats: Optional[int] = None
    grad_floats: Optional[int] = None
    initial_loss: Optional[float] = None
    margins: List[float] = field(default_factory=list)
    final_margin: Optional[float] = None

    def to_dict(self):
        return asdict(self)


class TrainResult(NamedTuple):
    """Outcome of a training run."""

    model: object
    checkpoint: Optional[Path]
    metrics: RunMetrics


def prepare_for_training(model, config):
    """Quantize the base (if requested) and attach the configured tuner.

    Models that already carry adapters are left untouched.
    """
    if model.adapters:
        log.debug(
            "Model already carries adapters {}, not attaching", list(model.adapters)
        )
        return model
    if config.quant_bits is not None:
        if config.tuner.variant != "lora":
            raise ConfigError("Quantized base training needs a lora tuner")
        qlora_wrap(model, config.quant_bits, config.quant_block_size)
    prepare_model(model, {config.adapter_name: config.tuner})
    trainable, total = trainable_summary(model)
    log.info(
        "Trainable parameters: {} of {} ({})",
        trainable,
        total,
        format_percent(trainable, total),
    )
    return model


def _optimizer_for(model, config):
    spec = OptimizerSpec(
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        loraplus_ratio=config.loraplus_ratio,
        galore=config.galore,
    )
    has_lisa = any(s.variant == "lisa" for s in model.adapters.values())
    return create_optimizer(model, spec, include_frozen=has_lisa)


def encode_records(records, template, config, pretrain=False):
    """Encode records for training, in order."""
    if pretrain:
        return [encode_pretrain(r, template, config.max_length) for r in records]
    return [
        encode(
            r,
            template,
            config.max_length,
            config.loss_scale_enabled,
            train_history=config.train_history,
        )
        for r in records
    ]


def collate(samples, pad_id=0):
    """Right-pad samples into `(ids, targets, weights)` arrays.

    Targets and weights are shifted so position `t` predicts token `t + 1`;
    the last position of every row and all padding are ignored.
    """
    length = max(len(s) for s in samples)
    ids = np.full((len(samples), length), pad_id, dtype=np.int64)
    targets = np.full((len(samples), length), IGNORE_INDEX, dtype=np.int64)
    weights = np.zeros((len(samples), length))
    for row, sample in enumerate(samples):
        n = len(sample)
        ids[row, :n] = sample.input_ids
        targets[row, : n - 1] = sample.labels[1:]
        weights[row, : n - 1] = sample.loss_weights[1:]
    weights[targets == IGNORE_INDEX] = 0.0
    return ids, targets, weights


def batch_loss(model, ids, targets, weights, normalizer=None):
    """Weighted next-token cross-entropy of a padded batch (a scalar Tensor)."""
    logits = model(ids)
    batch, length, vocab = logits.shape
    flat = reshape(logits, (batch * length, vocab))
    return weighted_cross_entropy(
        flat, targets.reshape(-1), weights.reshape(-1), normalizer
    )


def _windows(n_samples, config, epoch):
    order = np.random.default_rng([config.seed, epoch]).permutation(n_samples)
    size = config.batch_size
    micro = [order[i : i + size] for i in range(0, n_samples, size)]
    accum = config.gradient_accumulation_steps
    return [micro[i : i + accum] for i in range(0, len(micro), accum)]


def _total_steps(n_samples, config):
    n_micro = math.ceil(n_samples / config.batch_size)
    per_epoch = math.ceil(n_micro / config.gradient_accumulation_steps)
    total = per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    return total


def _lisa_config(model):
    for state in model.adapters.values():
        if state.variant == "lisa":
            return state.config.lisa
    return None


def _write_metrics(output_dir, metrics):
    path = Path(output_dir) / "metrics.jsonl"
    write_jsonl(path, metrics.steps)
    with open(Path(output_dir) / "run_summary.json", "w", encoding="utf-8") as outfile:
        summary = {k: v for k, v in metrics.to_dict().items() if k != "steps"}
        json.dump(summary, outfile, indent=2)


def _save(model, directory, template, config, optimizer, step, base_checkpoint):
    lora_only = bool(model.adapters) and all(
        s.variant == "lora" for s in model.adapters.values()
    )
    return save_checkpoint(
        model,
        directory,
        template=template,
        adapter_only=base_checkpoint is not None and lora_only,
        base_checkpoint=base_checkpoint,
        optimizer=optimizer,
        trainer_state={"global_step": step, "config": config.to_dict()},
    )


def train_sft(
    model,
    dataset,
    config,
    template=None,
    eval_dataset=None,
    resume_from=None,
    base_checkpoint=None,
    pretrain=False,
):  # pylint: disable-msg=too-many-arguments,too-many-branches,too-many-statements
    """Supervised fine-tuning (or pre-training) with weighted cross-entropy.

    Every optimizer step accumulates `gradient_accumulation_steps`
    micro-batches whose losses share one normalizer, the summed weight of the
    whole window, so the step loss is `sum(w * CE) / sum(w)`. The sample
    order is shuffled per epoch with a generator seeded by `(seed, epoch)`.

    Parameters
    ----------
    model : TinyTransformer or None
        The model to train, the configured tuner is attached if it carries no
        adapters yet. Ignored (may be None) when resuming.
    dataset : list(StandardRecord)
    config : TrainConfig
    template : TemplateSpec, optional
    eval_dataset : list(StandardRecord), optional
        Evaluated after training for the final `eval_loss`.
    resume_from : str, optional
        Checkpoint directory written by an earlier run with the same config,
        training continues after its step counter.
    base_checkpoint : str, optional
        Base checkpoint of `model`; if set, LoRA runs save adapter-only
        checkpoints referencing it.
    pretrain : bool, optional
        Encode records as plain text (pre-training), by default False.

    Returns
    -------
    TrainResult

    Raises
    ------
    TrainingError
        Raised if the dataset is empty or contains no trained token.
    """
    config.validate()
    template = template or TemplateSpec()
    if not dataset:
        raise TrainingError("Can't train on an empty dataset")

    start_step = 0
    optimizer_arrays, trainer_state = None, None
    if resume_from is not None:
        model = load_checkpoint(resume_from).model
        optimizer_arrays, trainer_state = load_training_state(resume_from)
        if trainer_state is None:
            raise TrainingError(
                f"[{resume_from}] holds no trainer state to resume from"
            )
        start_step = trainer_state["global_step"]
        log.info("Resuming from [{}] at step {}", resume_from, start_step)
    else:
        prepare_for_training(model, config)

    samples = encode_records(dataset, template, config, pretrain)
    if sum(s.n_trained for s in samples) == 0:
        msg = "The dataset has no trainable tokens"
        log.error(msg)
        raise TrainingError(msg)

    optimizer = _optimizer_for(model, config)
    if optimizer_arrays is not None:
        optimizer.load_state_dict(optimizer_arrays, trainer_state.get("optimizer", {}))

    lisa = _lisa_config(model)
    total = _total_steps(len(samples), config)
    metrics = RunMetrics()
    losses = []
    n_seen = 0
    step = 0
    started = time.perf_counter()
    tokens = 0
    progress = tqdm(
        total=total, initial=start_step, disable=not config.progress, desc="train"
    )
    for epoch in range(config.epochs):
        for window in _windows(len(samples), config, epoch):
            if step >= total:
                break
            step += 1
            if step <= start_step:
                continue
            if lisa is not None:
                lisa_reselect(model, step - 1, lisa)
            batches = [collate([samples[i] for i in micro]) for micro in window]
            normalizer = sum(float(w.sum()) for _, _, w in batches)
            window_loss = 0.0
            for ids, targets, weights in batches:
                loss = batch_loss(model, ids, targets, weights, normalizer)
                window_loss += loss.item()
                backward(loss)
                tokens += int(ids.size)
            factor = lr_at(step - 1, total, config.warmup_ratio, 1.0)
            optimizer.step(step, factor)
            losses.append(window_loss)
            n_seen += sum(len(micro) for micro in window)
            progress.update(1)

            if step % config.log_every == 0 or step == total:
                elapsed = max(time.perf_counter() - started, 1e-9)
                record = {
                    "step": step,
                    "train_loss": window_loss,
                    "lr": config.learning_rate * factor,
                    "tokens_per_second": tokens / elapsed,
                    "trainable_params": trainable_summary(model)[0],
                }
                metrics.steps.append(record)
                log.debug(
                    "Step {}: loss={:.4f} lr={:.3g}", step, window_loss, record["lr"]
                )
            save_due = config.save_every and step % config.save_every == 0
            if config.output_dir and save_due:
                _save(
                    model,
                    Path(config.output_dir) / f"checkpoint-{step}",
                    template,
                    config,
                    optimizer,
                    step,
                    base_checkpoint,
                )
    progress.close()

    elapsed = max(time.perf_counter() - started, 1e-9)
    metrics.train_loss = float(np.mean(losses)) if losses else None
    metrics.samples_per_second = n_seen / elapsed
    metrics.optimizer_state_floats = optimizer.state_floats()
    metrics.param_floats = model.parameter_count()
    metrics.grad_floats = trainable_summary(model)[0]
    if eval_dataset:
        metrics.eval_loss = evaluate(
            model, eval_dataset, config, template, exact_match=False, pretrain=pretrain
        )["eval_loss"]

    checkpoint = None
    if config.output_dir:
        checkpoint = _save(
            model, config.output_dir, template, config, optimizer, step, base_checkpoint
        )
        _write_metrics(config.output_dir, metrics)
    log.info(
        "Trained {} steps: train_loss={} eval_loss={}",
        step,
        metrics.train_loss,
        metrics.eval_loss,
    )
    return TrainResult(model, checkpoint, metrics)


def evaluate(
    model, dataset, config=None, template=None, exact_match=True, pretrain=False
):  # pylint: disable-msg=too-many-arguments
    """Loss, token accuracy and exact match of a model on a dataset.

    Parameters
    ----------
    model : TinyTransformer
    dataset : list(StandardRecord or EncodedSample)
        Pre-encoded samples are used as they are and skipped for exact match.
    config : TrainConfig, optional
        Supplies `max_length` and the loss-scale switch.
    template : TemplateSpec, optional
    exact_match : bool, optional
        Whether to run greedy generation for the exact match rate.
    pretrain : bool, optional

    Returns
    -------
    dict
        `eval_loss` (weighted CE over trained positions), `token_accuracy`
        (argmax hits over trained positions) and `exact_match` (fraction of
        records whose greedy answer equals the reference, None if not run).

    Raises
    ------
    DatasetError
        Raised for an empty dataset.
    """
    if not dataset:
        raise DatasetError("Can't evaluate on an empty dataset")
    config = config or TrainConfig()
    template = template or TemplateSpec()
    records = [item for item in dataset if isinstance(item, StandardRecord)]
    samples = [item for item in dataset if isinstance(item, EncodedSample)]
    samples += encode_records(records, template, config, pretrain)

    weighted = 0.0
    total_weight = 0.0
    hits = 0
    positions = 0
    with no_grad():
        for sample in samples:
            ids, targets, weights = collate([sample])
            logits = model(ids)
            flat = reshape(logits, (ids.size, logits.shape[-1]))
            loss = weighted_cross_entropy(
                flat, targets.reshape(-1), weights.reshape(-1), 1.0
            )
            weighted += loss.item()
            total_weight += float(weights.sum())
            active = targets.reshape(-1) != IGNORE_INDEX
            predicted = np.argmax(flat.data, axis=1)
            hits += int(np.sum(predicted[active] == targets.reshape(-1)[active]))
            positions += int(np.sum(active))

    result = {
        "eval_loss": weighted / total_weight if total_weight else 0.0,
        "token_accuracy": hits / positions if positions else 0.0,
        "exact_match": None,
    }
    if exact_match and records and not pretrain:
        tokenizer = template.tokenizer()
        stop = tokenizer.token_id(template.im_end)
        matches = 0
        for record in records:
            params = GenerationParams(
                max_new_tokens=len(tokenizer.encode(record.response)) + 1,
                temperature=0.0,
                stop_token=stop,
            )
            prompt = encode_prompt(record, template, tokenizer)
            answer = tokenizer.decode(generate(model, prompt, params), errors="replace")
            matches += int(answer == record.response)
        result["exact_match"] = matches / len(records)
    log.debug("Evaluation: {}", result)
    return result


def dpo_loss(policy_logps, ref_logps, beta):
    """Direct preference optimization loss of one pair.

    `loss = -log sigmoid(beta * margin)` with
    `margin = (policy_c - ref_c) - (policy_r - ref_r)`.

    Parameters
    ----------
    policy_logps : (Tensor or float, Tensor or float)
        Summed response log-probabilities of the chosen and rejected answer
        under the trained model.
    ref_logps : (float, float)
        The same under the frozen reference.
    beta : float

    Returns
    -------
    (Tensor or float, float)
        The loss (a Tensor if the policy values are Tensors) and the margin.

    Raises
    ------
    TrainingError
        Raised if the rejected log-probability is missing.
    """
    chosen, rejected = policy_logps
    ref_chosen, ref_rejected = ref_logps
    if rejected is None or ref_rejected is None:
        raise TrainingError("DPO needs a rejected response for every pair")
    ref_margin = float(ref_chosen) - float(ref_rejected)
    if isinstance(chosen, Tensor):
        diff = chosen - rejected
        margin = diff.item() - ref_margin
        offset = Tensor(np.asarray(-ref_margin, dtype=diff.data.dtype))
        logits = scale(add(diff, offset), beta)
        return scale(log_sigmoid(logits), -1.0), margin
    margin = float(chosen) - float(rejected) - ref_margin
    return float(np.logaddexp(0.0, -beta * margin)), margin


def sequence_logp(model, sample):
    """Summed log-probability of a sample's trained tokens (a scalar Tensor)."""
    ids, targets, weights = collate([sample])
    weights = (weights > 0).astype(np.float64)
    return scale(batch_loss(model, ids, targets, weights, normalizer=1.0), -1.0)


def _encode_pair(record, template, config):
    if record.rejected_response is None:
        raise DatasetError(f"Record '{record.query}' has no rejected_response")
    chosen = encode(record, template, config.max_length, False, train_history=False)
    rejected = encode(
        with_response(record, record.rejected_response),
        template,
        config.max_length,
        False,
        train_history=False,
    )
    return chosen, rejected


def train_dpo(model, dataset, config, template=None, reference=None):
    """Preference training against a frozen copy of the starting model.

    Parameters
    ----------
    model : TinyTransformer
        The configured tuner is attached if the model carries no adapters.
    dataset : list(StandardRecord)
        Every record needs a `rejected_response`.
    config : TrainConfig
        Uses `dpo_beta` besides the usual optimization settings.
    template : TemplateSpec, optional
    reference : TinyTransformer, optional
        The frozen reference, by default a copy of `model` taken at the start.

    Returns
    -------
    TrainResult
        Metrics carry the mean margin per epoch, the initial mean loss and the
        final mean margin.
    """
    config.validate()
    template = template or TemplateSpec()
    if not dataset:
        raise TrainingError("Can't train on an empty dataset")
    pairs = [_encode_pair(r, template, config) for r in dataset]
    prepare_for_training(model, config)
    if reference is None:
        reference = clone_model(model)
    with no_grad():
        ref_logps = [
            (sequence_logp(reference, c).item(), sequence_logp(reference, r).item())
            for c, r in pairs
        ]

    optimizer = _optimizer_for(model, config)
    lisa = _lisa_config(model)
    total = _total_steps(len(pairs), config)
    metrics = RunMetrics()
    step = 0
    losses = []
    started = time.perf_counter()
    for epoch in range(config.epochs):
        margins = []
        for window in _windows(len(pairs), config, epoch):
            if step >= total:
                break
            step += 1
            if lisa is not None:
                lisa_reselect(model, step - 1, lisa)
            indices = [int(i) for micro in window for i in micro]
            window_loss = 0.0
            for idx in indices:
                chosen, rejected = pairs[idx]
                policy = (sequence_logp(model, chosen), sequence_logp(model, rejected))
                loss, margin = dpo_loss(policy, ref_logps[idx], config.dpo_beta)
                loss = scale(loss, 1.0 / len(indices))
                window_loss += loss.item()
                margins.append(margin)
                backward(loss)
            if metrics.initial_loss is None:
                metrics.initial_loss = window_loss
            factor = lr_at(step - 1, total, config.warmup_ratio, 1.0)
            optimizer.step(step, factor)
            losses.append(window_loss)
            if step % config.log_every == 0 or step == total:
                metrics.steps.append(
                    {
                        "step": step,
                        "train_loss": window_loss,
                        "lr": config.learning_rate * factor,
                        "mean_margin": float(np.mean(margins)),
                    }
                )
        if margins:
            metrics.margins.append(float(np.mean(margins)))
            log.debug("DPO epoch {}: mean margin {:.4f}", epoch, metrics.margins[-1])

    with no_grad():
        final = []
        for (chosen, rejected), ref in zip(pairs, ref_logps):
            policy = (
                sequence_logp(model, chosen).item(),
                sequence_logp(model, rejected).item(),
            )
            final.append(dpo_loss(policy, ref, config.dpo_beta)[1])
    metrics.final_margin = float(np.mean(final))
    metrics.train_loss = float(np.mean(losses)) if losses else None
    elapsed = max(time.perf_counter() - started, 1e-9)
    metrics.samples_per_second = len(pairs) * config.epochs / elapsed
    metrics.optimizer_state_floats = optimizer.state_floats()
    metrics.param_floats = model.parameter_count()
    metrics.grad_floats = trainable_summary(model)[0]

    checkpoint = None
    if config.output_dir:
        checkpoint = _save(
            model, config.output_dir, template, config, optimizer, step, None
        )
        _write_metrics(config.output_dir, metrics)
    log.info(
        "DPO finished after {} steps, final mean margin {:.4f}",
        step,
        metrics.final_margin,
    )
    return TrainResult(model, checkpoint, metrics)


def candidate_seed(seed, record_index, candidate_index):
    """Seed of one sampled candidate, derived from the run seed."""
    sequence = np.random.SeedSequence([seed, record_index, candidate_index])
    state = sequence.generate_state(1)
    return int(state[0])


def sample_dataset(
    model, dataset, n_return, temperature, seed, template=None, max_new_tokens=64
):  # pylint: disable-msg=too-many-arguments
    """Draw `n_return` sampled responses per record.

    Returns
    -------
    list(dict)
        Candidates `{query, system, history, tools, response_candidate, index,
        seed, record, reference}` ordered by record, then candidate index.

    Raises
    ------
    ConfigError
        Raised for `n_return < 1` or a negative temperature.
    """
    if n_return < 1:
        raise ConfigError(f"n_return must be >= 1, got {n_return}")
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    template = template or TemplateSpec()
    tokenizer = template.tokenizer()
    stop = tokenizer.token_id(template.im_end)
    candidates = []
    for i, record in enumerate(dataset):
        prompt = encode_prompt(record, template, tokenizer)
        for j in range(n_return):
            cand_seed = candidate_seed(seed, i, j)
            params = GenerationParams(
                max_new_tokens=max_new_tokens,
                temperature=temperature,
                seed=cand_seed,
                stop_token=stop,
            )
            text = tokenizer.decode(generate(model, prompt, params), errors="replace")
            candidates.append(
                {
                    "query": record.query,
                    "system": record.system,
                    "history": [list(pair) for pair in record.history],
                    "tools": record.tools,
                    "response_candidate": text,
                    "index": j,
                    "seed": cand_seed,
                    "record": i,
                    "reference": record.response,
                }
            )
    log.info("Sampled {} candidates for {} records", len(candidates), len(dataset))
    return candidates


def exact_match_reward(candidate):
    """1 if the candidate equals the reference answer (whitespace-trimmed)."""
    answer = candidate["response_candidate"].strip()
    return int(answer == candidate["reference"].strip())


_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def extract_answer(text):
    """The last number appearing in a text, or None."""
    numbers = _NUMBER_RE.findall(text or "")
    return numbers[-1] if numbers else None


def math_answer_reward(candidate):
    """1 if the last number of the candidate equals the reference's."""
    answer = extract_answer(candidate["response_candidate"])
    return int(answer is not None and answer == extract_answer(candidate["reference"]))


REWARDS = {"exact_match": exact_match_reward, "math": math_answer_reward}


def rejection_filter(candidates, reward_fn):
    """Keep reward-1 candidates as QA records, one per distinct prompt and response.

    The system, history and tools of the sampled record are carried over so
    the kept record renders the same prompt the candidate was sampled from.
    Candidates without a system entry fall back to the template default.

    Returns
    -------
    list(StandardRecord)
    """
    kept = []
    seen = set()
    for cand in candidates:
        if reward_fn(cand) != 1:
            continue
        history = [list(pair) for pair in cand.get("history") or []]
        key = (
            cand.get("system"),
            tuple(tuple(pair) for pair in history),
            cand["query"],
            cand["response_candidate"],
        )
        if key in seen:
            continue
        seen.add(key)
        kept.append(
            StandardRecord(
                query=cand["query"],
                response=cand["response_candidate"],
                system=cand.get("system"),
                history=history,
                tools=cand.get("tools"),
            )
        )
    if not kept:
        log.warning("Rejection filter kept no candidate out of {}", len(candidates))
    else:
        log.info(
            "Rejection filter kept {} of {} candidates", len(kept), len(candidates)
        )
    return kept


def rft_round(
    model, dataset, config, n_return, temperature, reward_fn, template=None
):  # pylint: disable-msg=too-many-arguments
    """One sample, filter and retrain round of rejection sampling fine-tuning.

    Returns
    -------
    (list(StandardRecord), TrainResult or None)
        The filtered dataset and the retraining result (None if nothing
        survived the filter).
    """
    candidates = sample_dataset(
        model, dataset, n_return, temperature, config.seed, template
    )
    filtered = rejection_filter(candidates, reward_fn)
    if not filtered:
        return filtered, None
    return filtered, train_sft(model, filtered, config, template)


def bench_tuners(
    tuner_names, train_records, eval_records, config, model_config, galore=None
):  # pylint: disable-msg=too-many-arguments
    """Train a fresh model per tuner and compare the runs.

    Parameters
    ----------
    tuner_names : list(str)
        Preset names, see `tunekit.tuners.PRESET_NAMES`.
    train_records, eval_records : list(StandardRecord)
    config : TrainConfig
        Shared settings, the tuner fields are replaced per row.
    model_config : ModelConfig
    galore : GaloreConfig, optional
        Projection settings for the `galore` row.

    Returns
    -------
    list(dict)
        One row per tuner with the `BENCH_COLUMNS` plus the float counts
        and `error` (None unless the tuner failed).
    """
    rows = []
    lora = config.tuner.lora if config.tuner.variant == "lora" else None
    for name in tuner_names:
        log.info("Benchmarking tuner '{}'", name)
        try:
            preset = make_preset(
                name,
                lora_rank=lora.rank if lora else 8,
                lora_alpha=lora.alpha if lora else 32.0,
                new_blocks=max(1, model_config.n_layers // 2),
                seed=config.seed,
            )
            run_config = replace(
                config,
                tuner=preset.tuner,
                loraplus_ratio=preset.loraplus_ratio,
                galore=(galore or GaloreConfig()) if preset.use_galore else None,
                quant_bits=preset.extra.get("quant_bits"),
                output_dir=None,
            )
            model = build_model(model_config)
            result = train_sft(
                model, train_records, run_config, eval_dataset=eval_records
            )
            trainable, total = trainable_summary(result.model)
            metrics = result.metrics
            rows.append(
                {
                    "tuner": name,
                    "train_loss": metrics.train_loss,
                    "eval_loss": metrics.eval_loss,
                    "trainable": trainable,
                    "trainable_pct": format_percent(trainable, total),
                    "state_floats": metrics.optimizer_state_floats,
                    "samples_per_s": metrics.samples_per_second,
                    "param_floats": metrics.param_floats,
                    "grad_floats": metrics.grad_floats,
                    "memory_floats": metrics.param_floats
                    + metrics.grad_floats
                    + metrics.optimizer_state_floats,
                    "error": None,
                }
            )
        except Exception as err:  # pylint: disable-msg=broad-except
            log.error("Tuner '{}' failed: {}", name, err)
            row = {col: None for col in BENCH_COLUMNS}
            row.update(tuner=name, error=str(err))
            rows.append(row)
    return rows


def _cell(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_bench_table(rows):
    """The benchmark rows as an aligned text table."""
    columns = list(BENCH_COLUMNS) + ["memory_floats"]
    cells = []
    for row in rows:
        if row.get("error"):
            cells.append([row["tuner"]] + ["FAILED"] + ["-"] * (len(columns) - 2))
        else:
            cells.append([_cell(row.get(col)) for col in columns])
    widths = [
        max(len(col), *(len(r[i]) for r in cells)) for i, col in enumerate(columns)
    ]
    lines = ["  ".join(col.ljust(w) for col, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def write_bench_csv(rows, path):
    """Write the benchmark rows as CSV with the `BENCH_COLUMNS` header."""
    with open(path, "w", encoding="utf-8", newline="") as outfile:
        writer = csv.writer(outfile)
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow(
                ["" if row.get(col) is None else row.get(col) for col in BENCH_COLUMNS]
            )
    log.debug("Wrote {} benchmark rows to [{}]", len(rows), path)


GRADCHECK_MODEL = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16)


def gradient_check(
    tuner_names=PRESET_NAMES, model_config=None, seq_len=6, seed=0, h=1e-4
):
    """Finite-difference check of the whole model with each tuner attached.

    Runs in high precision on a random weighted batch. LoRA `B` matrices are
    randomized so the adapter paths carry non-zero gradients. Every trainable
    tensor is compared entrywise, embedding and head matrices included.

    Parameters
    ----------
    tuner_names : list(str), optional
        Preset names, by default all of them.
    model_config : ModelConfig, optional
        By default a very small configuration.
    seq_len : int, optional
    seed : int, optional
    h : float, optional
        The finite-difference step.

    Returns
    -------
    dict
        Tuner name to maximum relative error.
    """
    model_config = model_config or GRADCHECK_MODEL
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, model_config.vocab_size, size=(1, seq_len))
    targets = rng.integers(0, model_config.vocab_size, size=(1, seq_len))
    weights = rng.uniform(0.5, 1.5, size=(1, seq_len))
    results = {}
    with precision("high"):
        for name in tuner_names:
            preset = make_preset(
                name, lora_rank=2, lora_alpha=4.0, lisa_layers=1, new_blocks=1
            )
            model = build_model(model_config)
            if preset.extra.get("quant_bits"):
                qlora_wrap(model, preset.extra["quant_bits"], 16)
            prepare_model(model, {DEFAULT_ADAPTER: preset.tuner})
            for state in model.adapters.values():
                for key, param in state.named_parameters():
                    if ".lora_B." in key:
                        param.data = rng.normal(0.0, 0.1, size=param.shape)
            params = [p for _, p in model.named_parameters() if p.requires_grad]

            def loss_fn(m=model):
                return batch_loss(m, ids, targets, weights)

            results[name] = grad_check(loss_fn, params, h=h, atol=1e-9)
            log.info(
                "Gradient check '{}': max relative error {:.3e}", name, results[name]
            )
    return results
