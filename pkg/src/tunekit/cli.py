"""Command line interface: `tunekit <subcommand> [--flag value ...]`.

Exit codes are 0 on success, 1 for invalid arguments or configuration and 2
for any other error. Every run writing to an output directory stores the
resolved arguments in `args.json`, which `--args_file` reads back.
"""

# pylint: disable-msg=too-many-statements,too-many-branches

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

from loguru import logger as log

from .checkpoint import export, load_adapter, load_checkpoint
from .client import ChatClient, evaluate_remote
from .common import setup_logging, split_limit_suffix, str2bool, write_jsonl
from .exceptions import CliValidationError, ConfigError, TunekitError
from .model import GenerationParams, ModelConfig, build_model, generate
from .optim import GaloreConfig
from .serve import DEFAULT_QUEUE_SIZE, parse_adapter_arg, serve
from .template import StandardRecord, TemplateSpec, encode_prompt, parse_jsonl
from .toydata import TASKS
from .trainer import (
    BENCH_TUNERS,
    REWARDS,
    TrainConfig,
    bench_tuners,
    evaluate,
    format_bench_table,
    gradient_check,
    rejection_filter,
    sample_dataset,
    train_dpo,
    train_sft,
    write_bench_csv,
)
from .tuners import PRESET_NAMES, make_preset

SUBCOMMANDS = (
    "pt",
    "sft",
    "rlhf",
    "infer",
    "deploy",
    "export",
    "sample",
    "eval",
    "bench",
    "gradcheck",
)
ARGS_FILE = "args.json"
GRADCHECK_TOLERANCE = 1e-5
_NOT_RECORDED = ("args_file", "verbose", "command")


class ArgumentParser(argparse.ArgumentParser):

    """Parser raising `CliValidationError` instead of exiting on bad input."""

    def error(self, message):
        raise CliValidationError(f"{self.prog}: {message}")


def _add_common(parser):
    parser.add_argument("--args_file", help="args.json of an earlier run")
    parser.add_argument("--seed", type=int, default=42, help="run seed")
    parser.add_argument(
        "--verbose", action="store_true", help="trace logging and tracebacks"
    )


def _add_model(parser, required_ckpt=False):
    if required_ckpt:
        parser.add_argument("--model", default=None, help="checkpoint directory")
    else:
        parser.add_argument(
            "--model", default="tiny", help="'tiny' or a checkpoint directory"
        )


def _add_training(parser):
    parser.add_argument(
        "--dataset", nargs="+", help="JSONL files (path#N) or toy:<task>#N"
    )
    parser.add_argument("--eval_dataset", nargs="+", default=None)
    parser.add_argument("--output_dir", default="output")
    parser.add_argument("--tuner", choices=PRESET_NAMES, default="lora")
    parser.add_argument("--lora_rank", type=int, default=8)
    parser.add_argument("--lora_alpha", type=float, default=32.0)
    parser.add_argument("--target_modules", default="all-linears")
    parser.add_argument("--lisa_activated_layers", type=int, default=2)
    parser.add_argument("--lisa_step_interval", type=int, default=20)
    parser.add_argument("--llamapro_num_new_blocks", type=int, default=4)
    parser.add_argument("--loraplus_lr_ratio", type=float, default=16.0)
    parser.add_argument("--galore_rank", type=int, default=128)
    parser.add_argument("--galore_update_interval", type=int, default=200)
    parser.add_argument("--galore_scale", type=float, default=0.25)
    parser.add_argument("--quant_bits", type=int, choices=(4, 8), default=None)
    parser.add_argument("--batch_size", type=int, default=1)
    parser.add_argument("--gradient_accumulation_steps", type=int, default=16)
    parser.add_argument("--num_train_epochs", type=int, default=1)
    parser.add_argument("--max_steps", type=int, default=None)
    parser.add_argument("--max_length", type=int, default=2048)
    parser.add_argument("--learning_rate", type=float, default=5e-5)
    parser.add_argument("--weight_decay", type=float, default=0.01)
    parser.add_argument("--warmup_ratio", type=float, default=0.03)
    parser.add_argument(
        "--loss_scale", type=str2bool, default=True, help="agent loss weights"
    )
    parser.add_argument("--train_history", type=str2bool, default=True)
    parser.add_argument("--logging_steps", type=int, default=10)
    parser.add_argument("--save_steps", type=int, default=None)
    parser.add_argument("--progress", type=str2bool, default=False)


def _add_generation(parser, temperature=0.0):
    parser.add_argument("--temperature", type=float, default=temperature)
    parser.add_argument("--top_k", type=int, default=0)
    parser.add_argument("--max_new_tokens", type=int, default=64)


def build_parser():
    """The argument parser with one sub-parser per subcommand."""
    parser = ArgumentParser(prog="tunekit", description=__doc__.splitlines()[0])
    subparsers = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    def add(name, text):
        return subparsers.add_parser(
            name, help=text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )

    commands = (("pt", "pre-train on plain text"), ("sft", "supervised fine-tuning"))
    for name, text in commands:
        sub = add(name, text)
        _add_common(sub)
        _add_model(sub)
        _add_training(sub)
        sub.add_argument("--resume_from_checkpoint", default=None)

    sub = add("rlhf", "preference training")
    _add_common(sub)
    _add_model(sub)
    _add_training(sub)
    sub.add_argument("--rlhf_type", choices=("dpo",), default="dpo")
    sub.add_argument("--beta", type=float, default=0.1)

    sub = add("infer", "interactive chat")
    _add_common(sub)
    _add_model(sub, required_ckpt=True)
    _add_generation(sub)
    sub.add_argument("--adapters", nargs="*", default=[], help="name=path entries")
    sub.add_argument("--infer_backend", choices=("native",), default="native")

    sub = add("deploy", "OpenAI-compatible service")
    _add_common(sub)
    _add_model(sub, required_ckpt=True)
    sub.add_argument("--adapters", nargs="*", default=[], help="name=path entries")
    sub.add_argument("--host", default="127.0.0.1")
    sub.add_argument("--port", type=int, default=8000)
    sub.add_argument("--max_queue", type=int, default=DEFAULT_QUEUE_SIZE)
    sub.add_argument("--infer_backend", choices=("native",), default="native")

    sub = add("export", "merge / quantize a checkpoint")
    _add_common(sub)
    sub.add_argument("--ckpt_dir", default=None)
    sub.add_argument(
        "--output_dir", default=None, help="by default <ckpt_dir>-merged / -q<bits>"
    )
    sub.add_argument("--merge_lora", type=str2bool, default=False)
    sub.add_argument("--quant_bits", type=int, choices=(4, 8), default=None)
    sub.add_argument("--quant_block_size", type=int, default=64)

    sub = add("sample", "sample and filter responses")
    _add_common(sub)
    _add_model(sub, required_ckpt=True)
    sub.add_argument("--dataset", nargs="+", default=None)
    sub.add_argument("--output_dir", default="output")
    sub.add_argument("--num_return_sequences", type=int, default=4)
    sub.add_argument("--reward", choices=sorted(REWARDS) + ["none"], default="none")
    _add_generation(sub, temperature=1.0)

    sub = add("eval", "evaluate a checkpoint or a service")
    _add_common(sub)
    _add_model(sub)
    sub.add_argument("--eval_dataset", nargs="+", default=None)
    sub.add_argument("--max_length", type=int, default=2048)
    sub.add_argument("--eval_url", help="base URL of a chat completion service")
    sub.add_argument("--served_model", default="base", help="name used with --eval_url")
    sub.add_argument("--cache", default="", help="response cache for --eval_url")
    sub.add_argument("--max_new_tokens", type=int, default=64)

    sub = add("bench", "compare tuners")
    _add_common(sub)
    _add_training(sub)
    sub.add_argument("--tuners", default=",".join(BENCH_TUNERS))
    sub.set_defaults(
        dataset=["toy:copy#32"], eval_dataset=["toy:copy#8"], output_dir="bench"
    )

    sub = add("gradcheck", "finite-difference gradient check")
    _add_common(sub)
    sub.add_argument("--tuners", default=",".join(PRESET_NAMES))
    sub.add_argument("--step", type=float, default=1e-4)
    return parser, subparsers


def parse_args(argv):
    """Parse a command line, applying `--args_file` values as defaults.

    Explicit flags override values from the file.

    Raises
    ------
    CliValidationError
        Raised for unknown flags, bad values or an unreadable args file.
    """
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise CliValidationError(
            f"missing subcommand, use one of {', '.join(SUBCOMMANDS)}"
        )
    if args.args_file:
        try:
            with open(args.args_file, "r", encoding="utf-8") as infile:
                stored = json.load(infile)
        except (OSError, ValueError) as err:
            raise CliValidationError(
                f"can't read args file [{args.args_file}]: {err}"
            ) from err
        if stored.get("command", args.command) != args.command:
            raise CliValidationError(
                f"args file was written by '{stored['command']}', not '{args.command}'"
            )
        sub = subparsers.choices[args.command]
        # pylint: disable-msg=protected-access
        known = {action.dest for action in sub._actions}
        unknown = sorted(set(stored) - known - {"command"})
        if unknown:
            raise CliValidationError(f"unknown keys in args file: {unknown}")
        sub.set_defaults(**{k: v for k, v in stored.items() if k not in _NOT_RECORDED})
        args = parser.parse_args(argv)
    return args


def record_args(args, directory):
    """Write the resolved arguments to `<directory>/args.json`."""
    os.makedirs(directory, exist_ok=True)
    values = {k: v for k, v in vars(args).items() if k not in ("args_file", "verbose")}
    path = Path(directory) / ARGS_FILE
    with open(path, "w", encoding="utf-8") as outfile:
        json.dump(values, outfile, indent=2, sort_keys=True)
    return path


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, []):
            raise CliValidationError(f"{args.command}: the --{name} flag is required")


def load_dataset(entries, require_query=True):
    """Read records from JSONL paths (`path#N`) or toy task names (`toy:copy#N`)."""
    records = []
    for entry in entries:
        if str(entry).startswith("toy:"):
            name, limit = split_limit_suffix(entry[len("toy:") :])
            if name not in TASKS:
                raise CliValidationError(
                    f"unknown toy task '{name}', use one of {sorted(TASKS)}"
                )
            records.extend(TASKS[name](limit or 64))
        else:
            records.extend(parse_jsonl(entry, require_query))
    return records


def _check_datasets(entries):
    for entry in entries or []:
        if str(entry).startswith("toy:"):
            continue
        plain, _ = split_limit_suffix(entry)
        if not os.path.isfile(plain):
            raise CliValidationError(f"dataset file [{plain}] not found")


def _check_model(value, allow_tiny=True):
    if allow_tiny and value == "tiny":
        return
    if value is None or not os.path.isdir(value):
        raise CliValidationError(f"model checkpoint directory [{value}] not found")


def train_config(args):
    """Build and validate the `TrainConfig` of a training subcommand."""
    preset = make_preset(
        args.tuner,
        lora_rank=args.lora_rank,
        lora_alpha=args.lora_alpha,
        target=args.target_modules,
        lisa_layers=args.lisa_activated_layers,
        lisa_interval=args.lisa_step_interval,
        new_blocks=args.llamapro_num_new_blocks,
        loraplus_ratio=args.loraplus_lr_ratio,
        seed=args.seed,
    )
    galore = None
    if preset.use_galore:
        galore = GaloreConfig(
            rank=args.galore_rank,
            update_interval=args.galore_update_interval,
            scale=args.galore_scale,
            seed=args.seed,
        )
    quant_bits = args.quant_bits
    if quant_bits is None:
        quant_bits = preset.extra.get("quant_bits")
    config = TrainConfig(
        batch_size=args.batch_size,
        gradient_accumulation_steps=args.gradient_accumulation_steps,
        epochs=args.num_train_epochs,
        max_steps=args.max_steps,
        max_length=args.max_length,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        warmup_ratio=args.warmup_ratio,
        seed=args.seed,
        tuner=preset.tuner,
        loraplus_ratio=preset.loraplus_ratio,
        galore=galore,
        quant_bits=quant_bits,
        loss_scale_enabled=args.loss_scale,
        train_history=args.train_history,
        dpo_beta=getattr(args, "beta", 0.1),
        log_every=args.logging_steps,
        save_every=args.save_steps,
        output_dir=args.output_dir,
        progress=args.progress,
    )
    return config.validate()


def load_model(value, seed=0):
    """A fresh tiny model or a loaded checkpoint, with its template."""
    if value == "tiny":
        return build_model(ModelConfig(seed=seed)), TemplateSpec(), None
    ckpt = load_checkpoint(value)
    return ckpt.model, ckpt.template, str(value)


def _fit_context(config, model):
    if config.max_length > model.config.max_seq_len:
        log.debug(
            "Limiting max_length to the model context of {}", model.config.max_seq_len
        )
        config.max_length = model.config.max_seq_len


def _run_training(args, out):
    _require(args, "dataset")
    _check_datasets(args.dataset)
    _check_datasets(args.eval_dataset)
    resume = getattr(args, "resume_from_checkpoint", None)
    if resume is None:
        _check_model(args.model)
    elif not os.path.isdir(resume):
        raise CliValidationError(f"checkpoint [{resume}] not found")
    config = train_config(args)
    pretrain = args.command == "pt"
    record_args(args, args.output_dir)

    dataset = load_dataset(args.dataset, require_query=not pretrain)
    eval_dataset = None
    if args.eval_dataset:
        eval_dataset = load_dataset(args.eval_dataset, require_query=not pretrain)
    if args.command == "rlhf":
        model, template, _ = load_model(args.model, args.seed)
        _fit_context(config, model)
        result = train_dpo(model, dataset, config, template)
        summary = {
            "checkpoint": str(result.checkpoint),
            "initial_loss": result.metrics.initial_loss,
            "final_margin": result.metrics.final_margin,
        }
    else:
        if resume:
            model, template, base = None, load_checkpoint(resume).template, None
        else:
            model, template, base = load_model(args.model, args.seed)
            _fit_context(config, model)
        result = train_sft(
            model,
            dataset,
            config,
            template,
            eval_dataset=eval_dataset,
            resume_from=resume,
            base_checkpoint=base,
            pretrain=pretrain,
        )
        summary = {
            "checkpoint": str(result.checkpoint),
            "train_loss": result.metrics.train_loss,
            "eval_loss": result.metrics.eval_loss,
        }
    print(json.dumps(summary), file=out)


def infer_repl(model, template, params, stdin=None, stdout=None, prompt=None):
    """Chat with a model line by line.

    Every input line is a user message, the conversation history is kept
    until `:clear`, `:exit` (or the end of the input) stops the loop.
    Generation errors are reported on one line and the loop goes on.

    Parameters
    ----------
    model : TinyTransformer
    template : TemplateSpec
    params : GenerationParams
        The stop token is set to the template's end-of-turn marker.
    stdin, stdout : file, optional
        By default the process' standard streams.
    prompt : str, optional
        Input prompt, by default `>>> ` on terminals and none otherwise.

    Returns
    -------
    int
        The number of replies produced.
    """
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    if prompt is None:
        prompt = ">>> " if stdin.isatty() else ""
    tokenizer = template.tokenizer()
    params.stop_token = tokenizer.token_id(template.im_end)
    history = []
    replies = 0
    while True:
        stdout.write(prompt)
        stdout.flush()
        line = stdin.readline()
        if not line:
            break
        text = line.rstrip("\n")
        if text.strip() == ":exit":
            break
        if text.strip() == ":clear":
            history = []
            log.debug("Cleared the conversation history")
            continue
        try:
            record = StandardRecord(query=text, history=[list(h) for h in history])
            ids = generate(model, encode_prompt(record, template, tokenizer), params)
            reply = tokenizer.decode(ids, errors="replace")
        except TunekitError as err:
            stdout.write(f"error: {err}\n")
            continue
        history.append((text, reply))
        stdout.write(reply + "\n")
        stdout.flush()
        replies += 1
    return replies


def _attach_adapters(model, entries):
    for entry in entries:
        name, path = parse_adapter_arg(entry)
        load_adapter(model, path, name)


def _run_infer(args, stdin=None, out=None):
    _check_model(args.model, allow_tiny=False)
    params = GenerationParams(
        max_new_tokens=args.max_new_tokens,
        temperature=args.temperature,
        top_k=args.top_k,
        seed=args.seed,
    ).validate()
    model, template, _ = load_model(args.model)
    _attach_adapters(model, args.adapters)
    infer_repl(model, template, params, stdin, out)


def _run_export(args, out):
    _require(args, "ckpt_dir")
    _check_model(args.ckpt_dir, allow_tiny=False)
    if not args.merge_lora and args.quant_bits is None:
        log.info("Neither merging nor quantization requested, copying the checkpoint")
    output_dir = args.output_dir
    if output_dir is None:
        suffix = "-merged" if args.merge_lora else ""
        if args.quant_bits is not None:
            suffix += f"-q{args.quant_bits}"
        output_dir = str(args.ckpt_dir).rstrip("/") + (suffix or "-export")
    quant = None
    if args.quant_bits is not None:
        quant = {"bits": args.quant_bits, "block_size": args.quant_block_size}
    report = export(args.ckpt_dir, output_dir, merge_lora=args.merge_lora, quant=quant)
    args.output_dir = output_dir
    record_args(args, output_dir)
    print(json.dumps(report), file=out)


def _run_sample(args, out):
    _require(args, "dataset")
    _check_model(args.model, allow_tiny=False)
    _check_datasets(args.dataset)
    if args.num_return_sequences < 1:
        raise CliValidationError("--num_return_sequences must be >= 1")
    if args.temperature < 0:
        raise CliValidationError("--temperature must be >= 0")
    record_args(args, args.output_dir)
    model, template, _ = load_model(args.model)
    dataset = load_dataset(args.dataset)
    candidates = sample_dataset(
        model,
        dataset,
        args.num_return_sequences,
        args.temperature,
        args.seed,
        template,
        args.max_new_tokens,
    )
    write_jsonl(Path(args.output_dir) / "candidates.jsonl", candidates)
    summary = {"candidates": len(candidates)}
    if args.reward != "none":
        kept = rejection_filter(candidates, REWARDS[args.reward])
        filtered = Path(args.output_dir) / "filtered.jsonl"
        write_jsonl(filtered, (r.to_dict() for r in kept))
        summary["kept"] = len(kept)
    print(json.dumps(summary), file=out)


def _run_eval(args, out):
    _require(args, "eval_dataset")
    _check_datasets(args.eval_dataset)
    dataset = load_dataset(args.eval_dataset)
    if args.eval_url:
        client = ChatClient(args.eval_url, model=args.served_model, cache=args.cache)
        result = evaluate_remote(client, dataset, args.max_new_tokens)
    else:
        _check_model(args.model)
        model, template, _ = load_model(args.model, args.seed)
        config = TrainConfig(max_length=args.max_length)
        result = evaluate(model, dataset, config, template)
    print(json.dumps(result), file=out)


def _run_bench(args, out):
    _check_datasets(args.dataset)
    _check_datasets(args.eval_dataset)
    names = [n.strip() for n in args.tuners.split(",") if n.strip()]
    unknown = [n for n in names if n not in PRESET_NAMES]
    if unknown or not names:
        raise CliValidationError(
            f"unknown tuners {unknown}, use names from {PRESET_NAMES}"
        )
    config = train_config(args)
    galore = GaloreConfig(
        rank=args.galore_rank,
        update_interval=args.galore_update_interval,
        scale=args.galore_scale,
        seed=args.seed,
    ).validate()
    model_config = ModelConfig(seed=args.seed)
    config.max_length = min(config.max_length, model_config.max_seq_len)
    record_args(args, args.output_dir)
    rows = bench_tuners(
        names,
        load_dataset(args.dataset),
        load_dataset(args.eval_dataset),
        config,
        model_config,
        galore,
    )
    write_bench_csv(rows, Path(args.output_dir) / "bench.csv")
    print(format_bench_table(rows), file=out)


def _run_gradcheck(args, out):
    names = [n.strip() for n in args.tuners.split(",") if n.strip()]
    unknown = [n for n in names if n not in PRESET_NAMES]
    if unknown or not names:
        raise CliValidationError(
            f"unknown tuners {unknown}, use names from {PRESET_NAMES}"
        )
    errors = gradient_check(names, seed=args.seed, h=args.step)
    failed = []
    for name, error in errors.items():
        status = "ok" if error < GRADCHECK_TOLERANCE else "FAILED"
        print(f"{name:<10} {error:.3e}  {status}", file=out)
        if error >= GRADCHECK_TOLERANCE:
            failed.append(name)
    if failed:
        raise TunekitError(f"gradient check failed for {failed}")


def dispatch(args, stdin=None, out=None):
    """Run the operation belonging to parsed arguments."""
    out = out or sys.stdout
    if args.command in ("pt", "sft", "rlhf"):
        _run_training(args, out)
    elif args.command == "infer":
        _run_infer(args, stdin, out)
    elif args.command == "deploy":
        _check_model(args.model, allow_tiny=False)
        if args.max_queue < 1:
            raise CliValidationError("--max_queue must be >= 1")
        serve(args.model, args.adapters, args.host, args.port, args.max_queue)
    elif args.command == "export":
        _run_export(args, out)
    elif args.command == "sample":
        _run_sample(args, out)
    elif args.command == "eval":
        _run_eval(args, out)
    elif args.command == "bench":
        _run_bench(args, out)
    elif args.command == "gradcheck":
        _run_gradcheck(args, out)


def run(argv, stdin=None, out=None, err=None):
    """Parse and execute a command line, returning the exit code.

    Parameters
    ----------
    argv : list(str)
        Arguments without the program name.
    stdin, out, err : file, optional
        Streams used instead of the process' standard streams.

    Returns
    -------
    int
        0 on success, 1 for validation errors, 2 for runtime errors.
    """
    err = err or sys.stderr
    verbose = "--verbose" in argv
    try:
        args = parse_args(argv)
        dispatch(args, stdin, out)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CliValidationError, ConfigError) as exc:
        print(f"tunekit: error: {exc}", file=err)
        if verbose:
            traceback.print_exc(file=err)
        return 1
    except Exception as exc:  # pylint: disable-msg=broad-except
        print(f"tunekit: error: {type(exc).__name__}: {exc}", file=err)
        if verbose:
            traceback.print_exc(file=err)
        return 2
    return 0


def main():
    """Console entry point."""
    argv = sys.argv[1:]
    setup_logging(verbose="--verbose" in argv)
    sys.exit(run(argv))
