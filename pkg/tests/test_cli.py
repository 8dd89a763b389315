"""Tests for the 'tunekit.cli' module."""

# pylint: disable-msg=redefined-outer-name

import csv
import io
import json
import math
import os

import numpy as np
import pytest
import tunekitconf

from tunekit import cli
from tunekit.checkpoint import save_checkpoint
from tunekit.common import write_jsonl
from tunekit.exceptions import CliValidationError
from tunekit.model import GenerationParams, generate
from tunekit.template import StandardRecord, TemplateSpec, encode_prompt
from tunekit.tuners import LoraConfig, TunerConfig, prepare_model

TRAIN_FLAGS = [
    "--max_steps",
    "2",
    "--batch_size",
    "4",
    "--gradient_accumulation_steps",
    "1",
    "--lora_rank",
    "2",
    "--max_length",
    "128",
]


def run(*argv, stdin=None):
    """Run a command line, returning the exit code and both output streams."""
    out = io.StringIO()
    err = io.StringIO()
    code = cli.run([str(a) for a in argv], stdin=stdin, out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Run every command from inside a temporary directory."""
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def checkpoint(workdir, tiny_model):
    """A saved tiny model carrying a LoRA adapter."""
    config = TunerConfig("lora", lora=LoraConfig(rank=2, alpha=4.0))
    prepare_model(tiny_model, {"default": config})
    rng = np.random.default_rng(0)
    for entry in tiny_model.adapters["default"].targets.values():
        entry.lora_b.data = rng.normal(0.0, 0.2, size=entry.lora_b.shape).astype(
            np.float32
        )
    return save_checkpoint(tiny_model, workdir / "ckpt")


### argument handling ###


def test_validation_errors(workdir):
    """Test that refused command lines exit with 1 and write nothing."""
    cases = [
        [],
        ["frobnicate"],
        ["sft", "--nonsense", "1"],
        ["sft", "--tuner", "adalora", "--dataset", "toy:copy#4"],
        ["sft"],
        ["sft", "--dataset", "missing.jsonl"],
        ["sft", "--dataset", "toy:copy#4", "--model", "missing_dir"],
        ["infer", "--model", "missing_dir"],
        ["export"],
        ["gradcheck", "--tuners", "lora,adalora"],
        ["bench", "--tuners", "nonsense"],
        ["sample", "--model", "missing_dir", "--dataset", "toy:copy#2"],
    ]
    for argv in cases:
        code, _, err = run(*argv)
        assert code == 1, argv
        assert err.startswith("tunekit: error:")
    assert os.listdir(workdir) == []


def test_config_errors(workdir):
    """Test that invalid settings are reported as validation errors."""
    code, _, err = run("sft", "--dataset", "toy:copy#4", "--batch_size", "0")
    assert code == 1
    assert "batch_size" in err


def test_runtime_error(workdir):
    """Test that failures after validation exit with 2."""
    (workdir / "empty").mkdir()
    code, _, err = run("eval", "--eval_dataset", "toy:copy#2", "--model", "empty")
    assert code == 2
    assert "CheckpointError" in err


def test_help():
    """Test that asking for help is not an error."""
    code, _, _ = run("--help")
    assert code == 0


def test_load_dataset(workdir):
    """Test reading toy tasks and files with a record limit."""
    assert len(cli.load_dataset(["toy:copy#3", "toy:addition#2"])) == 5
    write_jsonl(workdir / "data.jsonl", [{"query": "q", "response": "r"}] * 4)
    assert len(cli.load_dataset(["data.jsonl#3"])) == 3
    with pytest.raises(CliValidationError):
        cli.load_dataset(["toy:poems#3"])


### training ###


def test_sft_and_args_file(workdir):
    """Test a short run and repeating it from its recorded arguments."""
    code, out, err = run(
        "sft", "--dataset", "toy:copy#8", "--output_dir", "first", *TRAIN_FLAGS
    )
    assert code == 0, err
    summary = json.loads(out)
    assert summary["checkpoint"] == "first"
    assert summary["train_loss"] > 0.0
    assert (workdir / "first" / "weights.bin").is_file()
    stored = json.loads((workdir / "first" / "args.json").read_text("utf-8"))
    assert stored["command"] == "sft"
    assert stored["tuner"] == "lora"
    assert stored["max_steps"] == 2

    code, out, err = run(
        "sft", "--args_file", "first/args.json", "--output_dir", "second"
    )
    assert code == 0, err
    again = json.loads((workdir / "second" / "args.json").read_text("utf-8"))
    assert again == dict(stored, output_dir="second")
    assert json.loads(out)["train_loss"] == pytest.approx(summary["train_loss"])

    code, _, err = run("rlhf", "--args_file", "first/args.json")
    assert code == 1
    assert "written by 'sft'" in err


def test_pretrain(workdir):
    """Test pre-training on plain text records."""
    texts = [{"response": "the quick brown fox jumps"}] * 4
    write_jsonl(workdir / "text.jsonl", texts)
    code, out, err = run(
        "pt",
        "--dataset",
        "text.jsonl",
        "--output_dir",
        "pt",
        "--tuner",
        "full",
        *TRAIN_FLAGS,
    )
    assert code == 0, err
    assert json.loads(out)["train_loss"] > 0.0


def test_rlhf(workdir):
    """Test a single preference training step."""
    code, out, err = run(
        "rlhf", "--dataset", "toy:preference#4", "--output_dir", "dpo", *TRAIN_FLAGS
    )
    assert code == 0, err
    summary = json.loads(out)
    assert summary["initial_loss"] == pytest.approx(math.log(2.0), abs=1e-5)


def test_bench(workdir):
    """Test the benchmark table and CSV file."""
    code, out, err = run(
        "bench",
        "--tuners",
        "lora,full",
        "--dataset",
        "toy:copy#4",
        "--eval_dataset",
        "toy:copy#2",
        *TRAIN_FLAGS,
    )
    assert code == 0, err
    lines = out.splitlines()
    assert lines[0].startswith("tuner")
    assert lines[2].startswith("lora")
    assert lines[3].startswith("full")
    with open(workdir / "bench" / "bench.csv", encoding="utf-8", newline="") as infile:
        rows = {row["tuner"]: row for row in csv.DictReader(infile)}
    assert int(rows["lora"]["trainable"]) < int(rows["full"]["trainable"])
    assert int(rows["lora"]["state_floats"]) < int(rows["full"]["state_floats"])


def test_gradcheck(workdir):
    """Test the gradient check report of a single tuner."""
    code, out, _ = run("gradcheck", "--tuners", "lora")
    name, error, status = out.split()
    assert name == "lora"
    assert float(error) >= 0.0
    assert code == (0 if status == "ok" else 2)


### inference, export, sampling and evaluation ###


def test_infer_repl(tiny_model):
    """Test the chat loop with history clearing and error reporting."""
    template = TemplateSpec()
    params = GenerationParams(max_new_tokens=4)
    stdin = io.StringIO("hi\n:clear\nhello\n" + "x" * 200 + "\n:exit\nignored\n")
    stdout = io.StringIO()
    replies = cli.infer_repl(tiny_model, template, params, stdin, stdout)
    assert replies == 2

    tokenizer = template.tokenizer()

    def reply(query):
        record = StandardRecord(query=query)
        ids = generate(tiny_model, encode_prompt(record, template, tokenizer), params)
        return tokenizer.decode(ids, errors="replace")

    first = reply("hi")
    # the history was cleared before the second message:
    second = reply("hello")
    expected = f"{first}\n{second}\nerror: "
    assert stdout.getvalue().startswith(expected)


def test_infer_command(checkpoint):
    """Test the infer subcommand reading from a stream."""
    code, out, err = run(
        "infer",
        "--model",
        checkpoint,
        "--max_new_tokens",
        "3",
        stdin=io.StringIO("hi\n"),
    )
    assert code == 0, err
    assert out.endswith("\n")


def test_export_merge(workdir, checkpoint):
    """Test merging the adapter of a checkpoint into a new directory."""
    code, out, err = run("export", "--ckpt_dir", checkpoint, "--merge_lora", "true")
    assert code == 0, err
    report = json.loads(out)
    assert report["merged"] == ["default"]
    assert (workdir / "ckpt-merged" / "args.json").is_file()

    code, out, err = run(
        "export", "--ckpt_dir", checkpoint, "--quant_bits", "8", "--output_dir", "q8"
    )
    assert code == 0, err
    assert json.loads(out)["bytes_after"] < json.loads(out)["bytes_before"]


def test_sample(workdir, checkpoint):
    """Test sampling candidates and filtering them."""
    code, out, err = run(
        "sample",
        "--model",
        checkpoint,
        "--dataset",
        "toy:addition#2",
        "--num_return_sequences",
        "2",
        "--max_new_tokens",
        "6",
        "--reward",
        "math",
    )
    assert code == 0, err
    summary = json.loads(out)
    assert summary["candidates"] == 4
    assert 0 <= summary["kept"] <= 4
    lines = (workdir / "output" / "candidates.jsonl").read_text("utf-8").splitlines()
    assert len(lines) == 4
    assert (workdir / "output" / "filtered.jsonl").is_file()


def test_eval_local(workdir, checkpoint):
    """Test evaluating a checkpoint on a toy dataset."""
    code, out, err = run(
        "eval", "--model", checkpoint, "--eval_dataset", "toy:copy#2"
    )
    assert code == 0, err
    result = json.loads(out)
    assert result["eval_loss"] > 0.0
    assert 0.0 <= result["exact_match"] <= 1.0


def test_eval_remote_cached(workdir):
    """Test evaluating a service through the cached responses."""
    write_jsonl(
        workdir / "eval.jsonl",
        [
            {"query": "Calculate 12+30", "response": "The answer is 42."},
            {"query": "Calculate 20+13", "response": "The answer is 33."},
        ],
    )
    code, out, err = run(
        "eval",
        "--eval_dataset",
        "eval.jsonl",
        "--eval_url",
        tunekitconf.SERVE_URL,
        "--cache",
        tunekitconf.CACHE_PATH,
        "--max_new_tokens",
        "16",
    )
    assert code == 0, err
    assert json.loads(out) == {"exact_match": 0.5, "n": 2}
