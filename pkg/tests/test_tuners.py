"""Tests for the 'tunekit.tuners' module."""

# pylint: disable-msg=redefined-outer-name

import math

import numpy as np
import pytest

from tunekit import tuners
from tunekit.exceptions import ConfigError, TargetResolutionError, TunerError
from tunekit.model import Parameter, block_index
from tunekit.tensor import Tensor, no_grad
from tunekit.tuners import LisaConfig, LlamaProConfig, LoraConfig, TunerConfig


IDS = np.array([[258, 117, 115, 101, 114, 10, 104, 105]])


def logits_of(model, ids=IDS):
    """Forward pass without recording."""
    with no_grad():
        return model.forward(ids).data


def lora_config(**kwargs):
    """A LoRA tuner config with a small rank."""
    kwargs.setdefault("rank", 4)
    kwargs.setdefault("alpha", 8.0)
    return TunerConfig("lora", lora=LoraConfig(**kwargs))


def randomize_b(model, name, seed=0, std=0.2):
    """Give an adapter's B matrices non-zero values."""
    rng = np.random.default_rng(seed)
    for entry in model.adapters[name].targets.values():
        shape = entry.lora_b.shape
        entry.lora_b.data = rng.normal(0.0, std, size=shape).astype(np.float32)


def test_lora_scaling():
    """Test the standard and rank-stabilized scales."""
    assert tuners.lora_scaling(32.0, 8) == 4.0
    assert tuners.lora_scaling(32.0, 8, "rs") == pytest.approx(32.0 / math.sqrt(8))
    assert tuners.lora_scaling(16.0, 16, "rs") == 4.0


def test_adapter_forward():
    """Test the plain and weight-decomposed outputs of one projection."""
    rng = np.random.default_rng(3)
    weight = rng.normal(size=(3, 4))
    x = rng.normal(size=(2, 4))
    lora_a = rng.normal(size=(2, 4))
    lora_b = rng.normal(size=(3, 2))
    target = tuners.LoraTarget(
        "blocks.0.attn.q_proj", Parameter(lora_a), Parameter(lora_b), 0.5
    )
    with no_grad():
        out = tuners.adapter_forward(Tensor(weight), Tensor(x), target).data
    np.testing.assert_allclose(out, x @ weight.T + 0.5 * (x @ lora_a.T) @ lora_b.T)

    magnitude = np.array([1.0, 2.0, 0.5])
    target.magnitude = Parameter(magnitude)
    with no_grad():
        out = tuners.adapter_forward(Tensor(weight), Tensor(x), target).data
    combined = weight + 0.5 * lora_b @ lora_a
    direction = combined / np.linalg.norm(combined, axis=1, keepdims=True)
    np.testing.assert_allclose(out, (x @ direction.T) * magnitude)
    merged = target.merged_weight(weight)
    np.testing.assert_allclose(merged, direction * magnitude[:, None])


def test_tuner_config_validation():
    """Test the refused tuner configurations."""
    assert TunerConfig("lora").lora == LoraConfig()
    assert TunerConfig("full").lora is None
    with pytest.raises(ConfigError):
        TunerConfig("prefix").validate()
    with pytest.raises(ConfigError):
        TunerConfig("lora", lisa=LisaConfig()).validate()
    with pytest.raises(ConfigError):
        lora_config(rank=0).validate()
    with pytest.raises(ConfigError):
        lora_config(scaling_mode="sqrt").validate()
    with pytest.raises(ConfigError):
        TunerConfig("lisa", lisa=LisaConfig(activated_layers=0)).validate()
    with pytest.raises(ConfigError):
        TunerConfig("llamapro", llamapro=LlamaProConfig(new_blocks=0)).validate()


def test_tuner_config_dict():
    """Test re-creating a configuration from its dict form."""
    config = lora_config(target=["blocks.0.attn.q_proj"], use_dora=True)
    restored = TunerConfig.from_dict(config.to_dict())
    assert restored == config


def test_lora_attach(tiny_model):
    """Test the frozen base and the trainable adapter tensors."""
    before = logits_of(tiny_model)
    tuners.prepare_model(tiny_model, {"default": lora_config()})

    state = tiny_model.adapters["default"]
    assert state.active
    assert len(state.targets) == 12
    assert all(not p.requires_grad for _, p in tiny_model.params.items())

    entry = state.targets["blocks.0.ffn.up_proj"]
    assert entry.lora_a.shape == (4, 16)
    assert entry.lora_b.shape == (32, 4)
    assert entry.scaling == 2.0
    np.testing.assert_array_equal(entry.lora_b.data, np.zeros((32, 4)))
    assert np.all(np.abs(entry.lora_a.data) <= 1.0 / math.sqrt(16))

    # rank * (d_in + d_out) per target, four square attention projections and
    # two feed-forward projections per block:
    trainable, total = tuners.trainable_summary(tiny_model)
    assert trainable == 2 * (4 * 4 * 32 + 2 * 4 * 48)
    assert total == tiny_model.params.total_count() + trainable

    names = [name for name, _ in tiny_model.named_parameters()]
    assert "blocks.1.attn.v_proj.lora_B.default" in names

    # a zero B leaves the model unchanged:
    np.testing.assert_array_equal(logits_of(tiny_model), before)


def test_lora_merge_equivalence(tiny_model):
    """Test that merged weights produce the adapter's outputs, unmerge restores."""
    originals = {p: v.data.copy() for p, v in tiny_model.params.items()}
    tuners.prepare_model(tiny_model, {"default": lora_config()})
    randomize_b(tiny_model, "default")
    adapted = logits_of(tiny_model)
    assert not np.allclose(adapted, logits_of_base(tiny_model))

    tuners.merge(tiny_model, "default")
    assert tiny_model.adapters["default"].merged
    np.testing.assert_allclose(logits_of(tiny_model), adapted, rtol=1e-4, atol=1e-4)

    tuners.unmerge(tiny_model, "default")
    for path, values in originals.items():
        restored = tiny_model.params[path].data
        np.testing.assert_array_equal(restored, values, err_msg=path)
    np.testing.assert_allclose(logits_of(tiny_model), adapted, rtol=1e-5, atol=1e-6)


def logits_of_base(model):
    """Logits with every adapter temporarily deactivated."""
    active = [name for name, state in model.adapters.items() if state.active]
    for name in active:
        tuners.deactivate_adapter(model, name)
    try:
        return logits_of(model)
    finally:
        for name in active:
            model.adapters[name].active = True


def test_unmerge_after_change(tiny_model, caplog):
    """Test that a modified merged weight gets the delta subtracted."""
    tuners.prepare_model(
        tiny_model, {"default": lora_config(target=["blocks.0.attn.q_proj"])}
    )
    randomize_b(tiny_model, "default")
    original = tiny_model.params["blocks.0.attn.q_proj"].data.copy()
    tuners.merge(tiny_model, "default")

    param = tiny_model.params["blocks.0.attn.q_proj"]
    param.data = param.data + np.float32(0.5)
    tuners.unmerge(tiny_model, "default")
    assert "changed since merging" in caplog.text
    np.testing.assert_allclose(param.data, original + 0.5, rtol=1e-5, atol=1e-5)


def test_merge_twice_warns(tiny_model, caplog):
    """Test that merging and unmerging is idempotent with a warning."""
    tuners.prepare_model(tiny_model, {"default": lora_config()})
    tuners.merge(tiny_model, "default")
    tuners.merge(tiny_model, "default")
    assert "already merged" in caplog.text
    tuners.unmerge(tiny_model, "default")
    tuners.unmerge(tiny_model, "default")
    assert "is not merged" in caplog.text


def test_dora(tiny_model):
    """Test the weight-decomposed adapter at init and after merging."""
    before = logits_of(tiny_model)
    tuners.prepare_model(tiny_model, {"default": lora_config(use_dora=True)})
    entry = tiny_model.adapters["default"].targets["blocks.0.attn.q_proj"]
    weight = tiny_model.params["blocks.0.attn.q_proj"].data
    np.testing.assert_allclose(
        entry.magnitude.data, np.linalg.norm(weight, axis=1), rtol=1e-6
    )
    # magnitude times the normalized base weight is the base weight:
    np.testing.assert_allclose(logits_of(tiny_model), before, rtol=1e-4, atol=1e-4)

    randomize_b(tiny_model, "default", seed=1)
    adapted = logits_of(tiny_model)
    tuners.merge(tiny_model, "default")
    np.testing.assert_allclose(logits_of(tiny_model), adapted, rtol=1e-4, atol=1e-4)

    names = [name for name, _ in tiny_model.named_parameters()]
    assert "blocks.0.attn.q_proj.lora_magnitude.default" in names


def test_rslora_scale(tiny_model):
    """Test that the rank-stabilized mode ends up in the targets."""
    tuners.prepare_model(
        tiny_model, {"default": lora_config(rank=4, alpha=8.0, scaling_mode="rs")}
    )
    entry = tiny_model.adapters["default"].targets["blocks.1.ffn.down_proj"]
    assert entry.scaling == pytest.approx(4.0)


def test_multiple_adapters(tiny_model):
    """Test activation, routing and stacking of adapters sharing targets."""
    tuners.prepare_model(tiny_model, {"first": lora_config(seed=1)})
    tuners.prepare_model(tiny_model, {"second": lora_config(seed=2)})
    assert tiny_model.adapters["first"].active
    assert not tiny_model.adapters["second"].active
    randomize_b(tiny_model, "first", seed=1)
    randomize_b(tiny_model, "second", seed=2)

    first = logits_of(tiny_model)
    tuners.activate_adapter(tiny_model, "second")
    assert not tiny_model.adapters["first"].active
    second = logits_of(tiny_model)
    assert not np.allclose(first, second)

    tuners.activate_adapter(tiny_model, "first", stack=True)
    stacked = logits_of(tiny_model)
    assert not np.allclose(stacked, first)
    assert not np.allclose(stacked, second)

    tuners.deactivate_adapter(tiny_model, "first")
    tuners.deactivate_adapter(tiny_model, "second")
    base = logits_of(tiny_model)
    tuners.remove_adapter(tiny_model, "first")
    tuners.remove_adapter(tiny_model, "second")
    np.testing.assert_array_equal(logits_of(tiny_model), base)

    with pytest.raises(TunerError):
        tuners.activate_adapter(tiny_model, "first")


def test_dora_refuses_stacking(tiny_model):
    """Test that a weight-decomposed adapter can't be stacked."""
    tuners.prepare_model(tiny_model, {"plain": lora_config()})
    tuners.prepare_model(tiny_model, {"dora": lora_config(use_dora=True)})
    tuners.activate_adapter(tiny_model, "dora", stack=True)
    with pytest.raises(TunerError):
        logits_of(tiny_model)


def test_prepare_errors(tiny_model):
    """Test the refused adapter combinations."""
    with pytest.raises(TunerError):
        tuners.prepare_model(tiny_model, {})
    with pytest.raises(TunerError):
        tuners.prepare_model(tiny_model, {"base": lora_config()})
    with pytest.raises(TunerError):
        tuners.prepare_model(
            tiny_model, {"full": TunerConfig("full"), "lora": lora_config()}
        )
    with pytest.raises(TargetResolutionError):
        tuners.prepare_model(tiny_model, {"lora": lora_config(target="*.x_proj")})
    with pytest.raises(TunerError):
        tuners.prepare_model(tiny_model, {"lora": lora_config(target="*.gain")})

    tuners.prepare_model(tiny_model, {"default": lora_config()})
    with pytest.raises(TunerError):
        tuners.prepare_model(tiny_model, {"default": lora_config()})


def test_full_tuning(tiny_model):
    """Test that full tuning trains everything and can't be merged."""
    tuners.prepare_model(tiny_model, {"full": TunerConfig("full")})
    trainable, total = tuners.trainable_summary(tiny_model)
    assert trainable == total
    report = tuners.trainable_report(tiny_model)
    assert report[-1]["name"] == "total"
    assert report[-1]["percent"] == "100%"
    tuners.merge(tiny_model, "full")


def test_lisa(make_model):
    """Test block selection, its schedule and the always trainable tensors."""
    model = make_model(n_layers=4)
    lisa = LisaConfig(activated_layers=2, reselect_interval=5)
    config = TunerConfig("lisa", lisa=lisa)
    tuners.prepare_model(model, {"lisa": config})
    state = model.adapters["lisa"]
    assert len(state.selected) == 2
    assert state.selected == sorted(state.selected)

    def trainable_blocks():
        return sorted(
            {
                block_index(p)
                for p, v in model.params.items()
                if v.requires_grad and block_index(p) is not None
            }
        )

    assert trainable_blocks() == state.selected
    for path in tuners.ALWAYS_TRAINABLE:
        assert model.params[path].requires_grad

    # steps between reselections keep the selection:
    assert tuners.lisa_reselect(model, 3) == state.selected
    # reselection is a function of the seed and the step:
    chosen = tuners.lisa_reselect(model, 10)
    assert trainable_blocks() == chosen
    assert tuners.lisa_reselect(model, 10) == chosen

    with pytest.raises(TunerError):
        tuners.merge(model, "lisa")


def test_lisa_errors(tiny_model):
    """Test selecting more blocks than the model has."""
    config = TunerConfig("lisa", lisa=LisaConfig(activated_layers=3))
    with pytest.raises(TunerError):
        tuners.prepare_model(tiny_model, {"lisa": config})
    with pytest.raises(TunerError):
        tuners.lisa_reselect(tiny_model, 0)


def test_llamapro_expand(make_model):
    """Test the insertion positions and the identity initialization."""
    model = make_model(n_layers=4)
    before = logits_of(model)
    config = TunerConfig("llamapro", llamapro=LlamaProConfig(new_blocks=2))
    tuners.prepare_model(model, {"pro": config})

    assert model.n_blocks == 6
    assert model.adapters["pro"].blocks == [2, 5]
    assert len(model.params) == 3 + 8 * 6
    np.testing.assert_allclose(logits_of(model), before, rtol=1e-5, atol=1e-5)

    trainable = {block_index(p) for p, v in model.params.items() if v.requires_grad}
    assert trainable == {2, 5}
    np.testing.assert_array_equal(
        model.params["blocks.2.attn.o_proj"].data, np.zeros((16, 16))
    )
    np.testing.assert_array_equal(
        model.params["blocks.2.attn.q_proj"].data,
        model.params["blocks.1.attn.q_proj"].data,
    )


def test_llamapro_with_lora(make_model):
    """Test LoRA next to block expansion and the overlap check."""
    model = make_model(n_layers=2)
    tuners.prepare_model(
        model,
        {
            "lora": lora_config(target="blocks.0.attn.q_proj"),
            "pro": TunerConfig("llamapro", llamapro=LlamaProConfig(new_blocks=1)),
        },
    )
    assert model.adapters["pro"].blocks == [2]
    assert model.params["blocks.2.ffn.up_proj"].requires_grad
    assert not model.params["blocks.0.ffn.up_proj"].requires_grad

    other = make_model(n_layers=2)
    with pytest.raises(TunerError):
        tuners.prepare_model(
            other,
            {
                "lora": lora_config(target="blocks.2.*_proj"),
                "pro": TunerConfig("llamapro", llamapro=LlamaProConfig(new_blocks=1)),
            },
        )


def test_llamapro_errors(tiny_model):
    """Test the refused expansions."""
    with pytest.raises(TunerError):
        tuners.llamapro_expand(tiny_model, 3)
    with pytest.raises(TunerError):
        tuners.llamapro_expand(tiny_model, 0)
    tuners.prepare_model(tiny_model, {"lora": lora_config()})
    with pytest.raises(TunerError):
        tuners.llamapro_expand(tiny_model, 1)
    with pytest.raises(TunerError):
        tuners.prepare_model(
            tiny_model,
            {
                "lisa": TunerConfig("lisa", lisa=LisaConfig(activated_layers=1)),
                "pro": TunerConfig("llamapro", llamapro=LlamaProConfig(new_blocks=1)),
            },
        )


def test_restore_adapter(make_model):
    """Test re-attaching an adapter from its serialized state."""
    model = make_model()
    tuners.prepare_model(model, {"default": lora_config()})
    randomize_b(model, "default")
    info = model.adapters["default"].to_dict()
    tensors = {n: p.data for n, p in model.adapters["default"].named_parameters()}
    expected = logits_of(model)

    fresh = make_model()
    tuners.restore_adapter(fresh, "default", info)
    tuners.set_adapter_tensors(fresh, "default", tensors)
    np.testing.assert_array_equal(logits_of(fresh), expected)

    with pytest.raises(TunerError):
        tuners.set_adapter_tensors(fresh, "default", {"nothing": np.zeros(1)})
    with pytest.raises(TunerError):
        key = "blocks.0.attn.q_proj.lora_A.default"
        tuners.set_adapter_tensors(fresh, "default", {key: np.zeros((2, 2))})
    with pytest.raises(TunerError):
        tuners.restore_adapter(fresh, "default", info)


def test_trainable_report(tiny_model):
    """Test the per-parameter rows of the trainable report."""
    tuners.prepare_model(
        tiny_model, {"default": lora_config(target=["blocks.0.attn.q_proj"])}
    )
    rows = {row["name"]: row for row in tuners.trainable_report(tiny_model)}
    assert rows["blocks.0.attn.q_proj"]["percent"] == "0.00%"
    assert rows["blocks.0.attn.q_proj.lora_A.default"]["percent"] == "100%"
    assert rows["total"]["trainable_count"] == 2 * 4 * 16


@pytest.mark.parametrize("name", tuners.PRESET_NAMES)
def test_make_preset(name):
    """Test that every preset name yields a valid configuration."""
    preset = tuners.make_preset(name, lora_rank=2, loraplus_ratio=8.0)
    assert preset.name == name
    preset.tuner.validate()
    assert preset.use_galore == (name == "galore")
    assert preset.loraplus_ratio == (8.0 if name == "lora+" else 1.0)
    if name == "qlora":
        assert preset.extra["quant_bits"] == 4
    if name in ("lora", "rslora", "dora", "lora+", "qlora"):
        assert preset.tuner.lora.rank == 2


def test_make_preset_unknown():
    """Test an unknown preset name."""
    with pytest.raises(ConfigError):
        tuners.make_preset("adalora")
