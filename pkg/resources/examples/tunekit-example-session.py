#!/usr/bin/env python

"""Example code on how to use the 'tunekit' package."""

# pylint: disable-msg=multiple-imports
# pylint: disable-msg=wrong-import-order

import tunekit, tunekitconf
from tunekit.checkpoint import save_checkpoint
from tunekit.client import ChatClient
from tunekit.quant import quantize_model, weight_bytes
from tunekit.toydata import addition_task, preference_task
from tunekit.tuners import LoraConfig, merge, trainable_report


model = tunekit.build_model(tunekit.ModelConfig())

# train a LoRA adapter on the addition task:
config = tunekit.TrainConfig(
    tuner=tunekit.TunerConfig("lora", lora=LoraConfig(rank=4, alpha=8.0)),
    batch_size=4,
    gradient_accumulation_steps=2,
    learning_rate=5e-3,
    epochs=3,
    output_dir="addition-lora",
)
result = tunekit.train_sft(model, addition_task(64), config)
print(result.metrics.train_loss)

# show the trainable parameters:
for row in trainable_report(model):
    print(f"{row['name']:40} {row['trainable_count']:8} {row['percent']}")


# continue with preference training against a frozen copy of the model:
dpo_config = tunekit.TrainConfig(
    batch_size=2,
    gradient_accumulation_steps=1,
    learning_rate=1e-3,
    epochs=2,
    dpo_beta=0.1,
)
dpo = tunekit.train_dpo(model, preference_task(16), dpo_config)
print(dpo.metrics.initial_loss, dpo.metrics.final_margin)


# merge the adapter into the base weights and save a full checkpoint:
merge(model, "default")
save_checkpoint(model, "addition-merged")

# quantize the merged weights to 4 bits:
before = weight_bytes(model)
quantize_model(model, bits=4)
print(f"{before} bytes -> {weight_bytes(model)} bytes")


# talk to a running service (`tunekit deploy --model addition-merged`):
client = ChatClient(
    tunekitconf.SERVE_URL,
    model=tunekitconf.MODEL,
    timeout=tunekitconf.TIMEOUT,
    cache=tunekitconf.CACHE_PATH,
)
print(client.list_models())
print(client.complete([{"role": "user", "content": "Calculate 12+30"}]))
