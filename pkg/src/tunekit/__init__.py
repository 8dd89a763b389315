"""The `tunekit` package provides parameter-efficient fine-tuning of tiny
transformers: a tape-based autodiff engine, LoRA-family tuners, GaLore,
chat templates with loss scaling, SFT / DPO / rejection sampling training,
blockwise quantization and an OpenAI-compatible chat service.

.. include:: ../../README.md

.. include:: ../../TESTING.md

.. include:: ../../CHANGELOG.md
"""

__version__ = "0.0.0"

from .model import GenerationParams, ModelConfig, build_model
from .template import StandardRecord, TemplateSpec
from .trainer import TrainConfig, train_dpo, train_sft
from .tuners import TunerConfig, prepare_model
