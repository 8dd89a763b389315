"""Module-wide fixtures for testing tunekit."""

import pytest

from loguru import logger
from _pytest.logging import LogCaptureFixture

from golden_values import values

from tunekit.model import ModelConfig, build_model
from tunekit.tensor import current_tape, set_precision
from tunekit.template import TemplateSpec
from tunekit.toydata import addition_task, copy_task, preference_task


__GOLDEN__ = values()


### pytest setup ###


@pytest.fixture
def caplog(caplog: LogCaptureFixture):
    """Override the built-in caplog fixture to propagate Loguru messages to it.

    Parameters
    ----------
    caplog : LogCaptureFixture

    Yields
    ------
    LogCaptureFixture
    """
    handler_id = logger.add(
        caplog.handler,
        format="{message}",
        level=0,
        filter=lambda record: record["level"].no >= caplog.handler.level,
        enqueue=False,  # Set to 'True' if your test is spawning child processes.
    )
    yield caplog
    logger.remove(handler_id)


def pytest_addoption(parser):
    """Add a command line option '--online' to pytest."""
    parser.addoption(
        "--online",
        action="store_true",
        default=False,
        help="enable online tests binding a real TCP port",
    )


def pytest_collection_modifyitems(config, items):
    """Add the 'skip' marker to tests decorated with 'pytest.mark.online'."""
    if config.getoption("--online"):
        # --online given in cli: do not skip online tests
        return
    skip_online = pytest.mark.skip(reason="need --online option to run")
    for item in items:
        if "online" in item.keywords:
            item.add_marker(skip_online)


@pytest.fixture(autouse=True)
def clean_tape():
    """Start every test with an empty tape in standard precision."""
    current_tape().clear()
    set_precision("standard")
    yield
    current_tape().clear()


### golden values ###


@pytest.fixture(scope="module")
def golden():
    """The expected values loaded from `golden_values/values.yml`."""
    return __GOLDEN__


### model configurations and factories ###


@pytest.fixture(scope="module")
def tiny_config():
    """A small model configuration that keeps tests fast.

    Returns
    -------
    tunekit.model.ModelConfig
    """
    return ModelConfig(**__GOLDEN__["tiny_model"])


@pytest.fixture
def tiny_model(tiny_config):
    """A freshly initialized model built from `tiny_config`."""
    return build_model(tiny_config)


@pytest.fixture
def make_model(tiny_config):
    """Factory creating fresh models, optionally overriding config fields."""

    def factory(**overrides):
        values_ = tiny_config.to_dict()
        values_.update(overrides)
        return build_model(ModelConfig(**values_))

    return factory


@pytest.fixture(scope="module")
def template():
    """The default chat template."""
    return TemplateSpec()


### toy datasets ###


@pytest.fixture(scope="module")
def copy_records():
    """Sixteen byte-copy records."""
    return copy_task(16, seed=0)


@pytest.fixture(scope="module")
def addition_records():
    """Sixteen addition records."""
    return addition_task(16, seed=0)


@pytest.fixture(scope="module")
def preference_records():
    """Eight preference pairs (correct vs wrong sum)."""
    return preference_task(8, seed=0)
