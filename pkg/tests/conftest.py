import os

import numpy as np
import pytest

from config import ModelConfig, OptimizerConfig, TrainConfig
from core.corpus import StyleSpec, synth_corpus
from core.models import new_comparator, new_discriminator, new_generator, new_language_model


def pytest_collection_modifyitems(config, items):
    if os.getenv("STYF_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="end-to-end run; set STYF_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY_SPECS = [
    StyleSpec(name="upper", alphabet="ABCDEFGHIJ", weights=[1] * 10, min_len=60, max_len=120,
              line_len=30, template="prose"),
    StyleSpec(name="digits", alphabet="0123456789", weights=[1] * 10, min_len=60, max_len=120,
              line_len=20, template="report"),
    StyleSpec(name="lower", alphabet="klmnopqrst", weights=[1] * 10, min_len=60, max_len=120,
              line_len=16, template="lyrics"),
]


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(hidden_dim=16, n_heads=2, n_layers=1, max_len=24, vocab_size=260, disc_layers=1)


@pytest.fixture
def tiny_specs():
    return list(TINY_SPECS)


@pytest.fixture
def tiny_corpus():
    return synth_corpus(TINY_SPECS, docs_per_style=6, seed=0)


def make_train_config(model: ModelConfig, phase: str = "train-generator", **overrides) -> TrainConfig:
    base = dict(phase=phase, model=model, optimizer=OptimizerConfig(lr=1e-3), batch_size=2, steps=2,
                window=24, n_ctx=8, n_gen=8, eval_interval=1, eval_items=20, patience=3, chance_evals=10, seed=3)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def train_config(tiny_config):
    return make_train_config(tiny_config)


@pytest.fixture
def make_config(tiny_config):
    def _make(phase: str = "train-generator", **overrides) -> TrainConfig:
        return make_train_config(tiny_config, phase, **overrides)
    return _make


@pytest.fixture
def lm(tiny_config):
    return new_language_model(tiny_config, seed=1)


@pytest.fixture
def comparator(tiny_config):
    return new_comparator(tiny_config, seed=2)


@pytest.fixture
def discriminator(tiny_config):
    return new_discriminator(tiny_config, seed=4)


@pytest.fixture
def make_bundle(tiny_config):
    def _make(variant: str = "D", seed: int = 5):
        return new_generator(tiny_config, variant, seed)
    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(0)
