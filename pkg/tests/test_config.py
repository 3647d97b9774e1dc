import pytest
from pydantic import ValidationError

import config
from config import (
    DESK_CONFIG_PATH, HPARAM_GRID_PATH, FULL_SCALE_CONFIG_PATH, LossWeights, ModelConfig, TrainConfig,
    build_train_config, load_hparam_grid, load_train_config,
)

RAW = {
    "model": {"hidden_dim": 16, "n_heads": 2, "n_layers": 1, "max_len": 32},
    "optimizer": {"lr": 0.01, "schedule": "cosine"},
    "train": {"batch_size": 4, "window": 32, "n_ctx": 8, "n_gen": 8, "seed": 5},
    "phases": {
        "pretrain-lm": {"steps": 10, "batch_size": 6, "optimizer": {"lr": 0.003}},
        "train-generator": {"steps": 20},
    },
}


def test_phase_tables_override_shared_values():
    cfg = build_train_config(RAW, "pretrain-lm")
    assert cfg.phase == "pretrain-lm"
    assert cfg.batch_size == 6 and cfg.steps == 10
    assert cfg.optimizer.lr == 0.003
    assert cfg.optimizer.schedule == "cosine"
    assert cfg.seed == 5

    gen = build_train_config(RAW, "train-generator")
    assert gen.batch_size == 4 and gen.optimizer.lr == 0.01 and gen.steps == 20


def test_variant_b_defaults_to_the_stronger_gan_weight():
    assert build_train_config(RAW, "train-generator", variant="B").loss == LossWeights(dist=1.0, style=0.01, gan=0.1)
    assert build_train_config(RAW, "train-generator", variant="D").loss == LossWeights()
    explicit = {**RAW, "loss": {"dist": 0.1, "style": 0.1, "gan": 0.1}}
    assert build_train_config(explicit, "train-generator", variant="B").loss.gan == 0.1
    assert build_train_config(explicit, "train-generator", variant="B").loss.dist == 0.1


def test_with_variant_resets_model_and_loss(train_config):
    b = train_config.with_variant("B")
    assert b.model.variant == "B"
    assert b.loss.gan == 0.1
    assert train_config.model.variant == "none"


def test_seed_override_from_environment(monkeypatch):
    monkeypatch.setattr(config, "SEED_OVERRIDE", "7")
    assert build_train_config(RAW, "pretrain-lm").seed == 7


def test_desk_config_loads_every_phase():
    lm = load_train_config(DESK_CONFIG_PATH, "pretrain-lm")
    comp = load_train_config(DESK_CONFIG_PATH, "pretrain-comparator")
    gen = load_train_config(DESK_CONFIG_PATH, "train-generator", variant="D")
    assert lm.model.hidden_dim == 64 and lm.model.vocab_size == 260
    assert lm.optimizer.lr == 0.003 and lm.batch_size == 16
    assert comp.optimizer.schedule == "constant" and comp.patience == 5 and comp.eval_interval == 50
    assert gen.steps == 5000 and gen.model.variant == "D" and gen.n_gen == 32 and gen.n_ctx == 16


def test_full_scale_config_describes_the_full_scale_recipe():
    cfg = load_train_config(FULL_SCALE_CONFIG_PATH, "pretrain-lm")
    assert (cfg.model.hidden_dim, cfg.model.n_heads, cfg.model.n_layers, cfg.model.max_len) == (768, 16, 16, 512)
    assert cfg.model.vocab_size == 50257
    assert cfg.batch_size == 512 and cfg.steps == 320000
    assert cfg.optimizer.lr == 0.00015


def test_hparam_grid_file():
    grid = load_hparam_grid(HPARAM_GRID_PATH)
    assert grid["steps"] == 300
    assert grid["loss"] == [[1.0, 0.1, 0.1], [0.1, 0.1, 0.1], [1.0, 0.01, 0.01]]


def test_hparam_grid_rejects_unknown_axes(tmp_path):
    path = tmp_path / "grid.toml"
    path.write_text("[grid]\nmomentum = [0.9]\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_hparam_grid(path)


@pytest.mark.parametrize("bad", [
    {"hidden_dim": 10, "n_heads": 4},
    {"max_len": 1},
    {"vocab_size": 3},
    {"hidden_dim": 0},
    {"depth": 3},
])
def test_model_config_validation(bad):
    with pytest.raises(ValidationError):
        ModelConfig(**bad)


def test_train_config_lengths_must_fit_the_model():
    model = ModelConfig(hidden_dim=16, n_heads=2, n_layers=1, max_len=16)
    with pytest.raises(ValidationError):
        TrainConfig(model=model, window=32, n_ctx=4, n_gen=4)
    with pytest.raises(ValidationError):
        TrainConfig(model=model, window=16, n_ctx=10, n_gen=10)


def test_unknown_phase_and_loss_term():
    with pytest.raises(ValueError):
        build_train_config(RAW, "finetune")
    with pytest.raises(ValueError):
        LossWeights().without("lm")
    assert LossWeights().without("style").style == 0.0
