# config.py
import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator
from rich.logging import RichHandler

load_dotenv()

# --- Environment overrides ---
SEED_OVERRIDE = os.getenv("STYF_SEED", "").strip()
LOG_LEVEL = os.getenv("STYF_LOG_LEVEL", "INFO").strip().upper() or "INFO"
CHECK_FINITE = os.getenv("STYF_CHECK_FINITE", "0").strip() in {"1", "true", "yes"}

# --- Project paths (absolute to avoid surprises) ---
PROJECT_ROOT = Path(__file__).resolve().parent

DATA_DIR = Path(os.getenv("STYF_DATA_DIR", "") or (PROJECT_ROOT / "data"))
RUNS_DIR = Path(os.getenv("STYF_RUNS_DIR", "") or (PROJECT_ROOT / "runs"))
CONFIG_DIR = PROJECT_ROOT / "configs"

DEFAULT_STYLES_PATH = DATA_DIR / "default_styles.json"
DESK_CONFIG_PATH = CONFIG_DIR / "desk.toml"
FULL_SCALE_CONFIG_PATH = CONFIG_DIR / "full_scale.toml"
HPARAM_GRID_PATH = CONFIG_DIR / "hparam_grid.toml"

# --- Desk-scale defaults ---
DEFAULT_SEED = 42
DEFAULT_DOCS_PER_STYLE = 200
DEFAULT_WINDOW = 64
DEFAULT_N_CTX = 16
DEFAULT_N_GEN = 32
PROB_FLOOR = 1e-7

Variant = Literal["none", "A", "B", "C", "D"]
Phase = Literal["pretrain-lm", "pretrain-comparator", "train-generator"]
PHASES = ("pretrain-lm", "pretrain-comparator", "train-generator")


def setup_logging(level: Optional[str] = None) -> None:
    """
    Route all package loggers through a single rich handler.
    """
    logging.basicConfig(
        level=(level or LOG_LEVEL).upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=False, show_path=False)],
        force=True,
    )


class ModelConfig(BaseModel):
    """
    Shape of every transformer stack in a run; the full-scale values live in configs/full_scale.toml.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden_dim: int = Field(64, gt=0)
    n_heads: int = Field(4, gt=0)
    n_layers: int = Field(4, gt=0)
    max_len: int = 64
    vocab_size: int = 260
    variant: Variant = "none"
    ln_eps: float = Field(1e-5, gt=0)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    disc_layers: int = Field(2, gt=0)

    @model_validator(mode="after")
    def _check_dims(self) -> "ModelConfig":
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the 4 special tokens")
        return self

    def core_dims(self) -> tuple:
        return (self.hidden_dim, self.n_heads, self.n_layers, self.max_len, self.vocab_size)


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dist: float = 1.0
    style: float = 0.01
    gan: float = 0.01

    @classmethod
    def for_variant(cls, variant: str) -> "LossWeights":
        # Model B trains with a stronger GAN term
        if variant == "B":
            return cls(dist=1.0, style=0.01, gan=0.1)
        return cls()

    def without(self, term: str) -> "LossWeights":
        if term not in {"dist", "style", "gan"}:
            raise ValueError(f"unknown loss term: {term}")
        return self.model_copy(update={term: 0.0})


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(0.00025, gt=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0.0)
    schedule: Literal["cosine", "constant"] = "cosine"
    grad_clip: float = Field(1.0, gt=0)


class TrainConfig(BaseModel):
    """
    One phase of a run. Key set mirrors the [model]/[loss]/[optimizer]/[phases.*] TOML tables.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    phase: Phase = "train-generator"
    model: ModelConfig = ModelConfig()
    loss: LossWeights = LossWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = Field(8, gt=0)
    steps: int = Field(5000, gt=0)
    mix_ratio: float = Field(1.0, gt=0.0, le=1.0)
    d_steps: int = Field(1, ge=1)
    n_ctx: int = Field(DEFAULT_N_CTX, ge=1)
    n_gen: int = Field(DEFAULT_N_GEN, ge=1)
    window: int = Field(DEFAULT_WINDOW, ge=2)
    eval_interval: int = Field(250, gt=0)
    eval_items: int = Field(96, gt=1)
    patience: int = Field(5, gt=0)
    chance_evals: int = Field(10, gt=0)
    top_k: Optional[int] = None
    seed: int = DEFAULT_SEED
    lm_checkpoint: Optional[str] = None
    comparator_checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _check_lengths(self) -> "TrainConfig":
        if self.window > self.model.max_len:
            raise ValueError(f"window {self.window} exceeds max_len {self.model.max_len}")
        if self.n_ctx + self.n_gen > self.model.max_len:
            raise ValueError("n_ctx + n_gen must fit in max_len")
        return self

    def with_variant(self, variant: str) -> "TrainConfig":
        model = self.model.model_copy(update={"variant": variant})
        return self.model_copy(update={"model": model, "loss": LossWeights.for_variant(variant)})


def _merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_train_config(raw: Dict[str, Any], phase: str, variant: Optional[str] = None) -> TrainConfig:
    """
    Merge shared tables with the [phases.<phase>] overrides and apply env overrides.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase: {phase}")
    shared = {k: v for k, v in raw.items() if k not in ("phases", "train")}
    shared.update(raw.get("train") or {})
    overrides = (raw.get("phases") or {}).get(phase, {})
    merged = _merge(shared, overrides)
    merged["phase"] = phase

    if variant is not None:
        merged.setdefault("model", {})
        merged["model"] = {**merged["model"], "variant": variant}
    model_variant = (merged.get("model") or {}).get("variant", "none")
    if "loss" not in merged:
        merged["loss"] = LossWeights.for_variant(model_variant).model_dump()

    if SEED_OVERRIDE:
        merged["seed"] = int(SEED_OVERRIDE)
    return TrainConfig(**merged)


def load_train_config(path: Path, phase: str, variant: Optional[str] = None) -> TrainConfig:
    """
    Read a TOML run config and build the TrainConfig for one phase.
    """
    raw = toml.loads(Path(path).read_text(encoding="utf-8"))
    return build_train_config(raw, phase, variant=variant)


def load_hparam_grid(path: Path) -> Dict[str, Any]:
    """
    Read the candidate grid: optional lists under [grid] for loss, betas, weight_decay and lr.
    """
    raw = toml.loads(Path(path).read_text(encoding="utf-8"))
    grid = raw.get("grid", raw)
    unknown = set(grid) - {"loss", "betas", "weight_decay", "lr", "steps"}
    if unknown:
        raise ValueError(f"unknown hyperparameter grid keys: {sorted(unknown)}")
    return grid
