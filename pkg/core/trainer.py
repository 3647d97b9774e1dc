# core/trainer.py
"""
The three training phases and FED-based hyperparameter selection.

  pretrain_lm           left-to-right LM H on the corpus, no style machinery
  pretrain_comparator   same-style comparator C on frozen H features
  train_generator       F (+ latent discriminator D) on paired RS/CS items
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import LossWeights, OptimizerConfig, TrainConfig
from . import autograd as ag
from .autograd import Adam, Tape
from .corpus import BOS, Corpus, sample_cs_batch, sample_paragraph, sample_rs_batch
from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .json_utils import append_jsonl
from .metrics import sample_eval_items
from .models import (
    ComparatorNet, DiscriminatorNet, GeneratorBundle, Sampling, comparator_score, free_running_generate,
    init_generator_from_lm, lm_forward, new_comparator, new_discriminator, new_generator,
    new_language_model, paragraph_features,
)
from .objectives import (
    LossBreakdown, comparator_pretrain_loss, continue_in_style, fed, loss_dist, loss_lm,
    loss_gan_discriminator, pooled_features, total_loss,
)
from .transformer import StackParams, named_parameters, parameters, set_trainable

logger = logging.getLogger(__name__)

SATURATION = 1e-4
CHANCE_MARGIN = 0.05


class TrainLog:
    """
    Append-only per-step records, mirrored to JSONL when a path is given.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.records: List[Dict[str, Any]] = []
        self._t0 = time.monotonic()
        if self.path and self.path.exists():
            self.path.unlink()

    def append(self, record: Dict[str, Any]) -> None:
        step = int(record["step"])
        if self.records and step <= self.records[-1]["step"]:
            raise ContractError(f"log step {step} does not follow {self.records[-1]['step']}")
        record = {**record, "wall": round(time.monotonic() - self._t0, 3)}
        self.records.append(record)
        if self.path:
            append_jsonl(record, self.path)

    def last(self, key: str) -> Optional[Any]:
        for rec in reversed(self.records):
            if key in rec:
                return rec[key]
        return None


def _optimizer(params, opt: OptimizerConfig, steps: int) -> Adam:
    return Adam(params, lr=opt.lr, betas=(opt.beta1, opt.beta2), eps=opt.eps,
                weight_decay=opt.weight_decay, schedule=opt.schedule, total_steps=steps,
                grad_clip=opt.grad_clip)


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} became {value} at step {step}; lower the learning rate or check the corpus")


def _require_corpus(corpus: Optional[Corpus], what: str) -> Corpus:
    if corpus is None or len(corpus) == 0:
        raise ConfigurationError(f"{what} corpus is empty")
    return corpus


def snapshot(model: Any) -> Dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in named_parameters(model).items()}


def restore(model: Any, state: Dict[str, np.ndarray]) -> None:
    for name, p in named_parameters(model).items():
        p.data[...] = state[name]


# =============================================================================
# Phase 1: language model
# =============================================================================
def _lm_paragraph(corpus: Corpus, rng: np.random.Generator, window: int) -> np.ndarray:
    return sample_paragraph(corpus.tokens(int(rng.integers(0, len(corpus)))), window, rng)


def lm_nll(H: StackParams, paragraph: Sequence[int], config) -> ag.Tensor:
    tokens = list(map(int, paragraph))
    _, logits = lm_forward(H, [BOS] + tokens[:-1], config)
    return ag.cross_entropy(logits, tokens)


def validation_nll(H: StackParams, paragraphs: Sequence[np.ndarray], config) -> float:
    with ag.no_grad():
        return float(np.mean([lm_nll(H, p, config).item() for p in paragraphs]))


def pretrain_lm(corpus: Corpus, config: TrainConfig, val_corpus: Optional[Corpus] = None,
                log: Optional[TrainLog] = None, progress: bool = False) -> Tuple[StackParams, Dict[str, float]]:
    """
    Plain next-token training of H. Returns (H, {"train_nll", "val_nll"}).
    """
    corpus = _require_corpus(corpus, "training")
    log = log or TrainLog()
    rng = np.random.default_rng(config.seed)
    H = new_language_model(config.model, config.seed)
    opt = _optimizer(parameters(H), config.optimizer, config.steps)
    val_rng = np.random.default_rng(config.seed + 1)
    val_set = ([_lm_paragraph(val_corpus, val_rng, config.window) for _ in range(config.eval_items)]
               if val_corpus is not None and len(val_corpus) else [])

    result = {"train_nll": float("nan"), "val_nll": float("nan")}
    for step in tqdm(range(1, config.steps + 1), desc="pretrain-lm", disable=not progress):
        batch = [_lm_paragraph(corpus, rng, config.window) for _ in range(config.batch_size)]
        opt.zero_grad()
        with Tape() as tape:
            loss = lm_nll(H, batch[0], config.model)
            for p in batch[1:]:
                loss = loss + lm_nll(H, p, config.model)
            loss = loss * (1.0 / len(batch))
        _check_finite(loss.item(), "LM loss", step)
        tape.backward(loss)
        grad_norm = opt.step()
        result["train_nll"] = loss.item()

        if step % config.eval_interval == 0 or step == config.steps:
            rec = {"step": step, "phase": "pretrain-lm", "lm": loss.item(), "grad_norm": grad_norm,
                   "lr": opt.state.history[-1]}
            if val_set:
                result["val_nll"] = rec["val_nll"] = validation_nll(H, val_set, config.model)
            log.append(rec)
            logger.info("pretrain-lm step %d: loss %.4f val %.4f", step, loss.item(), result["val_nll"])
    return H, result


# =============================================================================
# Phase 2: comparator
# =============================================================================
@dataclass
class ComparatorResult:
    best_accuracy: float
    steps_run: int
    stopped_early: bool
    history: List[float] = field(default_factory=list)


def _pair(corpus: Corpus, rng: np.random.Generator, same: bool, window: int) -> Tuple[np.ndarray, np.ndarray]:
    populated = [l for l, idx in corpus.by_style.items() if idx]
    la = int(rng.choice(populated))
    lb = la if same else int(rng.choice([l for l in populated if l != la]))
    a = sample_paragraph(corpus.tokens(int(rng.choice(corpus.by_style[la]))), window, rng)
    b = sample_paragraph(corpus.tokens(int(rng.choice(corpus.by_style[lb]))), window, rng)
    return a, b


def _pair_features(H: StackParams, pair, config):
    with ag.no_grad():
        return tuple(paragraph_features(H, p, config).detach() for p in pair)


def comparator_accuracy(C: ComparatorNet, pairs: Sequence[Tuple[ag.Tensor, ag.Tensor, bool]]) -> float:
    with ag.no_grad():
        hits = [(comparator_score(fa, fb, C).item() > 0.5) == same for fa, fb, same in pairs]
    return float(np.mean(hits))


def pretrain_comparator(corpus: Corpus, H: StackParams, config: TrainConfig, val_corpus: Optional[Corpus] = None,
                        log: Optional[TrainLog] = None, shuffle_labels: bool = False,
                        progress: bool = False) -> Tuple[ComparatorNet, ComparatorResult]:
    """
    BCE on balanced same/different-style pairs of frozen H features, early-stopped
    on validation accuracy. `shuffle_labels` randomises the targets (control run).
    """
    corpus = _require_corpus(corpus, "training")
    val_corpus = val_corpus if val_corpus is not None and len(val_corpus) else corpus
    if sum(1 for idx in corpus.by_style.values() if idx) < 2:
        raise ConfigurationError("comparator pretraining needs at least two styles")
    log = log or TrainLog()
    set_trainable(H, False)
    rng = np.random.default_rng(config.seed)
    C = new_comparator(config.model, config.seed)
    opt = _optimizer(parameters(C), config.optimizer, config.steps)

    val_rng = np.random.default_rng(config.seed + 1)
    val_pairs = []
    for k in range(config.eval_items):
        same = k % 2 == 0
        fa, fb = _pair_features(H, _pair(val_corpus, val_rng, same, config.window), config.model)
        val_pairs.append((fa, fb, same))

    best, best_state, stale, evals = -1.0, snapshot(C), 0, 0
    result = ComparatorResult(best_accuracy=0.0, steps_run=0, stopped_early=False)
    for step in tqdm(range(1, config.steps + 1), desc="pretrain-comparator", disable=not progress):
        opt.zero_grad()
        with Tape() as tape:
            losses = []
            for k in range(config.batch_size):
                same = k % 2 == 0
                fa, fb = _pair_features(H, _pair(corpus, rng, same, config.window), config.model)
                label = bool(rng.integers(0, 2)) if shuffle_labels else same
                losses.append(comparator_pretrain_loss(fa, fb, label, C))
            loss = losses[0]
            for extra in losses[1:]:
                loss = loss + extra
            loss = loss * (1.0 / len(losses))
        _check_finite(loss.item(), "comparator loss", step)
        tape.backward(loss)
        opt.step()
        result.steps_run = step

        if step % config.eval_interval == 0 or step == config.steps:
            acc = comparator_accuracy(C, val_pairs)
            evals += 1
            result.history.append(acc)
            log.append({"step": step, "phase": "pretrain-comparator", "bce": loss.item(), "val_accuracy": acc})
            logger.info("pretrain-comparator step %d: bce %.4f val acc %.3f", step, loss.item(), acc)
            if acc > best + 1e-4:
                best, best_state, stale = acc, snapshot(C), 0
            else:
                stale += 1
            if not shuffle_labels and evals >= config.chance_evals and best <= 0.5 + CHANCE_MARGIN:
                raise TrainingDivergedError(
                    f"comparator accuracy {best:.3f} still at chance after {evals} evaluations")
            if stale >= config.patience:
                result.stopped_early = step < config.steps
                logger.info("comparator plateaued at %.3f, stopping at step %d", best, step)
                break

    restore(C, best_state)
    result.best_accuracy = max(best, 0.0)
    return C, result


# =============================================================================
# Phase 3: generator
# =============================================================================
@dataclass
class GeneratorResult:
    bundle: GeneratorBundle
    discriminator: DiscriminatorNet
    fed_history: List[Tuple[int, float]] = field(default_factory=list)
    final_fed: Optional[float] = None


def validation_fed(bundle: GeneratorBundle, H: StackParams, corpus: Corpus, config: TrainConfig,
                   seed: Optional[int] = None) -> float:
    """
    FED between pooled H features of generated continuations and of their same-style references.
    """
    seed = config.seed if seed is None else seed
    items = sample_eval_items(corpus, config.eval_items, config.window, config.n_ctx, seed)
    sampling = Sampling(top_k=config.top_k)
    gens, refs = [], []
    with ag.no_grad():
        for n, item in enumerate(items):
            tokens, _ = free_running_generate(item.context, item.reference, bundle, config.n_gen, sampling, seed + n)
            gens.append(tokens)
            refs.append(item.reference)
    return fed(pooled_features(H, gens, bundle.config), pooled_features(H, refs, bundle.config))


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> Dict[str, float]:
    keys = ("lm", "dist", "style", "gan_generator", "total")
    return {k: float(np.mean([getattr(p, k) for p in parts])) for k in keys}


def _item_seed(seed: int, step: int, i: int) -> int:
    return (seed * 1_000_003 + step * 1_009 + i) % (2 ** 32)


def train_generator(corpus: Corpus, H: StackParams, C: ComparatorNet, config: TrainConfig,
                    val_corpus: Optional[Corpus] = None, log: Optional[TrainLog] = None,
                    progress: bool = False) -> GeneratorResult:
    """
    Each step: sample batch_size RS and CS items, update D once per d_steps on the
    detached continuations, then update F on the combined objective with D frozen.
    H and C never change.
    """
    corpus = _require_corpus(corpus, "training")
    log = log or TrainLog()
    variant = config.model.variant
    set_trainable(H, False)
    set_trainable(C, False)

    bundle = init_generator_from_lm(H, new_generator(config.model, variant, config.seed), config.seed)
    D = new_discriminator(config.model, config.seed + 1)
    opt_f = _optimizer(bundle.parameters(), config.optimizer, config.steps)
    opt_d = _optimizer(parameters(D), config.optimizer, config.steps * config.d_steps)
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 2)
    sampling = Sampling(top_k=config.top_k)
    result = GeneratorResult(bundle=bundle, discriminator=D)
    if val_corpus is not None and len(val_corpus):
        logger.info("validation FED every %d steps (run-monitoring extension)", config.eval_interval)

    for step in tqdm(range(1, config.steps + 1), desc=f"train-{variant}", disable=not progress):
        rs = [sample_rs_batch(corpus, rng, config.window, config.n_ctx) for _ in range(config.batch_size)]
        with_cs = config.mix_ratio >= 1.0 or rng.random() < config.mix_ratio
        cs = [sample_cs_batch(corpus, rng, config.window, config.n_ctx) for _ in range(config.batch_size)] if with_cs else []
        record: Dict[str, Any] = {"step": step, "phase": "train-generator", "variant": variant}

        opt_f.zero_grad()
        with Tape() as f_tape:
            conts = [continue_in_style(b, bundle, H, config.n_gen, sampling, _item_seed(config.seed, step, i))
                     for i, b in enumerate(cs)]

            if conts:
                d_losses = []
                for _ in range(config.d_steps):
                    opt_d.zero_grad()
                    with Tape() as d_tape:
                        d_loss = loss_gan_discriminator(cs[0], bundle, H, D, continuation=conts[0])
                        for b, c in zip(cs[1:], conts[1:]):
                            d_loss = d_loss + loss_gan_discriminator(b, bundle, H, D, continuation=c)
                        d_loss = d_loss * (1.0 / len(conts))
                    _check_finite(d_loss.item(), "discriminator loss", step)
                    d_tape.backward(d_loss)
                    opt_d.step()
                    d_losses.append(d_loss.item())
                record["gan_discriminator"] = float(np.mean(d_losses))

                parts = [total_loss(r, c, bundle, H, C, D, config.loss, config.n_gen, sampling,
                                    rng=drop_rng, continuation=cont)
                         for r, c, cont in zip(rs, cs, conts)]
                objective = parts[0].objective
                for p in parts[1:]:
                    objective = objective + p.objective
                objective = objective * (1.0 / len(parts))
                record.update(_mean_breakdown(parts))
                scores = np.exp([-p.style for p in parts])
                if np.all(scores > 1.0 - SATURATION) or np.all(scores < SATURATION):
                    logger.warning("comparator scores saturated at step %d (mean %.5f)", step, scores.mean())
            else:
                lm_terms, dist_terms = [], []
                for r in rs:
                    lm_terms.append(loss_lm(r, bundle, rng=drop_rng))
                    dist_terms.append(loss_dist(r, bundle, H))
                objective = lm_terms[0] + config.loss.dist * dist_terms[0]
                for a, b in zip(lm_terms[1:], dist_terms[1:]):
                    objective = objective + a + config.loss.dist * b
                objective = objective * (1.0 / len(rs))
                record.update({"lm": float(np.mean([t.item() for t in lm_terms])),
                               "dist": float(np.mean([t.item() for t in dist_terms]))})
                record["total"] = record["lm"] + config.loss.dist * record["dist"]

        _check_finite(objective.item(), "generator objective", step)
        f_tape.backward(objective)
        record["grad_norm"] = opt_f.step()
        record["lr"] = opt_f.state.history[-1]

        if val_corpus is not None and len(val_corpus) and (step % config.eval_interval == 0 or step == config.steps):
            value = validation_fed(bundle, H, val_corpus, config)
            record["val_fed"] = value
            record["val_fed_note"] = "extension: run monitoring"
            result.fed_history.append((step, value))
            result.final_fed = value
            logger.info("train-%s step %d: total %.4f val FED %.4f", variant, step, record["total"], value)
        log.append(record)
    return result


# =============================================================================
# Hyperparameter selection and ablations
# =============================================================================
SEARCHED_LOSS_GRID = ((1.0, 0.1, 0.1), (0.1, 0.1, 0.1), (1.0, 0.01, 0.01))


def expand_grid(base: TrainConfig, grid: Optional[Dict[str, Any]] = None) -> List[TrainConfig]:
    """
    Cartesian product of the grid axes over `base`, in declared order. Without a grid,
    the three searched loss-weight triples.
    """
    grid = grid or {"loss": [list(t) for t in SEARCHED_LOSS_GRID]}
    losses = [LossWeights(dist=d, style=s, gan=g) for d, s, g in grid.get("loss", [])] or [base.loss]
    betas = [tuple(b) for b in grid.get("betas", [])] or [(base.optimizer.beta1, base.optimizer.beta2)]
    decays = list(grid.get("weight_decay", [])) or [base.optimizer.weight_decay]
    rates = list(grid.get("lr", [])) or [base.optimizer.lr]
    steps = int(grid.get("steps", base.steps))

    out = []
    for loss, (b1, b2), wd, lr in itertools.product(losses, betas, decays, rates):
        opt = base.optimizer.model_copy(update={"beta1": b1, "beta2": b2, "weight_decay": wd, "lr": lr})
        out.append(base.model_copy(update={"loss": loss, "optimizer": opt, "steps": steps}))
    return out


@dataclass
class Selection:
    best_index: int
    best: TrainConfig
    scores: List[float]


def select_hyperparams(candidates: Sequence[TrainConfig], train_corpus: Corpus, holdout_corpus: Corpus,
                       H: StackParams, C: ComparatorNet, progress: bool = False) -> Selection:
    """
    Train each candidate briefly and keep the lowest hold-out FED; ties go to the earlier candidate.
    """
    if not candidates:
        raise ConfigurationError("no hyperparameter candidates")
    if len(candidates) == 1:
        return Selection(best_index=0, best=candidates[0], scores=[])
    _require_corpus(holdout_corpus, "hold-out")
    scores: List[float] = []
    for i, cand in enumerate(candidates):
        run = train_generator(train_corpus, H, C, cand, progress=progress)
        score = validation_fed(run.bundle, H, holdout_corpus, cand)
        scores.append(score)
        logger.info("candidate %d (loss %s, lr %g): FED %.4f", i, cand.loss.model_dump(), cand.optimizer.lr, score)
    best_index = int(np.argmin(scores))  # first minimum
    return Selection(best_index=best_index, best=candidates[best_index], scores=scores)


ABLATION_TERMS = ("dist", "style", "gan")


def ablation_configs(config: TrainConfig, terms: Sequence[str] = ABLATION_TERMS) -> Dict[str, TrainConfig]:
    """
    {"full": config, "-dist": ..., ...} with one loss weight zeroed per row.
    """
    rows = {"full": config}
    for term in terms:
        if term not in ABLATION_TERMS:
            raise ConfigurationError(f"cannot ablate unknown loss term {term}")
        rows[f"-{term}"] = config.model_copy(update={"loss": config.loss.without(term)})
    return rows
