# core/metrics.py
"""
Automatic evaluation: fluency, style score, style diversity and content
novelty, with corpus-derived bounds for the two distance metrics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from tqdm import tqdm

from config import ModelConfig
from . import autograd as ag
from .assignment import hungarian
from .classify import StyleClassifier
from .corpus import Corpus, detokenize, sample_cs_batch, sample_paragraph
from .errors import ConfigurationError, ContractError
from .models import GeneratorBundle, Sampling, free_running_generate, lm_forward, paragraph_features
from .objectives import pooled_features
from .transformer import StackParams

logger = logging.getLogger(__name__)


@dataclass
class Bounds:
    lower: float
    upper: float


@dataclass
class MetricsReport:
    fluency: float
    style_score: float
    diversity: float
    diversity_bounds: Bounds
    novelty: float
    novelty_bounds: Bounds
    per_style: Dict[str, float] = field(default_factory=dict)
    n: int = 0
    samples: List[Dict[str, str]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "fluency": self.fluency,
            "style_score": self.style_score,
            "diversity": {"value": self.diversity, **asdict(self.diversity_bounds)},
            "novelty": {"value": self.novelty, **asdict(self.novelty_bounds)},
            "per_style": dict(self.per_style),
            "n": self.n,
        }


# =============================================================================
# Per-item metrics
# =============================================================================
def fluency_bound(vocab_size: int) -> float:
    return math.log(vocab_size)


def fluency_score(tokens: Sequence[int], H: StackParams, config: ModelConfig, start: int = 1) -> float:
    """
    ln(V) - ln(perplexity) under H of tokens[start:], each conditioned on everything before it.
    0 for a uniform model. Pass start=len(context) to score only a continuation.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    start = max(int(start), 1)
    if tokens.shape[0] < 2:
        raise ContractError("fluency needs at least two tokens")
    if start >= tokens.shape[0]:
        raise ContractError(f"nothing to score after position {start} of {tokens.shape[0]} tokens")
    with ag.no_grad():
        _, logits = lm_forward(H, tokens[:-1], config)
    logp = ag._log_softmax_np(logits.data.astype(np.float64), -1)
    positions = np.arange(start, tokens.shape[0])
    nll = -float(logp[positions - 1, tokens[positions]].mean())
    return fluency_bound(config.vocab_size) - nll


def _token_features(tokens: Sequence[int], H: StackParams, config: ModelConfig) -> np.ndarray:
    with ag.no_grad():
        return paragraph_features(H, tokens, config).data.astype(np.float64)


def style_diversity(tokens_a: Sequence[int], tokens_b: Sequence[int], H: StackParams, config: ModelConfig) -> float:
    """
    L2 distance between mean-pooled H features of two texts.
    """
    pooled = pooled_features(H, [tokens_a, tokens_b], config)
    return float(np.linalg.norm(pooled[0] - pooled[1]))


def matching_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """
    Optimal one-to-one matching cost of token features, per matched pair.
    """
    cost = cdist(np.asarray(features_a, dtype=np.float64), np.asarray(features_b, dtype=np.float64))
    pairs, total = hungarian(cost)
    return total / len(pairs)


def content_novelty(gen_tokens: Sequence[int], reference_tokens: Sequence[int], H: StackParams,
                    config: ModelConfig) -> float:
    if len(gen_tokens) == 0 or len(reference_tokens) == 0:
        raise ContractError("content novelty needs two non-empty texts")
    return matching_distance(_token_features(gen_tokens, H, config), _token_features(reference_tokens, H, config))


def style_score(features: np.ndarray, target_labels: Sequence[int], classifiers: Mapping[int, StyleClassifier],
                style_names: Optional[Sequence[str]] = None) -> Tuple[float, Dict[str, float]]:
    """
    Fraction of items the target-style classifier accepts, overall and per target style.
    """
    X = np.atleast_2d(np.asarray(features))
    labels = np.asarray(target_labels, dtype=np.int64)
    if X.shape[0] != labels.shape[0] or labels.size == 0:
        raise ContractError("features and target labels must be non-empty and aligned")
    hits = np.zeros(labels.shape[0], dtype=bool)
    for label in np.unique(labels):
        if int(label) not in classifiers:
            raise ConfigurationError(f"no style classifier for label {int(label)}")
        rows = labels == label
        hits[rows] = classifiers[int(label)].predict(X[rows]) == 1
    per_style = {}
    for label in np.unique(labels):
        name = style_names[int(label)] if style_names else str(int(label))
        per_style[name] = float(hits[labels == label].mean())
    return float(hits.mean()), per_style


# =============================================================================
# Corpus bounds
# =============================================================================
def _style_windows(corpus: Corpus, label: int, n: int, window: int, rng: np.random.Generator) -> List[np.ndarray]:
    docs = corpus.by_style[label]
    return [sample_paragraph(corpus.tokens(int(rng.choice(docs))), window, rng) for _ in range(n)]


def mean_pair_distance(x: np.ndarray, y: np.ndarray, same: bool = False) -> float:
    """
    Mean Euclidean distance over pairs of rows; same=True drops the self-pairs on the diagonal.
    """
    d = cdist(x, y)
    if not same:
        return float(d.mean())
    if d.shape[0] != d.shape[1] or d.shape[0] < 2:
        raise ContractError("a same-style cell needs one square block of at least two rows")
    return float(d[~np.eye(d.shape[0], dtype=bool)].mean())


def _within_document_pairs(corpus: Corpus, label: int, window: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    First two non-overlapping windows of every document long enough to hold them.
    """
    pairs = []
    for i in corpus.by_style[label]:
        toks = corpus.tokens(i)
        if len(toks) >= 2 * window:
            pairs.append((toks[:window], toks[window:2 * window]))
    return pairs


def _check_bounds_corpus(corpus: Corpus) -> None:
    populated = [l for l, idx in corpus.by_style.items() if idx]
    if len(populated) < 2:
        raise ConfigurationError("bounds need documents from at least two styles")


def diversity_bounds(corpus: Corpus, H: StackParams, config: ModelConfig, n_per_style: int = 200,
                     window: int = 64, seed: int = 0) -> Bounds:
    """
    upper: largest entry of the style x style mean pairwise distance matrix.
    lower: mean over styles of the distance between paragraphs of one document.
    """
    _check_bounds_corpus(corpus)
    rng = np.random.default_rng(seed)
    labels = [l for l, idx in corpus.by_style.items() if idx]
    pooled = {l: pooled_features(H, _style_windows(corpus, l, n_per_style, window, rng), config) for l in labels}
    upper = max(mean_pair_distance(pooled[a], pooled[b], same=a == b) for a in labels for b in labels)

    per_style = []
    for l in labels:
        pairs = _within_document_pairs(corpus, l, window)
        if pairs:
            per_style.append(np.mean([style_diversity(a, b, H, config) for a, b in pairs]))
    if not per_style:
        raise ConfigurationError(f"no document holds two {window}-token paragraphs for the lower bound")
    bounds = Bounds(lower=float(np.mean(per_style)), upper=upper)
    logger.info("diversity bounds: lower %.3f upper %.3f", bounds.lower, bounds.upper)
    return bounds


def novelty_bounds(corpus: Corpus, H: StackParams, config: ModelConfig, n_pairs: int = 20,
                   window: int = 64, seed: int = 0) -> Bounds:
    """
    As diversity_bounds, with the matching distance over n_pairs sampled pairs per style cell.
    """
    _check_bounds_corpus(corpus)
    rng = np.random.default_rng(seed)
    labels = [l for l, idx in corpus.by_style.items() if idx]
    feats = {l: [_token_features(p, H, config) for p in _style_windows(corpus, l, 2 * n_pairs, window, rng)]
             for l in labels}
    upper = 0.0
    for a in labels:
        for b in labels:
            cell = [matching_distance(feats[a][i], feats[b][n_pairs + i]) for i in range(n_pairs)]
            upper = max(upper, float(np.mean(cell)))

    per_style = []
    for l in labels:
        pairs = _within_document_pairs(corpus, l, window)[:n_pairs]
        if pairs:
            per_style.append(np.mean([content_novelty(a, b, H, config) for a, b in pairs]))
    if not per_style:
        raise ConfigurationError(f"no document holds two {window}-token paragraphs for the lower bound")
    bounds = Bounds(lower=float(np.mean(per_style)), upper=upper)
    logger.info("novelty bounds: lower %.3f upper %.3f", bounds.lower, bounds.upper)
    return bounds


# =============================================================================
# End-to-end evaluation of a generator
# =============================================================================
@dataclass
class EvalItem:
    context: np.ndarray
    reference: np.ndarray
    second_reference: np.ndarray
    target_label: int


def sample_eval_items(corpus: Corpus, n_items: int, window: int, n_ctx: int, seed: int) -> List[EvalItem]:
    """
    Cross-style items, each with a second same-style reference for the diversity metric.
    """
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n_items):
        batch = sample_cs_batch(corpus, rng, window=window, n_ctx=n_ctx)
        docs = corpus.by_style[batch.style_label_reference]
        second = sample_paragraph(corpus.tokens(int(rng.choice(docs))), window, rng)
        items.append(EvalItem(context=batch.context, reference=batch.reference,
                              second_reference=second, target_label=batch.style_label_reference))
    return items


def evaluate_generator(bundle: GeneratorBundle, H: StackParams, items: Sequence[EvalItem],
                       classifiers: Mapping[int, StyleClassifier], diversity: Bounds, novelty: Bounds,
                       n_gen: int, style_names: Optional[Sequence[str]] = None,
                       sampling: Optional[Sampling] = None, seed: int = 0,
                       progress: bool = False) -> MetricsReport:
    """
    Generate a continuation per item and score it on all four metrics.
    """
    if not items:
        raise ContractError("evaluation needs at least one item")
    config = bundle.config
    fluency, div, nov, pooled, targets, samples = [], [], [], [], [], []
    for n, item in enumerate(tqdm(items, desc="evaluate", disable=not progress)):
        with ag.no_grad():
            gen, _ = free_running_generate(item.context, item.reference, bundle, n_gen, sampling, seed + n)
            gen_b, _ = free_running_generate(item.context, item.second_reference, bundle, n_gen, sampling, seed + n)
        fluency.append(fluency_score(np.concatenate([item.context, gen]), H, config, start=len(item.context)))
        div.append(style_diversity(gen, gen_b, H, config))
        nov.append(content_novelty(gen, item.reference, H, config))
        pooled.append(_token_features(gen, H, config).mean(axis=0))
        targets.append(item.target_label)
        samples.append({"style": style_names[item.target_label] if style_names else str(item.target_label),
                        "context": detokenize(item.context), "generated": detokenize(gen)})
    rate, per_style = style_score(np.asarray(pooled), targets, classifiers, style_names)
    return MetricsReport(fluency=float(np.mean(fluency)), style_score=rate,
                         diversity=float(np.mean(div)), diversity_bounds=diversity,
                         novelty=float(np.mean(nov)), novelty_bounds=novelty,
                         per_style=per_style, n=len(items), samples=samples)
