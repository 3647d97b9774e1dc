# core/models.py
"""
The named networks: pretrained LM H, generator F = (F_s, F_g, F_o), comparator C
and latent-GAN discriminator D, plus generation and the init-from-H copy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import ModelConfig
from . import autograd as ag
from .autograd import Tensor
from .corpus import BOS
from .errors import ContractError, DimensionError
from .transformer import (
    LayerNormParams, Linear, StackParams, StyleHead, TransformerLayerParams,
    init_layer, init_layer_norm, init_linear, init_stack, init_style_head,
    named_parameters, run_layers, style_head, transformer_forward,
)

logger = logging.getLogger(__name__)

# float32 gap just below 1.0; keeps scores strictly inside (0, 1)
SCORE_EPS = 2.0 ** -24


@dataclass
class GeneratorBundle:
    encoder: StackParams      # F_s body (variant none)
    head: StyleHead           # F_s head
    decoder: StackParams      # F_g, its token table doubles as F_o
    variant: str
    config: ModelConfig

    def parameters(self) -> List[Tensor]:
        return list(named_parameters(self).values())


@dataclass
class ComparatorNet:
    hidden: Linear   # 2B -> B
    out: Linear      # B -> 1


@dataclass
class DiscriminatorNet:
    positions: Tensor
    layers: List[TransformerLayerParams]
    ln_f: LayerNormParams
    out: Linear


@dataclass
class Sampling:
    top_k: Optional[int] = None   # None or 1 -> greedy
    temperature: float = 1.0


# =============================================================================
# Construction
# =============================================================================
def new_language_model(config: ModelConfig, seed: int) -> StackParams:
    return init_stack(config, np.random.default_rng(seed), variant="none")


def new_generator(config: ModelConfig, variant: str, seed: int) -> GeneratorBundle:
    rng = np.random.default_rng(seed)
    return GeneratorBundle(
        encoder=init_stack(config, rng, variant="none"),
        head=init_style_head(config.hidden_dim, rng),
        decoder=init_stack(config, rng, variant=variant),
        variant=variant,
        config=config.model_copy(update={"variant": variant}),
    )


def new_comparator(config: ModelConfig, seed: int) -> ComparatorNet:
    rng = np.random.default_rng(seed)
    B = config.hidden_dim
    return ComparatorNet(hidden=init_linear(rng, 2 * B, B, std=1.0 / np.sqrt(2 * B)),
                         out=init_linear(rng, B, 1, std=1.0 / np.sqrt(B)))


def new_discriminator(config: ModelConfig, seed: int) -> DiscriminatorNet:
    rng = np.random.default_rng(seed)
    B = config.hidden_dim
    return DiscriminatorNet(
        positions=ag.parameter(rng.normal(0.0, 0.01, size=(config.max_len + 1, B))),
        layers=[init_layer(config, rng, "none") for _ in range(config.disc_layers)],
        ln_f=init_layer_norm(B),
        out=init_linear(rng, B, 1),
    )


# =============================================================================
# H: the pretrained left-to-right LM
# =============================================================================
def lm_forward(H: StackParams, tokens: Sequence[int], config: ModelConfig) -> Tuple[Tensor, Tensor]:
    return transformer_forward(tokens, H, config, variant="none")


def paragraph_features(H: StackParams, tokens: Sequence[int], config: ModelConfig) -> Tensor:
    """
    H_f(p): final hidden states of [BOS] + p[:-1], one row per token of p.
    """
    tokens = list(map(int, tokens))
    if not tokens:
        raise ContractError("empty paragraph")
    features, _ = lm_forward(H, [BOS] + tokens[:-1], config)
    return features


# =============================================================================
# F: style encoder + decoder
# =============================================================================
def style_encode(reference_tokens: Sequence[int], bundle: GeneratorBundle) -> Tensor:
    """
    z = F_s(s)
    """
    ref = np.asarray(reference_tokens, dtype=np.int64)
    if ref.size == 0:
        raise ContractError("empty style reference")
    features, _ = transformer_forward(ref, bundle.encoder, bundle.config, variant="none")
    return style_head(features, bundle.head)


def _decode(tokens: Sequence[int], bundle: GeneratorBundle, z: Optional[Tensor],
            rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    features, logits = transformer_forward(tokens, bundle.decoder, bundle.config,
                                           z=z, variant=bundle.variant, rng=rng)
    if bundle.variant == "B":
        # the prepended style slot never predicts a token
        n = features.shape[0]
        features, logits = features[1:n], logits[1:n]
    return features, logits


def teacher_forced_forward(tokens: Sequence[int], reference_tokens: Sequence[int], bundle: GeneratorBundle,
                           context: Optional[Sequence[int]] = None, z: Optional[Tensor] = None,
                           rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """
    One decoder pass over [BOS] + p[:-1]; row t of the logits predicts p[t].
    Returns (logits [len(p) x V], features [len(p) x B]).
    """
    tokens = list(map(int, tokens))
    if not tokens:
        raise ContractError("empty target")
    if context is not None:
        context = list(map(int, context))
        if len(context) > len(tokens) or tokens[:len(context)] != context:
            raise ContractError("context must be a prefix of the target")
    if len(tokens) > bundle.config.max_len:
        raise ContractError(f"sequence of {len(tokens)} tokens exceeds max_len {bundle.config.max_len}")
    if z is None and bundle.variant != "none":
        z = style_encode(reference_tokens, bundle)
    features, logits = _decode([BOS] + tokens[:-1], bundle, z, rng)
    return logits, features


def sample_token(logits: np.ndarray, sampling: Sampling, rng: np.random.Generator) -> int:
    """
    Greedy for top_k None or 1, else a draw from the temperature softmax over the k best logits.
    """
    if sampling.top_k is None or sampling.top_k <= 1:
        return int(np.argmax(logits))
    scaled = logits.astype(np.float64) / max(sampling.temperature, 1e-8)
    k = min(int(sampling.top_k), scaled.shape[0])
    idx = np.argsort(-scaled, kind="stable")[:k]
    top = scaled[idx] - scaled[idx].max()
    probs = np.exp(top) / np.exp(top).sum()
    return int(rng.choice(idx, p=probs))


def free_running_generate(context_tokens: Sequence[int], reference_tokens: Sequence[int],
                          bundle: GeneratorBundle, n_gen: int, sampling: Optional[Sampling] = None,
                          seed: int = 0, z: Optional[Tensor] = None) -> Tuple[np.ndarray, Tensor]:
    """
    Autoregressive continuation of the context in the reference's style.

    Sampling passes run untaped; a final taped pass over the context plus the
    sampled tokens yields the features at the generated span, so gradients
    reach F_f while token identities stay constants.
    """
    sampling = sampling or Sampling()
    context = list(map(int, context_tokens))
    if n_gen < 1:
        raise ContractError("n_gen must be >= 1")
    if len(context) + n_gen > bundle.config.max_len:
        raise ContractError(f"context {len(context)} + n_gen {n_gen} exceeds max_len {bundle.config.max_len}")
    if z is None and bundle.variant != "none":
        z = style_encode(reference_tokens, bundle)

    rng = np.random.default_rng(seed)
    seq = [BOS] + context
    generated: List[int] = []
    with ag.no_grad():
        for _ in range(n_gen):
            _, logits = _decode(seq, bundle, z)
            tok = sample_token(logits.data[-1], sampling, rng)
            generated.append(tok)
            seq.append(tok)

    features, _ = _decode([BOS] + context + generated[:-1], bundle, z)
    start = len(context)
    return np.asarray(generated, dtype=np.int64), features[start:start + n_gen]


def init_generator_from_lm(H: StackParams, bundle: GeneratorBundle, seed: int = 0) -> GeneratorBundle:
    """
    Copy H's weights into F_s and F_g; variant parameters start so F reproduces H
    where the variant allows it (A: zero style output, D: modulation equal to H's norms).
    """
    cfg = bundle.config
    V, B = H.embeddings.tokens.shape
    inferred = (B, len(H.layers), H.embeddings.positions.shape[0] - 1, V)
    expected = (cfg.hidden_dim, cfg.n_layers, cfg.max_len, cfg.vocab_size)
    if inferred != expected:
        raise ContractError(f"H dims {inferred} do not match generator dims {expected}")

    rng = np.random.default_rng(seed)
    source = named_parameters(H)
    for stack in (bundle.encoder, bundle.decoder):
        for name, p in named_parameters(stack).items():
            if name in source:
                p.data[...] = source[name].data

    bundle.head = init_style_head(B, rng)
    if bundle.variant == "A":
        last = bundle.head.layers[-1]
        last.w.data[...] = 0.0
        last.b.data[...] = 0.0
    for layer in bundle.decoder.layers:
        if bundle.variant == "D":
            for net, base in ((layer.ln1_gamma_net, layer.ln1.gamma), (layer.ln1_beta_net, layer.ln1.beta),
                              (layer.ln2_gamma_net, layer.ln2.gamma), (layer.ln2_beta_net, layer.ln2.beta)):
                net.w.data[...] = 0.0
                net.b.data[...] = base.data
        elif bundle.variant == "C":
            layer.style_query.w.data[...] = rng.normal(0.0, 0.02, size=(B, B))
            layer.style_query.b.data[...] = 0.0
    logger.debug("generator (variant %s) initialised from H", bundle.variant)
    return bundle


# =============================================================================
# C and D
# =============================================================================
def _pool(features: Tensor) -> Tensor:
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError("feature sequence must be non-empty [L x B]")
    return ag.mean(features, axis=0)


def _probability(logit: Tensor) -> Tensor:
    return ag.reshape(ag.clip(ag.sigmoid(logit), SCORE_EPS, 1.0 - SCORE_EPS), ())


def comparator_score(features_a: Tensor, features_b: Tensor, C: ComparatorNet) -> Tensor:
    """
    Probability that the two feature sequences share a style.
    """
    B = C.hidden.w.shape[0] // 2
    if features_a.shape[-1] != B or features_b.shape[-1] != B:
        raise DimensionError(f"comparator expects feature dim {B}, got {features_a.shape[-1]} and {features_b.shape[-1]}")
    pair = ag.reshape(ag.concat([_pool(features_a), _pool(features_b)], axis=0), (1, 2 * B))
    logit = C.out(ag.gelu(C.hidden(pair)))
    return _probability(logit)


def discriminator_score(features: Tensor, D: DiscriminatorNet, config: ModelConfig) -> Tensor:
    """
    Probability that a feature sequence came from H_f rather than F_f.
    """
    L, B = features.shape
    if L < 1 or L > D.positions.shape[0]:
        raise ContractError(f"discriminator accepts 1..{D.positions.shape[0]} positions, got {L}")
    x = features + ag.take_rows(D.positions, np.arange(L))
    h = run_layers(x, D.layers, D.ln_f, config, variant="none")
    logit = D.out(ag.reshape(_pool(h), (1, B)))
    return _probability(logit)
