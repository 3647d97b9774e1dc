# core/transformer.py
"""
Causal decoder blocks with the four style-injection variants:

  A  style code added to every input embedding
  B  style code prepended as an extra position-0 token (sequence grows by one)
  C  style-aware self-attention, queries come from an affine map of the code
  D  adaptive layer norm, scale and shift predicted from the code

Layers are pre-norm (LN -> sublayer -> residual), MLPs use GELU, and the
output projection is tied to the token table.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import ModelConfig
from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError

INIT_STD = 0.02
MASK_VALUE = -1e9


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            out = ag.matmul(ag.reshape(x, (1, x.shape[0])), self.w) + self.b
            return ag.reshape(out, (self.w.shape[1],))
        return ag.matmul(x, self.w) + self.b


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class TransformerLayerParams:
    ln1: LayerNormParams
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    ln2: LayerNormParams
    mlp_in: Linear
    mlp_out: Linear
    # variant D
    ln1_gamma_net: Optional[Linear] = None
    ln1_beta_net: Optional[Linear] = None
    ln2_gamma_net: Optional[Linear] = None
    ln2_beta_net: Optional[Linear] = None
    # variant C
    style_query: Optional[Linear] = None


@dataclass
class Embeddings:
    tokens: Tensor      # V x B, also the output embedding
    positions: Tensor   # (T+1) x B, row 0 is the Model B style slot


@dataclass
class StackParams:
    embeddings: Embeddings
    layers: List[TransformerLayerParams]
    ln_f: LayerNormParams
    variant: str = "none"


@dataclass
class StyleHead:
    layers: List[Linear]


# =============================================================================
# Parameter plumbing
# =============================================================================
def named_parameters(obj, prefix: str = "") -> Dict[str, Tensor]:
    """
    Flatten nested parameter dataclasses/lists into {"a.b.0.w": Tensor} in declaration order.
    """
    out: Dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif is_dataclass(obj):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if value is None or isinstance(value, str):
                continue
            out.update(named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            out.update(named_parameters(value, f"{prefix}.{i}" if prefix else str(i)))
    return out


def parameters(obj) -> List[Tensor]:
    return list(named_parameters(obj).values())


def set_trainable(obj, trainable: bool) -> None:
    for p in parameters(obj):
        p.requires_grad = trainable


@contextlib.contextmanager
def frozen(obj) -> Iterator[None]:
    """
    Temporarily stop gradient flow into every parameter of `obj`.
    """
    params = parameters(obj)
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


def _normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return ag.parameter(rng.normal(0.0, std, size=shape))


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, std: float = INIT_STD) -> Linear:
    return Linear(_normal(rng, (n_in, n_out), std), ag.parameter(np.zeros(n_out)))


def init_layer_norm(dim: int) -> LayerNormParams:
    return LayerNormParams(ag.parameter(np.ones(dim)), ag.parameter(np.zeros(dim)))


def init_modulation(rng: np.random.Generator, dim: int, base: float) -> Linear:
    """
    Style-to-affine map whose output starts near `base` for any code.
    """
    net = init_linear(rng, dim, dim)
    net.b.data[...] = base
    return net


def init_layer(config: ModelConfig, rng: np.random.Generator, variant: str) -> TransformerLayerParams:
    B = config.hidden_dim
    out_std = INIT_STD / math.sqrt(2 * config.n_layers)
    layer = TransformerLayerParams(
        ln1=init_layer_norm(B),
        q=init_linear(rng, B, B), k=init_linear(rng, B, B), v=init_linear(rng, B, B),
        o=init_linear(rng, B, B, std=out_std),
        ln2=init_layer_norm(B),
        mlp_in=init_linear(rng, B, 4 * B),
        mlp_out=init_linear(rng, 4 * B, B, std=out_std),
    )
    if variant == "D":
        layer.ln1_gamma_net = init_modulation(rng, B, 1.0)
        layer.ln1_beta_net = init_modulation(rng, B, 0.0)
        layer.ln2_gamma_net = init_modulation(rng, B, 1.0)
        layer.ln2_beta_net = init_modulation(rng, B, 0.0)
    elif variant == "C":
        layer.style_query = init_linear(rng, B, B)
    return layer


def init_stack(config: ModelConfig, rng: np.random.Generator, variant: Optional[str] = None,
               n_layers: Optional[int] = None) -> StackParams:
    variant = config.variant if variant is None else variant
    B = config.hidden_dim
    return StackParams(
        embeddings=Embeddings(
            tokens=_normal(rng, (config.vocab_size, B)),
            positions=_normal(rng, (config.max_len + 1, B), std=0.01),
        ),
        layers=[init_layer(config, rng, variant) for _ in range(n_layers or config.n_layers)],
        ln_f=init_layer_norm(B),
        variant=variant,
    )


def init_style_head(hidden_dim: int, rng: np.random.Generator) -> StyleHead:
    return StyleHead(layers=[init_linear(rng, hidden_dim, hidden_dim, std=1.0 / math.sqrt(hidden_dim))
                             for _ in range(3)])


# =============================================================================
# Normalisation and attention
# =============================================================================
def layer_norm(h: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    mu = ag.mean(h, axis=-1, keepdims=True)
    centered = h - mu
    var = ag.mean(centered * centered, axis=-1, keepdims=True)
    return centered / ag.sqrt(var + eps) * gamma + beta


def adaptive_layer_norm(h: Tensor, z: Tensor, gamma_net: Linear, beta_net: Linear, eps: float) -> Tensor:
    """
    gamma(z) * (h - mu) / sqrt(sigma^2 + eps) + beta(z), statistics per token over channels.
    """
    return layer_norm(h, gamma_net(z), beta_net(z), eps)


def causal_mask(length: int) -> np.ndarray:
    """
    True above the diagonal (future positions).
    """
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    L, B = x.shape
    return ag.transpose(ag.reshape(x, (L, n_heads, B // n_heads)), (1, 0, 2))


def causal_attention(h: Tensor, layer: TransformerLayerParams, n_heads: int,
                     style_code: Optional[Tensor] = None, variant: str = "none",
                     return_weights: bool = False):
    """
    Multi-head scaled dot-product self-attention under a strict causal mask.
    Variant C replaces the content queries with eta_m(z) at every position.
    """
    L, B = h.shape
    d = B // n_heads
    if variant == "C":
        if style_code is None:
            raise ContractError("variant C attention needs a style code")
        if layer.style_query is None:
            raise ContractError("layer has no style-query map for variant C")
        q_row = ag.reshape(layer.style_query(style_code), (1, B))
        q = q_row + Tensor(np.zeros((L, B)))
    else:
        q = layer.q(h)
    k = layer.k(h)
    v = layer.v(h)

    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scores = ag.matmul(qh, ag.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(d))
    scores = ag.masked_fill(scores, causal_mask(L), MASK_VALUE)
    weights = ag.softmax(scores, axis=-1)
    ctx = ag.matmul(weights, vh)
    out = layer.o(ag.reshape(ag.transpose(ctx, (1, 0, 2)), (L, B)))
    if return_weights:
        return out, weights
    return out


def _norm(h: Tensor, ln: LayerNormParams, gamma_net: Optional[Linear], beta_net: Optional[Linear],
          z: Optional[Tensor], variant: str, eps: float) -> Tensor:
    if variant == "D":
        if z is None or gamma_net is None or beta_net is None:
            raise ContractError("variant D layer norm needs a style code and modulation nets")
        return adaptive_layer_norm(h, z, gamma_net, beta_net, eps)
    return layer_norm(h, ln.gamma, ln.beta, eps)


def transformer_block(x: Tensor, layer: TransformerLayerParams, config: ModelConfig,
                      z: Optional[Tensor] = None, variant: str = "none",
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    a = _norm(x, layer.ln1, layer.ln1_gamma_net, layer.ln1_beta_net, z, variant, config.ln_eps)
    x = x + ag.dropout(causal_attention(a, layer, config.n_heads, z, variant), config.dropout, rng)
    m = _norm(x, layer.ln2, layer.ln2_gamma_net, layer.ln2_beta_net, z, variant, config.ln_eps)
    hidden = ag.gelu(layer.mlp_in(m))
    return x + ag.dropout(layer.mlp_out(hidden), config.dropout, rng)


def run_layers(x: Tensor, layers: Sequence[TransformerLayerParams], ln_f: LayerNormParams,
               config: ModelConfig, z: Optional[Tensor] = None, variant: str = "none",
               rng: Optional[np.random.Generator] = None) -> Tensor:
    for layer in layers:
        x = transformer_block(x, layer, config, z, variant, rng)
    return layer_norm(x, ln_f.gamma, ln_f.beta, config.ln_eps)


def max_input_length(config: ModelConfig, variant: str) -> int:
    return config.max_len + (1 if variant == "B" else 0)


def transformer_forward(tokens: Sequence[int], params: StackParams, config: ModelConfig,
                        z: Optional[Tensor] = None, variant: Optional[str] = None,
                        rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """
    Returns (features [L' x B], logits [L' x V]); L' = L + 1 for variant B.
    """
    variant = params.variant if variant is None else variant
    ids = np.asarray(tokens, dtype=np.int64)
    L = int(ids.shape[0])
    if L < 1:
        raise ContractError("empty token sequence")
    if L > config.max_len:
        raise ContractError(f"sequence length {L} exceeds max_len {config.max_len}")
    if variant != "none" and z is None:
        raise ContractError(f"variant {variant} needs a style code")

    emb = params.embeddings
    tok = ag.take_rows(emb.tokens, ids)
    if variant == "B":
        # row 0 of the position table belongs to the style slot
        x = tok + ag.take_rows(emb.positions, np.arange(1, L + 1))
        slot = ag.reshape(z, (1, config.hidden_dim)) + ag.take_rows(emb.positions, [0])
        x = ag.concat([slot, x], axis=0)
    else:
        x = tok + ag.take_rows(emb.positions, np.arange(L))
        if variant == "A":
            x = x + ag.reshape(z, (1, config.hidden_dim))
    x = ag.dropout(x, config.dropout, rng)

    features = run_layers(x, params.layers, params.ln_f, config, z, variant, rng)
    logits = ag.matmul(features, ag.transpose(emb.tokens))
    return features, logits


def style_head(per_token_feats: Tensor, head: StyleHead) -> Tensor:
    """
    Position-wise 3-layer MLP, then mean over positions -> one style code.
    """
    if per_token_feats.shape[0] < 1:
        raise ContractError("style head needs at least one position")
    h = per_token_feats
    for i, lin in enumerate(head.layers):
        h = lin(h)
        if i < len(head.layers) - 1:
            h = ag.gelu(h)
    return ag.mean(h, axis=0)
