import math

import numpy as np
import pytest

from core import autograd as ag
from core.autograd import Tensor
from core.errors import ContractError
from core.transformer import (
    adaptive_layer_norm, causal_attention, causal_mask, frozen, init_layer, init_linear, init_stack,
    layer_norm, named_parameters, parameters, style_head, init_style_head, transformer_forward,
)

VARIANTS = ["none", "A", "B", "C", "D"]


def _code(config, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=config.hidden_dim))


@pytest.mark.parametrize("variant", VARIANTS)
def test_positions_never_see_later_tokens(tiny_config, variant):
    offset = 1 if variant == "B" else 0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        params = init_stack(tiny_config, rng, variant=variant)
        z = None if variant == "none" else Tensor(rng.normal(size=tiny_config.hidden_dim))
        L = int(rng.integers(2, tiny_config.max_len + 1))
        a = rng.integers(0, tiny_config.vocab_size, size=L)
        k = int(rng.integers(0, L - 1))
        b = a.copy()
        b[k + 1:] = rng.integers(0, tiny_config.vocab_size, size=L - k - 1)
        b[k + 1] = (a[k + 1] + 1) % tiny_config.vocab_size
        fa, la = transformer_forward(a, params, tiny_config, z=z)
        fb, lb = transformer_forward(b, params, tiny_config, z=z)
        keep = k + 1 + offset
        assert np.array_equal(fa.data[:keep], fb.data[:keep]), f"trial {trial}, k={k}"
        assert np.array_equal(la.data[:keep], lb.data[:keep]), f"trial {trial}, k={k}"
        assert not np.array_equal(la.data[keep], lb.data[keep])


@pytest.mark.parametrize("variant", VARIANTS)
def test_output_shapes(tiny_config, variant):
    params = init_stack(tiny_config, np.random.default_rng(0), variant=variant)
    z = None if variant == "none" else _code(tiny_config)
    feats, logits = transformer_forward([1, 2, 3, 4], params, tiny_config, z=z)
    L = 5 if variant == "B" else 4
    assert feats.shape == (L, tiny_config.hidden_dim)
    assert logits.shape == (L, tiny_config.vocab_size)


@pytest.mark.parametrize("variant", VARIANTS)
def test_single_token_input(tiny_config, variant):
    params = init_stack(tiny_config, np.random.default_rng(0), variant=variant)
    z = None if variant == "none" else _code(tiny_config)
    _, logits = transformer_forward([42], params, tiny_config, z=z)
    assert np.all(np.isfinite(logits.data))


def test_full_length_input_is_accepted_and_longer_is_rejected(tiny_config):
    params = init_stack(tiny_config, np.random.default_rng(0), variant="B")
    z = _code(tiny_config)
    _, logits = transformer_forward(list(range(tiny_config.max_len)), params, tiny_config, z=z)
    assert logits.shape[0] == tiny_config.max_len + 1
    with pytest.raises(ContractError):
        transformer_forward(list(range(tiny_config.max_len + 1)), params, tiny_config, z=z)


def test_empty_sequence_and_missing_code_are_rejected(tiny_config):
    plain = init_stack(tiny_config, np.random.default_rng(0), variant="none")
    with pytest.raises(ContractError):
        transformer_forward([], plain, tiny_config)
    styled = init_stack(tiny_config, np.random.default_rng(0), variant="D")
    with pytest.raises(ContractError):
        transformer_forward([1, 2], styled, tiny_config)


def test_variant_a_with_zero_code_matches_plain_stack(tiny_config):
    plain = init_stack(tiny_config, np.random.default_rng(3), variant="none")
    styled = init_stack(tiny_config, np.random.default_rng(3), variant="A")
    zero = Tensor(np.zeros(tiny_config.hidden_dim))
    _, l0 = transformer_forward([1, 2, 3], plain, tiny_config)
    _, l1 = transformer_forward([1, 2, 3], styled, tiny_config, z=zero)
    np.testing.assert_allclose(l0.data, l1.data, atol=1e-6)


def test_adaptive_layer_norm_reduces_to_layer_norm_with_constant_nets(tiny_config):
    B = tiny_config.hidden_dim
    rng = np.random.default_rng(0)
    h = Tensor(rng.normal(size=(5, B)))
    gamma_net = init_linear(rng, B, B)
    beta_net = init_linear(rng, B, B)
    gamma_net.w.data[...] = 0.0
    beta_net.w.data[...] = 0.0
    gamma_net.b.data[...] = 1.0
    beta_net.b.data[...] = 0.0
    out = adaptive_layer_norm(h, _code(tiny_config), gamma_net, beta_net, 1e-5)
    ref = layer_norm(h, Tensor(np.ones(B)), Tensor(np.zeros(B)), 1e-5)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-6)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)


def test_style_query_attention_matches_direct_computation(tiny_config):
    rng = np.random.default_rng(1)
    cfg = tiny_config
    layer = init_layer(cfg, rng, "C")
    h = Tensor(rng.normal(size=(4, cfg.hidden_dim)))
    z = _code(cfg, seed=2)
    out, weights = causal_attention(h, layer, cfg.n_heads, z, "C", return_weights=True)

    d = cfg.hidden_dim // cfg.n_heads
    q = z.data @ layer.style_query.w.data + layer.style_query.b.data
    k = h.data @ layer.k.w.data + layer.k.b.data
    v = h.data @ layer.v.w.data + layer.v.b.data
    heads = []
    for i in range(cfg.n_heads):
        sl = slice(i * d, (i + 1) * d)
        scores = np.tile(k[:, sl] @ q[sl], (4, 1)) / math.sqrt(d)
        scores[causal_mask(4)] = -np.inf
        w = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(weights.data[i], w, atol=1e-5)
        heads.append(w @ v[:, sl])
    expected = np.concatenate(heads, axis=-1) @ layer.o.w.data + layer.o.b.data
    np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_attention_weights_are_causal(tiny_config):
    rng = np.random.default_rng(1)
    layer = init_layer(tiny_config, rng, "none")
    _, weights = causal_attention(Tensor(rng.normal(size=(6, tiny_config.hidden_dim))), layer,
                                  tiny_config.n_heads, return_weights=True)
    assert np.all(weights.data[:, causal_mask(6)] < 1e-6)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-5)


def test_style_head_pools_over_positions(tiny_config):
    head = init_style_head(tiny_config.hidden_dim, np.random.default_rng(0))
    row = np.random.default_rng(1).normal(size=(1, tiny_config.hidden_dim))
    one = style_head(Tensor(row), head)
    many = style_head(Tensor(np.repeat(row, 5, axis=0)), head)
    assert one.shape == (tiny_config.hidden_dim,)
    np.testing.assert_allclose(one.data, many.data, atol=1e-6)


def test_named_parameters_are_stable_and_unique(tiny_config):
    params = init_stack(tiny_config, np.random.default_rng(0), variant="D")
    names = list(named_parameters(params))
    assert names[0] == "embeddings.tokens"
    assert "layers.0.ln1_gamma_net.w" in names
    assert len(names) == len(set(names)) == len(parameters(params))


def test_frozen_blocks_gradient_and_restores_flags(tiny_config):
    params = init_stack(tiny_config, np.random.default_rng(0), variant="none")
    with ag.Tape() as tape:
        with frozen(params):
            _, logits = transformer_forward([1, 2, 3], params, tiny_config)
            loss = ag.sum_(logits)
    assert len(tape) == 0
    assert not loss.requires_grad
    assert all(p.requires_grad for p in parameters(params))
