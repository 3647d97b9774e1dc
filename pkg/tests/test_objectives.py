import logging
import math

import numpy as np
import pytest

from config import LossWeights
from core import autograd as ag
from core.corpus import sample_cs_batch, sample_rs_batch
from core.errors import ConfigurationError, ContractError
from core.models import init_generator_from_lm, new_generator, new_language_model
from core.objectives import (
    comparator_pretrain_loss, continue_in_style, fed, loss_dist, loss_gan_discriminator, loss_gan_generator,
    loss_lm, loss_style, pooled_features, teacher_distribution, total_loss,
)
from core.transformer import parameters

N_GEN = 6


def _rs(corpus, seed=0):
    return sample_rs_batch(corpus, np.random.default_rng(seed), window=16, n_ctx=6)


def _cs(corpus, seed=0):
    return sample_cs_batch(corpus, np.random.default_rng(seed), window=16, n_ctx=6)


def _grads_all_zero(obj) -> bool:
    return all(p.grad is None or not np.any(p.grad) for p in parameters(obj))


def _neutral(net):
    net.out.w.data[...] = 0.0
    net.out.b.data[...] = 0.0
    return net


def test_lm_loss_of_uniform_decoder_is_log_vocab(tiny_corpus, make_bundle):
    bundle = make_bundle("D")
    bundle.decoder.embeddings.tokens.data[...] = 0.0
    loss = loss_lm(_rs(tiny_corpus), bundle)
    assert loss.item() == pytest.approx(math.log(260), abs=1e-4)


def test_lm_loss_needs_a_reconstruction_batch(tiny_corpus, make_bundle):
    with pytest.raises(ContractError):
        loss_lm(_cs(tiny_corpus), make_bundle("D"))


def test_distillation_of_h_initialised_generator_equals_teacher_entropy(tiny_corpus, lm, make_bundle):
    batch = _rs(tiny_corpus)
    bundle = init_generator_from_lm(lm, make_bundle("A"))
    probs = teacher_distribution(lm, batch.target, bundle.config)
    entropy = float(-(probs * np.log(probs)).sum(axis=-1).mean())
    assert loss_dist(batch, bundle, lm).item() == pytest.approx(entropy, abs=1e-4)


def test_distillation_is_never_below_teacher_entropy(tiny_corpus, lm, make_bundle):
    for seed in range(3):
        batch = _rs(tiny_corpus, seed)
        bundle = make_bundle("D", seed=seed)
        probs = teacher_distribution(lm, batch.target, bundle.config)
        entropy = float(-(probs * np.log(probs)).sum(axis=-1).mean())
        assert loss_dist(batch, bundle, lm).item() >= entropy - 1e-5


def test_distillation_sends_no_gradient_to_h(tiny_corpus, lm, make_bundle):
    bundle = make_bundle("D")
    with ag.Tape() as tape:
        loss = loss_dist(_rs(tiny_corpus), bundle, lm)
    tape.backward(loss)
    assert _grads_all_zero(lm)
    assert not _grads_all_zero(bundle.decoder)


def test_distillation_gradient_matches_finite_differences(tiny_config, tiny_corpus):
    batch = _rs(tiny_corpus, seed=4)
    with ag.precision(np.float64):
        H = new_language_model(tiny_config, seed=1)
        bundle = new_generator(tiny_config, "D", seed=2)
        p = bundle.decoder.ln_f.beta
        with ag.Tape() as tape:
            loss = loss_dist(batch, bundle, H)
        tape.backward(loss)
        analytic = p.grad.copy()
        eps = 1e-6
        for i in range(4):
            old = p.data[i]
            p.data[i] = old + eps
            up = loss_dist(batch, bundle, H).item()
            p.data[i] = old - eps
            down = loss_dist(batch, bundle, H).item()
            p.data[i] = old
            assert analytic[i] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-7)


def test_style_loss_at_even_odds_is_log_two(tiny_corpus, lm, comparator, make_bundle):
    _neutral(comparator)
    loss = loss_style(_cs(tiny_corpus), make_bundle("A"), lm, comparator, n_gen=N_GEN)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_style_loss_clamps_and_warns_on_a_certain_comparator(tiny_corpus, lm, comparator, make_bundle, caplog):
    comparator.out.w.data[...] = 0.0
    comparator.out.b.data[...] = -1e4
    with caplog.at_level(logging.WARNING, logger="core.objectives"):
        loss = loss_style(_cs(tiny_corpus), make_bundle("A"), lm, comparator, n_gen=N_GEN)
    assert loss.item() == pytest.approx(-math.log(1e-7), rel=1e-5)
    assert "clamped" in caplog.text


def test_style_loss_trains_the_generator_not_the_comparator(tiny_corpus, lm, comparator, make_bundle):
    bundle = make_bundle("A")
    with ag.Tape() as tape:
        loss = loss_style(_cs(tiny_corpus), bundle, lm, comparator, n_gen=N_GEN)
    tape.backward(loss)
    assert _grads_all_zero(comparator)
    assert _grads_all_zero(lm)
    assert not _grads_all_zero(bundle.head)
    assert all(p.requires_grad for p in parameters(comparator))


def test_gan_losses_at_even_odds(tiny_corpus, lm, discriminator, make_bundle):
    _neutral(discriminator)
    bundle = make_bundle("D")
    batch = _cs(tiny_corpus)
    with ag.Tape() as tape:
        cont = continue_in_style(batch, bundle, lm, N_GEN)
        g_loss = loss_gan_generator(batch, bundle, lm, discriminator, continuation=cont)
    tape.backward(g_loss)
    assert g_loss.item() == pytest.approx(math.log(2), abs=1e-6)
    assert _grads_all_zero(discriminator)

    d_loss = loss_gan_discriminator(batch, bundle, lm, discriminator, continuation=cont)
    assert d_loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_discriminator_update_never_reaches_the_generator(tiny_corpus, lm, discriminator, make_bundle):
    bundle = make_bundle("D")
    with ag.Tape() as tape:
        loss = loss_gan_discriminator(_cs(tiny_corpus), bundle, lm, discriminator, n_gen=N_GEN)
    tape.backward(loss)
    assert _grads_all_zero(bundle)
    assert _grads_all_zero(lm)
    assert not _grads_all_zero(discriminator)


def test_total_loss_is_the_weighted_sum_of_its_parts(tiny_corpus, lm, comparator, discriminator, make_bundle):
    weights = LossWeights(dist=0.5, style=0.2, gan=0.3)
    out = total_loss(_rs(tiny_corpus), _cs(tiny_corpus), make_bundle("D"), lm, comparator, discriminator,
                     weights, n_gen=N_GEN)
    expected = out.lm + 0.5 * out.dist + 0.2 * out.style + 0.3 * out.gan_generator
    assert out.total == pytest.approx(expected, abs=1e-12)
    assert out.objective.item() == pytest.approx(out.total, rel=1e-5)
    assert set(out.as_record()) == {"lm", "dist", "style", "gan_generator", "total"}


def test_total_loss_with_zero_weights_is_the_lm_loss(tiny_corpus, lm, comparator, discriminator, make_bundle):
    bundle = make_bundle("D")
    rs = _rs(tiny_corpus)
    out = total_loss(rs, _cs(tiny_corpus), bundle, lm, comparator, discriminator,
                     LossWeights(dist=0.0, style=0.0, gan=0.0), n_gen=N_GEN)
    assert out.total == pytest.approx(loss_lm(rs, bundle).item(), rel=1e-6)


def test_total_loss_rejects_negative_weights_and_missing_batches(tiny_corpus, lm, comparator, discriminator,
                                                                  make_bundle):
    bundle = make_bundle("D")
    with pytest.raises(ConfigurationError):
        total_loss(_rs(tiny_corpus), _cs(tiny_corpus), bundle, lm, comparator, discriminator,
                   LossWeights(dist=-1.0), n_gen=N_GEN)
    with pytest.raises(ContractError):
        total_loss(_rs(tiny_corpus), None, bundle, lm, comparator, discriminator, LossWeights(), n_gen=N_GEN)


def test_comparator_pretrain_loss_at_even_odds(lm, comparator, tiny_config):
    _neutral(comparator)
    fa = ag.Tensor(np.ones((3, tiny_config.hidden_dim)))
    assert comparator_pretrain_loss(fa, fa, True, comparator).item() == pytest.approx(math.log(2), abs=1e-6)
    assert comparator_pretrain_loss(fa, fa, False, comparator).item() == pytest.approx(math.log(2), abs=1e-6)


def test_pooled_features_shape(lm, tiny_config):
    feats = pooled_features(lm, [[1, 2, 3], [4, 5]], tiny_config)
    assert feats.shape == (2, tiny_config.hidden_dim)
    assert feats.dtype == np.float64


def test_fed_closed_forms():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(400, 3)) @ np.diag([1.0, 2.0, 0.5]) + 1.0
    assert fed(a, a) == pytest.approx(0.0, abs=1e-6)
    shift = np.array([1.0, -2.0, 0.5])
    assert fed(a, a + shift) == pytest.approx(float((shift ** 2).sum()), rel=1e-6)
    cov = np.cov(a, rowvar=False)
    mu = a.mean(axis=0)
    assert fed(a, 2 * a) == pytest.approx(float((mu ** 2).sum() + np.trace(cov)), rel=1e-6)


def test_fed_is_symmetric_and_nonnegative():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(50, 4)), rng.normal(size=(60, 4)) * 1.5 + 0.2
    assert fed(a, b) == pytest.approx(fed(b, a), rel=1e-8)
    assert fed(a, b) > 0


def test_fed_needs_more_samples_than_dimensions():
    rng = np.random.default_rng(2)
    with pytest.raises(ContractError):
        fed(rng.normal(size=(4, 4)), rng.normal(size=(10, 4)))
    with pytest.raises(ContractError):
        fed(rng.normal(size=(10, 4)), rng.normal(size=(10, 3)))
