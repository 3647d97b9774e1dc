# core/objectives.py
"""
Generator losses (reconstruction, distillation from H, comparator style loss,
latent GAN), the discriminator's own loss, comparator BCE and the Frechet
embedding distance over pooled H features.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from config import PROB_FLOOR, LossWeights, ModelConfig
from . import autograd as ag
from .autograd import Tensor
from .corpus import BOS, StreamBatch
from .errors import ConfigurationError, ContractError
from .models import (
    ComparatorNet, DiscriminatorNet, GeneratorBundle, Sampling,
    comparator_score, discriminator_score, free_running_generate, lm_forward,
    paragraph_features, style_encode, teacher_forced_forward,
)
from .transformer import StackParams, frozen

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    lm: float
    dist: float
    style: float
    gan_generator: float
    total: float
    objective: Tensor                      # taped scalar behind `total`
    gan_discriminator: Optional[float] = None

    def as_record(self) -> dict:
        rec = {"lm": self.lm, "dist": self.dist, "style": self.style,
               "gan_generator": self.gan_generator, "total": self.total}
        if self.gan_discriminator is not None:
            rec["gan_discriminator"] = self.gan_discriminator
        return rec


def safe_log(p: Tensor, what: str = "probability") -> Tensor:
    """
    log(max(p, PROB_FLOOR)); warns when the floor is hit.
    """
    if np.any(p.data < PROB_FLOOR):
        logger.warning("%s saturated below %.0e, clamped before log", what, PROB_FLOOR)
    return ag.log(ag.clip(p, PROB_FLOOR, 1.0))


def _require(batch: StreamBatch, kind: str) -> None:
    if batch.kind != kind:
        raise ContractError(f"expected a {kind} batch, got {batch.kind}")


# =============================================================================
# Reconstruction stream
# =============================================================================
def loss_lm(batch: StreamBatch, bundle: GeneratorBundle, z: Optional[Tensor] = None,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Mean NLL of the target paragraph under F conditioned on the same-style reference.
    """
    _require(batch, "RS")
    logits, _ = teacher_forced_forward(batch.target, batch.reference, bundle, context=batch.context, z=z, rng=rng)
    return ag.cross_entropy(logits, batch.target)


def teacher_distribution(H: StackParams, tokens: Sequence[int], config: ModelConfig) -> np.ndarray:
    """
    H's next-token distributions along [BOS] + p[:-1], as constants.
    """
    tokens = list(map(int, tokens))
    with ag.no_grad():
        _, logits = lm_forward(H, [BOS] + tokens[:-1], config)
    return ag._softmax_np(logits.data.astype(np.float64), -1)


def loss_dist(batch: StreamBatch, bundle: GeneratorBundle, H: StackParams, z: Optional[Tensor] = None,
              student_logits: Optional[Tensor] = None) -> Tensor:
    """
    Cross-entropy of F's per-position distribution against H's, averaged over positions.
    """
    _require(batch, "RS")
    probs = teacher_distribution(H, batch.target, bundle.config)
    if student_logits is None:
        student_logits, _ = teacher_forced_forward(batch.target, batch.reference, bundle, context=batch.context, z=z)
    if student_logits.shape != probs.shape:
        raise ContractError(f"teacher {probs.shape} and student {student_logits.shape} alignments differ")
    return ag.soft_cross_entropy(probs, student_logits)


# =============================================================================
# Cross-style stream
# =============================================================================
@dataclass
class Continuation:
    tokens: np.ndarray
    features: Tensor          # F_f at the generated span, taped
    real_features: Tensor     # H_f(reference), constant


def continue_in_style(batch: StreamBatch, bundle: GeneratorBundle, H: StackParams, n_gen: int,
                      sampling: Optional[Sampling] = None, seed: int = 0,
                      z: Optional[Tensor] = None) -> Continuation:
    """
    One free-running rollout of psi(p_i) in the style of p_k plus the matching real features.
    """
    tokens, feats = free_running_generate(batch.context, batch.reference, bundle, n_gen, sampling, seed, z)
    with ag.no_grad():
        real = paragraph_features(H, batch.reference, bundle.config)
    return Continuation(tokens=tokens, features=feats, real_features=real.detach())


def loss_style(batch: StreamBatch, bundle: GeneratorBundle, H: StackParams, comparator: ComparatorNet,
               n_gen: int = 32, sampling: Optional[Sampling] = None, seed: int = 0,
               continuation: Optional[Continuation] = None) -> Tensor:
    """
    -log C(H_f(p_k), F_f(psi(p_i), p_k)); the comparator stays frozen.
    """
    _require(batch, "CS")
    cont = continuation or continue_in_style(batch, bundle, H, n_gen, sampling, seed)
    with frozen(comparator):
        score = comparator_score(cont.real_features, cont.features, comparator)
    return -safe_log(score, "comparator score")


def loss_gan_discriminator(batch: StreamBatch, bundle: GeneratorBundle, H: StackParams, D: DiscriminatorNet,
                           n_gen: int = 32, sampling: Optional[Sampling] = None, seed: int = 0,
                           continuation: Optional[Continuation] = None) -> Tensor:
    """
    -log D(real) - log(1 - D(fake)), with the generated features detached.
    """
    _require(batch, "CS")
    if continuation is None:
        with ag.no_grad():
            continuation = continue_in_style(batch, bundle, H, n_gen, sampling, seed)
    fake = continuation.features.detach()
    real = continuation.real_features
    d_real = discriminator_score(real, D, bundle.config)
    d_fake = discriminator_score(fake, D, bundle.config)
    return -safe_log(d_real, "D(real)") - safe_log(1.0 - d_fake, "1 - D(fake)")


def loss_gan_generator(batch: StreamBatch, bundle: GeneratorBundle, H: StackParams, D: DiscriminatorNet,
                       n_gen: int = 32, sampling: Optional[Sampling] = None, seed: int = 0,
                       continuation: Optional[Continuation] = None) -> Tensor:
    """
    Non-saturating generator term -log D(F_f features), D frozen.
    """
    _require(batch, "CS")
    cont = continuation or continue_in_style(batch, bundle, H, n_gen, sampling, seed)
    with frozen(D):
        d_fake = discriminator_score(cont.features, D, bundle.config)
    return -safe_log(d_fake, "D(fake)")


# =============================================================================
# Combined objective
# =============================================================================
def total_loss(rs_batch: StreamBatch, cs_batch: StreamBatch, bundle: GeneratorBundle, H: StackParams,
               comparator: ComparatorNet, discriminator: DiscriminatorNet, weights: LossWeights,
               n_gen: int = 32, sampling: Optional[Sampling] = None, seed: int = 0,
               rng: Optional[np.random.Generator] = None,
               continuation: Optional[Continuation] = None) -> LossBreakdown:
    """
    lm + w_dist * dist + w_style * style + w_gan * gan_generator over one RS and one CS item.
    """
    if rs_batch is None or cs_batch is None:
        raise ContractError("total_loss needs both an RS and a CS batch")
    if min(weights.dist, weights.style, weights.gan) < 0:
        raise ConfigurationError(f"loss weights must be nonnegative, got {weights.model_dump()}")
    _require(rs_batch, "RS")
    _require(cs_batch, "CS")

    z_rs = style_encode(rs_batch.reference, bundle) if bundle.variant != "none" else None
    logits, _ = teacher_forced_forward(rs_batch.target, rs_batch.reference, bundle,
                                       context=rs_batch.context, z=z_rs, rng=rng)
    lm = ag.cross_entropy(logits, rs_batch.target)
    dist = loss_dist(rs_batch, bundle, H, student_logits=logits)

    cont = continuation or continue_in_style(cs_batch, bundle, H, n_gen, sampling, seed)
    style = loss_style(cs_batch, bundle, H, comparator, continuation=cont)
    gan = loss_gan_generator(cs_batch, bundle, H, discriminator, continuation=cont)

    objective = lm + weights.dist * dist + weights.style * style + weights.gan * gan
    parts = (lm.item(), dist.item(), style.item(), gan.item())
    total = parts[0] + weights.dist * parts[1] + weights.style * parts[2] + weights.gan * parts[3]
    return LossBreakdown(lm=parts[0], dist=parts[1], style=parts[2], gan_generator=parts[3],
                         total=total, objective=objective)


# =============================================================================
# Comparator pretraining and FED
# =============================================================================
def comparator_pretrain_loss(features_a: Tensor, features_b: Tensor, same_style: bool,
                             comparator: ComparatorNet) -> Tensor:
    """
    Binary cross-entropy of the comparator's same-style probability against the 0/1 label.
    """
    score = comparator_score(features_a, features_b, comparator)
    if same_style:
        return -safe_log(score, "comparator score")
    return -safe_log(1.0 - score, "1 - comparator score")


def pooled_features(H: StackParams, paragraphs: Sequence[Sequence[int]], config: ModelConfig) -> np.ndarray:
    """
    Mean-pooled H_f vector per paragraph, [n x B] in float64.
    """
    rows = []
    with ag.no_grad():
        for p in paragraphs:
            rows.append(paragraph_features(H, p, config).data.mean(axis=0))
    return np.asarray(rows, dtype=np.float64)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fed(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """
    Frechet distance between Gaussian fits of two sets of pooled feature vectors.

    The cross term uses tr(sqrt(sqrt(S_a) S_b sqrt(S_a))), which equals
    tr(sqrt(S_a S_b)) and stays symmetric for PSD inputs.
    """
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"feature sets must be [n x dim] with equal dim, got {a.shape} and {b.shape}")
    dim = a.shape[1]
    for name, x in (("a", a), ("b", b)):
        if x.shape[0] < dim + 1:
            raise ContractError(f"set {name} has {x.shape[0]} samples, need >= {dim + 1} for a full-rank covariance")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)
