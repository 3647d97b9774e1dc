# core/classify.py
"""
One binary style classifier per style: logistic regression on frozen,
mean-pooled H features.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Protocol, Tuple

import numpy as np
from sklearn.linear_model import LogisticRegression

from config import ModelConfig
from .corpus import Corpus, sample_paragraph
from .errors import ConfigurationError
from .objectives import pooled_features
from .transformer import StackParams

logger = logging.getLogger(__name__)


class StyleClassifier(Protocol):
    def predict(self, features: np.ndarray) -> np.ndarray: ...


@dataclass
class LogisticStyleClassifier:
    style: str
    label: int
    model: LogisticRegression

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.model.predict(np.atleast_2d(features)).astype(np.int64)


def sample_labelled_features(corpus: Corpus, H: StackParams, config: ModelConfig, window: int,
                             seed: int, per_doc: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pooled H features of `per_doc` random windows from every document, with style labels.
    """
    rng = np.random.default_rng(seed)
    paragraphs: List[np.ndarray] = []
    labels: List[int] = []
    for i, doc in enumerate(corpus.documents):
        for _ in range(per_doc):
            paragraphs.append(sample_paragraph(corpus.tokens(i), window, rng))
            labels.append(doc.style_label)
    return pooled_features(H, paragraphs, config), np.asarray(labels, dtype=np.int64)


def train_style_classifiers(corpus: Corpus, H: StackParams, config: ModelConfig, window: int,
                            seed: int, per_doc: int = 1) -> Dict[int, LogisticStyleClassifier]:
    """
    Fit one-vs-rest classifiers, keyed by style label.
    """
    if corpus.n_styles < 2:
        raise ConfigurationError("style classifiers need at least two styles")
    X, y = sample_labelled_features(corpus, H, config, window, seed, per_doc)
    classifiers: Dict[int, LogisticStyleClassifier] = {}
    for label, name in enumerate(corpus.style_names):
        target = (y == label).astype(np.int64)
        if target.min() == target.max():
            raise ConfigurationError(f"style {name} has no positive or no negative examples")
        model = LogisticRegression(max_iter=2000, class_weight="balanced", random_state=seed)
        model.fit(X, target)
        classifiers[label] = LogisticStyleClassifier(style=name, label=label, model=model)
    logger.info("trained %d style classifiers on %d paragraphs", len(classifiers), len(y))
    return classifiers


def classifier_accuracy(classifiers: Mapping[int, StyleClassifier], X: np.ndarray, y: np.ndarray) -> Dict[int, float]:
    """
    Held-out binary accuracy of each classifier.
    """
    return {label: float((classifier.predict(X) == (y == label)).mean()) for label, classifier in classifiers.items()}
