# core/corpus.py
"""
Styled documents, byte-level tokenization, the RS/CS stream samplers and the
synthetic multi-style corpus generator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from config import DEFAULT_N_CTX, DEFAULT_WINDOW
from .errors import ConfigurationError, ContractError
from .json_utils import iter_jsonl, load_json, write_jsonl

logger = logging.getLogger(__name__)

# --- Vocabulary: 256 byte values + specials ---
N_BYTES = 256
BOS, EOS, PAD, UNK = 256, 257, 258, 259
SPECIAL_TOKENS = {"<bos>": BOS, "<eos>": EOS, "<pad>": PAD, "<unk>": UNK}
VOCAB_SIZE = 260


def tokenize(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize(ids: Sequence[int]) -> str:
    raw = bytes(int(i) for i in ids if 0 <= int(i) < N_BYTES)
    return raw.decode("utf-8", errors="replace")


# =============================================================================
# Documents and corpora
# =============================================================================
@dataclass(frozen=True)
class Document:
    id: str
    style_label: int
    text: str


@dataclass
class StreamBatch:
    kind: Literal["RS", "CS"]
    context: np.ndarray
    reference: np.ndarray
    target: Optional[np.ndarray]
    style_label_context: int
    style_label_reference: int


class Corpus:
    """
    Immutable list of labelled documents with a per-style index and cached tokens.
    """

    def __init__(self, documents: Sequence[Document], style_names: Sequence[str]):
        self.documents: Tuple[Document, ...] = tuple(documents)
        self.style_names: Tuple[str, ...] = tuple(style_names)
        for doc in self.documents:
            if not 0 <= doc.style_label < len(self.style_names):
                raise ConfigurationError(f"document {doc.id} has label {doc.style_label} outside {len(self.style_names)} styles")
            if not doc.text:
                raise ConfigurationError(f"document {doc.id} is empty")
        self._tokens: Dict[int, np.ndarray] = {}
        self.by_style: Dict[int, List[int]] = {label: [] for label in range(len(self.style_names))}
        for i, doc in enumerate(self.documents):
            self.by_style[doc.style_label].append(i)

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def n_styles(self) -> int:
        return len(self.style_names)

    def tokens(self, index: int) -> np.ndarray:
        if index not in self._tokens:
            self._tokens[index] = tokenize(self.documents[index].text)
        return self._tokens[index]

    def label_counts(self) -> Dict[str, int]:
        return {name: len(self.by_style[label]) for label, name in enumerate(self.style_names)}

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.documents[i] for i in indices], self.style_names)


def load_corpus(path: Path) -> Corpus:
    """
    JSONL of {"id", "style", "text"}; style names become labels in first-appearance order.
    """
    names: List[str] = []
    docs: List[Document] = []
    for rec in iter_jsonl(path):
        try:
            style, text, doc_id = str(rec["style"]), str(rec["text"]), str(rec["id"])
        except KeyError as e:
            raise ConfigurationError(f"{path}: corpus record missing key {e}") from e
        if style not in names:
            names.append(style)
        docs.append(Document(id=doc_id, style_label=names.index(style), text=text))
    if not docs:
        raise ConfigurationError(f"{path}: corpus is empty")
    return Corpus(docs, names)


def save_corpus(corpus: Corpus, path: Path) -> None:
    write_jsonl(({"id": d.id, "style": corpus.style_names[d.style_label], "text": d.text}
                 for d in corpus.documents), path)


def split_corpus(corpus: Corpus, seed: int, fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
                 ) -> Tuple[Corpus, Corpus, Corpus]:
    """
    Seeded per-style shuffle, then train/validation/test cut by document.
    """
    rng = np.random.default_rng(seed)
    parts: Tuple[List[int], List[int], List[int]] = ([], [], [])
    for label in range(corpus.n_styles):
        idx = list(corpus.by_style[label])
        rng.shuffle(idx)
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple(corpus.subset(sorted(p)) for p in parts)  # type: ignore[return-value]


# =============================================================================
# Paragraph windows, psi and the two streams
# =============================================================================
def sample_paragraph(doc_tokens: np.ndarray, max_tokens: int, rng: np.random.Generator) -> np.ndarray:
    """
    Window of min(max_tokens, len) tokens at a uniformly drawn start offset.
    """
    n = len(doc_tokens)
    if n == 0:
        raise ContractError("cannot sample a paragraph from an empty document")
    window = min(max_tokens, n)
    start = int(rng.integers(0, n - window + 1))
    return np.asarray(doc_tokens[start:start + window])


def extract_context(paragraph_tokens: np.ndarray, n_ctx: int) -> np.ndarray:
    """
    psi: the leading n_ctx tokens of a paragraph.
    """
    if n_ctx < 1:
        raise ContractError("n_ctx must be >= 1")
    if len(paragraph_tokens) == 0:
        raise ContractError("cannot extract context from an empty paragraph")
    return np.asarray(paragraph_tokens[:n_ctx])


def _check_streams(corpus: Corpus, kind: str) -> None:
    if kind == "RS":
        thin = [corpus.style_names[l] for l, idx in corpus.by_style.items() if len(idx) < 2]
        if thin:
            raise ConfigurationError(f"reconstruction stream needs >=2 documents per style; short: {thin}")
    else:
        populated = [l for l, idx in corpus.by_style.items() if idx]
        if len(populated) < 2:
            raise ConfigurationError("cross-style stream needs documents from >=2 styles")


def sample_rs_batch(corpus: Corpus, rng: np.random.Generator, window: int = DEFAULT_WINDOW,
                    n_ctx: int = DEFAULT_N_CTX) -> StreamBatch:
    """
    Two documents of one style: context = psi(p_i), reference = p_j, target = p_i.
    """
    _check_streams(corpus, "RS")
    label = int(rng.integers(0, corpus.n_styles))
    i, j = rng.choice(corpus.by_style[label], size=2, replace=False)
    p_i = sample_paragraph(corpus.tokens(int(i)), window, rng)
    p_j = sample_paragraph(corpus.tokens(int(j)), window, rng)
    return StreamBatch(kind="RS", context=extract_context(p_i, n_ctx), reference=p_j, target=p_i,
                       style_label_context=label, style_label_reference=label)


def sample_cs_batch(corpus: Corpus, rng: np.random.Generator, window: int = DEFAULT_WINDOW,
                    n_ctx: int = DEFAULT_N_CTX) -> StreamBatch:
    """
    Documents of two different styles: context = psi(p_i), reference = p_k.
    """
    _check_streams(corpus, "CS")
    populated = [l for l, idx in corpus.by_style.items() if idx]
    l_i = int(rng.choice(populated))
    l_k = int(rng.choice([l for l in populated if l != l_i]))
    i = int(rng.choice(corpus.by_style[l_i]))
    k = int(rng.choice(corpus.by_style[l_k]))
    p_i = sample_paragraph(corpus.tokens(i), window, rng)
    p_k = sample_paragraph(corpus.tokens(k), window, rng)
    return StreamBatch(kind="CS", context=extract_context(p_i, n_ctx), reference=p_k, target=None,
                       style_label_context=l_i, style_label_reference=l_k)


# =============================================================================
# Synthetic styles
# =============================================================================
class StyleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    alphabet: str
    weights: List[float]
    min_len: int
    max_len: int
    line_len: int
    template: Literal["prose", "report", "lyrics"] = "prose"

    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


def validate_style_specs(specs: Sequence[StyleSpec], max_overlap: float = 0.5) -> None:
    """
    Raise ConfigurationError for degenerate specs or alphabets that overlap too much.
    """
    if len(specs) < 2:
        raise ConfigurationError("need at least two style specs")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate style names in {names}")
    for s in specs:
        if not s.alphabet or len(s.weights) != len(s.alphabet):
            raise ConfigurationError(f"style {s.name}: weights must match alphabet length")
        if any(w < 0 for w in s.weights) or sum(s.weights) <= 0:
            raise ConfigurationError(f"style {s.name}: weights must be nonnegative with positive sum")
        if not 1 <= s.min_len <= s.max_len or s.line_len < 1:
            raise ConfigurationError(f"style {s.name}: need 1 <= min_len <= max_len and line_len >= 1")
    for a, b in combinations(specs, 2):
        pa = dict(zip(a.alphabet, a.probabilities()))
        pb = dict(zip(b.alphabet, b.probabilities()))
        overlap = sum(min(pa[c], pb[c]) for c in set(pa) & set(pb))
        if overlap > max_overlap:
            raise ConfigurationError(f"styles {a.name} and {b.name} overlap {overlap:.0%} by weight")


def load_style_specs(path: Path) -> List[StyleSpec]:
    raw = load_json(path)
    if not isinstance(raw, list):
        raise ConfigurationError(f"{path}: expected a JSON array of style specs")
    try:
        specs = [StyleSpec(**item) for item in raw]
    except (ValidationError, TypeError) as e:
        raise ConfigurationError(f"{path}: invalid style spec ({e})") from e
    validate_style_specs(specs)
    return specs


def _word(spec: StyleSpec, probs: np.ndarray, rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 8))
    return "".join(rng.choice(list(spec.alphabet), size=n, p=probs))


def _render_prose(spec: StyleSpec, probs, rng, target: int) -> str:
    out, line = [], 0
    while sum(map(len, out)) < target:
        words = [_word(spec, probs, rng) for _ in range(int(rng.integers(4, 11)))]
        sentence = " ".join(words) + ". "
        if line + len(sentence) > spec.line_len:
            out.append("\n")
            line = 0
        out.append(sentence)
        line += len(sentence)
    return "".join(out)


def _render_report(spec: StyleSpec, probs, rng, target: int) -> str:
    lines = []
    while sum(len(l) + 1 for l in lines) < target:
        groups, width = [], 0
        while width < spec.line_len:
            g = _word(spec, probs, rng)
            groups.append(g)
            width += len(g) + 1
        lines.append(" ".join(groups))
    return "\n".join(lines)


def _render_lyrics(spec: StyleSpec, probs, rng, target: int) -> str:
    stanza = []
    for _ in range(int(rng.integers(2, 5))):
        words, width = [], 0
        while width < spec.line_len:
            w = _word(spec, probs, rng)
            words.append(w)
            width += len(w) + 1
        stanza.append(" ".join(words))
    block = "\n".join(stanza) + "\n\n"
    return block * (target // len(block) + 1)


_RENDERERS = {"prose": _render_prose, "report": _render_report, "lyrics": _render_lyrics}


def render_document(spec: StyleSpec, rng: np.random.Generator) -> str:
    target = int(rng.integers(spec.min_len, spec.max_len + 1))
    text = _RENDERERS[spec.template](spec, spec.probabilities(), rng, target)
    text = text[:target].rstrip()
    return text or spec.alphabet[0]


def synth_corpus(specs: Sequence[StyleSpec], docs_per_style: int, seed: int) -> Corpus:
    """
    Deterministic synthetic corpus: docs_per_style documents per spec, in spec order.
    """
    validate_style_specs(specs)
    if docs_per_style < 1:
        raise ConfigurationError("docs_per_style must be >= 1")
    rng = np.random.default_rng(seed)
    docs: List[Document] = []
    for label, spec in enumerate(specs):
        for i in range(docs_per_style):
            docs.append(Document(id=f"{spec.name}-{i:05d}", style_label=label, text=render_document(spec, rng)))
    logger.info("synthesised %d documents over %d styles", len(docs), len(specs))
    return Corpus(docs, [s.name for s in specs])
