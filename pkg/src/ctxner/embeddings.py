"""Word and character representations.

Word lookup is case-insensitive (tokens are lowercased before lookup);
the character channel sees the original casing.
"""

from __future__ import annotations

import io
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, concat, conv1d_maxpool, stack, take_rows, tanh

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

REGIMES = ("SG300", "G50W", "G300W", "G300C", "custom")


class EmbeddingFormatError(ValueError):
    """A pre-trained vector file is malformed."""


class Vocabulary:
    """Bidirectional token/id map with PAD=0 and UNK=1 reserved."""

    def __init__(self, tokens: Sequence[str] = (), lowercase: bool = True):
        self.lowercase = lowercase
        self.id_to_token: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.token_to_id: dict[str, int] = {}
        for tok in tokens:
            if tok in self.token_to_id:
                raise ValueError(f"duplicate token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return self._norm(token) in self.token_to_id

    def _norm(self, token: str) -> str:
        return token.lower() if self.lowercase else token

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(self._norm(token), UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def tokens(self) -> list[str]:
        """Real tokens in id order (specials excluded)."""
        return self.id_to_token[2:]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.lowercase == other.lowercase
            and self.id_to_token == other.id_to_token
        )


def build_vocab(corpus_tokens: Iterable[str], min_count: int = 1, lowercase: bool = True) -> Vocabulary:
    """Order by descending frequency, then lexicographically."""
    counts = Counter(t.lower() if lowercase else t for t in corpus_tokens)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, lowercase=lowercase)


@dataclass
class EmbeddingTable:
    vectors: Tensor
    frozen: bool = True
    source_tag: str = "custom"

    def __post_init__(self):
        if self.source_tag not in REGIMES:
            raise ValueError(f"unknown embedding regime {self.source_tag!r}")
        self.vectors.requires_grad = not self.frozen

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _fill_missing(n_rows: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5 / d, 0.5 / d, size=(n_rows, d))


def random_table(vocab: Vocabulary, d: int, seed: int = 0, frozen: bool = True) -> EmbeddingTable:
    """Uniform(-0.5/d, 0.5/d) rows; PAD and UNK rows are zero."""
    vecs = _fill_missing(len(vocab), d, seed)
    vecs[PAD] = 0.0
    vecs[UNK] = 0.0
    return EmbeddingTable(Tensor(vecs), frozen=frozen, source_tag="custom")


def _is_header(fields: list[str]) -> bool:
    if len(fields) != 2:
        return False
    return all(f.isdigit() for f in fields)


def read_vectors(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    """Parse a GloVe/word2vec-style text file into ``{token: vector}``."""
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    declared: int | None = None
    with io.open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").rstrip("\r").split(" ")
            if fields == [""]:
                continue
            if lineno == 1 and _is_header(fields):
                declared = int(fields[1])
                continue
            token, values = fields[0], fields[1:]
            want = declared if declared is not None else dim
            if want is not None and len(values) != want:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {want} values, found {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            if vec.size == 0:
                raise EmbeddingFormatError(f"{path}:{lineno}: token {token!r} has no values")
            if dim is None:
                dim = vec.size
            vectors.setdefault(token, vec)
    if dim is None:
        raise EmbeddingFormatError(f"{path}: no vectors found")
    return vectors, dim


def load_pretrained(path: str | Path, vocab: Vocabulary, source_tag: str = "custom", seed: int = 0) -> EmbeddingTable:
    """Frozen table for ``vocab``; rows absent from the file are drawn uniformly."""
    found, d = read_vectors(path)
    table = _fill_missing(len(vocab), d, seed)
    table[PAD] = 0.0
    table[UNK] = 0.0
    hits = 0
    for idx, tok in enumerate(vocab.id_to_token[2:], start=2):
        vec = found.get(tok)
        if vec is None and vocab.lowercase:
            vec = found.get(tok.lower())
        if vec is not None:
            table[idx] = vec
            hits += 1
    log.info("pre-trained vectors: %d/%d vocabulary tokens found in %s", hits, len(vocab) - 2, path)
    return EmbeddingTable(Tensor(table), frozen=True, source_tag=source_tag)


def write_vectors(path: str | Path, vocab: Vocabulary, table: EmbeddingTable) -> None:
    """Write real-token rows in the text format ``load_pretrained`` reads (with header)."""
    data = table.vectors.data
    with io.open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(vocab) - 2} {data.shape[1]}\n")
        for idx, tok in enumerate(vocab.id_to_token[2:], start=2):
            fh.write(tok + " " + " ".join(repr(float(x)) for x in data[idx]) + "\n")


# ------------------------------------------------------------------------ SGNS


def fit_sgns_vectors(
    sentences: Sequence[Sequence[str]],
    vocab: Vocabulary,
    d: int = 300,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Skip-gram with negative sampling; returns (center, context) matrices.

    Updates are SGD per center word, all of its window contexts and their
    negatives handled in one vectorised step. The learning rate decays
    linearly to 1e-4 of its initial value over all epochs.
    """
    rng = np.random.default_rng(seed)
    encoded = [np.array([i for i in vocab.encode(s) if i > UNK], dtype=np.int64) for s in sentences]
    encoded = [s for s in encoded if s.size > 1]
    n_pairs = sum(min(window, s.size - 1) for s in encoded)
    if not encoded or n_pairs == 0:
        raise ValueError("corpus too small: no (center, context) pair within the window")
    counts = np.zeros(len(vocab))
    for s in encoded:
        np.add.at(counts, s, 1.0)
    if np.count_nonzero(counts) < 2:
        raise ValueError("SGNS needs at least 2 distinct in-vocabulary tokens")
    noise = counts**0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    center = (rng.random((len(vocab), d)) - 0.5) / d
    context = np.zeros((len(vocab), d))
    total_words = epochs * sum(s.size for s in encoded)
    seen = 0
    for _ in range(epochs):
        for sent in encoded:
            n = sent.size
            for pos in range(n):
                alpha = max(lr * (1.0 - seen / total_words), lr * 1e-4)
                seen += 1
                lo, hi = max(0, pos - window), min(n, pos + window + 1)
                ctx = np.concatenate([sent[lo:pos], sent[pos + 1:hi]])
                if ctx.size == 0:
                    continue
                neg = np.searchsorted(noise_cdf, rng.random((ctx.size, negatives)), side="right")
                neg = np.minimum(neg, len(vocab) - 1)
                targets = np.concatenate([ctx[:, None], neg], axis=1).ravel()
                labels = np.zeros((ctx.size, negatives + 1))
                labels[:, 0] = 1.0
                labels = labels.ravel()
                # a negative equal to its positive context carries no signal
                keep = np.ones_like(labels, dtype=bool)
                keep.reshape(ctx.size, -1)[:, 1:] = neg != ctx[:, None]
                targets, labels = targets[keep], labels[keep]

                v = center[sent[pos]]
                u = context[targets]
                score = u @ v
                g = alpha * (labels - 1.0 / (1.0 + np.exp(-score)))
                center[sent[pos]] += g @ u
                np.add.at(context, targets, np.outer(g, v))
    center[PAD] = 0.0
    center[UNK] = 0.0
    return center, context


def train_sgns(
    sentences: Sequence[Sequence[str]],
    vocab: Vocabulary,
    d: int = 300,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
) -> EmbeddingTable:
    center, _ = fit_sgns_vectors(sentences, vocab, d, window, negatives, epochs, lr, seed)
    return EmbeddingTable(Tensor(center), frozen=True, source_tag="SG300")


# ------------------------------------------------------------------ char-CNN


class CharVocabulary(Vocabulary):
    """Case-sensitive character map; shares the PAD/UNK convention."""

    def __init__(self, chars: Sequence[str] = ()):
        super().__init__(chars, lowercase=False)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "CharVocabulary":
        chars = sorted({c for tok in tokens for c in tok})
        return cls(chars)


@dataclass
class CharCnnParams:
    vocab: CharVocabulary
    char_embedding: Tensor
    filters: Tensor
    bias: Tensor

    @classmethod
    def init(cls, vocab: CharVocabulary, char_dim: int = 30, n_filters: int = 100,
             rng: np.random.Generator | None = None) -> "CharCnnParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = np.sqrt(3.0 / char_dim)
        emb = rng.uniform(-scale, scale, size=(len(vocab), char_dim))
        emb[PAD] = 0.0
        fan_in, fan_out = 3 * char_dim, n_filters
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        filt = rng.uniform(-bound, bound, size=(n_filters, 3 * char_dim))
        return cls(
            vocab,
            Tensor(emb, requires_grad=True, name="char.embedding"),
            Tensor(filt, requires_grad=True, name="char.filters"),
            Tensor(np.zeros(n_filters), requires_grad=True, name="char.bias"),
        )

    @property
    def out_dim(self) -> int:
        return self.filters.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"char.embedding": self.char_embedding, "char.filters": self.filters, "char.bias": self.bias}


def encode_word_chars(word: str, params: CharCnnParams) -> Tensor:
    if not word:
        raise ValueError("cannot encode an empty word")
    ids = [params.vocab.lookup(c) for c in word]
    chars = take_rows(params.char_embedding, ids)
    return tanh(conv1d_maxpool(chars, params.filters, params.bias))


def embed_sequence(
    tokens: Sequence[str],
    vocab: Vocabulary,
    word_table: EmbeddingTable,
    char_params: CharCnnParams | None = None,
) -> Tensor:
    """T x (d_word [+ F]) input matrix for one utterance."""
    if not tokens:
        raise ValueError("embed_sequence needs at least one token")
    words = take_rows(word_table.vectors, vocab.encode(tokens))
    if char_params is None:
        return words
    chars = stack([encode_word_chars(tok, char_params) for tok in tokens])
    return concat([words, chars], axis=1)
