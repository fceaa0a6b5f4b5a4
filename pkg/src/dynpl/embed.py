"""CBOW word embeddings with negative sampling, plus word2vec text-format IO."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .corpus import PAD_ID, UNK_ID, Vocabulary
from .numerics import scatter_add
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray
    vocab: Vocabulary
    trained_on: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.vocab):
            raise ValueError("embedding rows must match the vocabulary size")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < self.vectors.shape[0]:
            raise IndexError(f"token id {token_id} outside [0, {self.vectors.shape[0]})")
        return self.vectors[token_id]

    def save_word2vec(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.vectors.shape[0]} {self.vectors.shape[1]}\n")
            for tok, row in zip(self.vocab.tokens, self.vectors):
                fh.write(tok + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_word2vec(path, vocab: Vocabulary, seed: int = 0) -> EmbeddingMatrix:
    """Read word2vec text format; vocabulary tokens absent from the file get random rows."""
    found = {}
    with open(path, encoding="utf-8") as fh:
        n, dim = (int(x) for x in fh.readline().split())
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise DataError(f"bad word2vec line for token {parts[0]!r}")
            found[parts[0]] = np.array([float(x) for x in parts[1:]])
    rng = np.random.default_rng(seed)
    known = np.array(list(found.values())) if found else np.zeros((1, dim))
    scale = float(known.std()) or 0.1
    vectors = np.empty((len(vocab), dim))
    missing = 0
    for i, tok in enumerate(vocab.tokens):
        if tok in found:
            vectors[i] = found[tok]
        else:
            vectors[i] = rng.normal(0.0, scale, dim)
            missing += 1
    vectors[PAD_ID] = 0.0
    if missing:
        logger.info("%d vocabulary tokens not in %s; randomly initialized", missing, path)
    return EmbeddingMatrix(vectors, vocab)


def _keep_probs(counts: np.ndarray, sample: float) -> np.ndarray:
    total = counts.sum()
    f = np.maximum(counts, 1) / total
    if sample <= 0:
        return np.ones_like(f)
    return np.minimum(1.0, (np.sqrt(f / sample) + 1.0) * sample / f)


def train_cbow(
    notes: Iterable[Sequence[str]] | Iterable[tuple[str, Sequence[str]]],
    vocab: Vocabulary,
    dim: int = 100,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    alpha: float = 0.025,
    min_alpha: float = 0.0001,
    sample: float = 1e-3,
    seed: int = 0,
    batch_size: int = 256,
    exclude_patients: Iterable[str] = (),
) -> EmbeddingMatrix:
    """Continuous bag-of-words with negative sampling.

    ``notes`` are token lists, or ``(patient_id, tokens)`` pairs when
    provenance matters: notes of ``exclude_patients`` are dropped and the
    result records which patients were read. Out-of-vocabulary tokens are
    skipped; the UNK row keeps a random initialization and the pad row is
    zero. Updates are applied in mini-batches of centre words (conflicting
    rows accumulate) with a linearly decaying rate; single-threaded and
    deterministic for a given seed.
    """
    if dim <= 0:
        raise ValueError("embedding dimension must be positive")
    excluded = set(exclude_patients)
    seen = set()
    docs = []
    for item in notes:
        if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], str) and not isinstance(item[1], str):
            pid, toks = item
            if pid in excluded:
                continue
            seen.add(pid)
        else:
            toks = item
        ids = vocab.encode(toks)
        ids = ids[(ids != UNK_ID) & (ids != PAD_ID)]
        if ids.size:
            docs.append(ids)
    if not docs:
        raise DataError("empty corpus for embedding training")

    rng = np.random.default_rng(seed)
    V = len(vocab)
    w_in = (rng.random((V, dim)) - 0.5) / dim
    w_out = np.zeros((V, dim))

    stream = np.concatenate(docs)
    doc_id = np.repeat(np.arange(len(docs)), [d.size for d in docs])
    counts = np.bincount(stream, minlength=V).astype(np.float64)
    keep_p = _keep_probs(counts, sample)
    noise = counts**0.75
    noise[PAD_ID] = noise[UNK_ID] = 0.0
    noise_cdf = np.cumsum(noise / noise.sum())

    total_words = epochs * stream.size
    processed = 0
    offsets = np.array([o for o in range(-window, window + 1) if o != 0])
    for epoch in range(epochs):
        keep = rng.random(stream.size) < keep_p[stream]
        toks, docs_e = stream[keep], doc_id[keep]
        n = toks.size
        if n < 2:
            continue
        reduced = rng.integers(1, window + 1, size=n)
        pos = np.arange(n)[:, None] + offsets[None, :]
        valid = (pos >= 0) & (pos < n)
        posc = np.clip(pos, 0, n - 1)
        valid &= docs_e[posc] == docs_e[:, None]
        valid &= np.abs(offsets)[None, :] <= reduced[:, None]
        ctx = np.where(valid, toks[posc], -1)
        has_ctx = valid.any(axis=1)
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            lr = max(min_alpha, alpha * (1.0 - processed / total_words))
            processed += sl.stop - sl.start
            c = ctx[sl][has_ctx[sl]]
            centre = toks[sl][has_ctx[sl]]
            if centre.size == 0:
                continue
            m = c >= 0
            cnt = m.sum(axis=1, keepdims=True)
            h = (w_in[np.where(m, c, 0)] * m[..., None]).sum(axis=1) / cnt
            neg = np.searchsorted(noise_cdf, rng.random((centre.size, negatives)))
            targets = np.concatenate([centre[:, None], neg], axis=1)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            wt = w_out[targets]
            f = expit(np.einsum("bd,bkd->bk", h, wt))
            g = (labels - f) * lr
            g[:, 1:][neg == centre[:, None]] = 0.0
            neu1e = np.einsum("bk,bkd->bd", g, wt)
            scatter_add(w_out, targets.ravel(), (g[..., None] * h[:, None, :]).reshape(-1, dim))
            scatter_add(w_in, c[m], np.repeat(neu1e, m.sum(axis=1), axis=0))
        logger.debug("cbow epoch %d done (lr %.5f)", epoch, lr)

    scale = float(w_in[4:].std()) if V > 4 else 0.1
    w_in[UNK_ID] = np.random.default_rng([seed, 1]).normal(0.0, scale or 0.1, dim)
    w_in[PAD_ID] = 0.0
    if not np.all(np.isfinite(w_in)):
        raise FloatingPointError("non-finite embedding after CBOW training")
    return EmbeddingMatrix(w_in, vocab, frozenset(seen))
