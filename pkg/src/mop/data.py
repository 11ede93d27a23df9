"""Synthetic Markov corpora, byte-level file ingestion, calibration and tune subsets.

Documents are split in order into train (first 80%), calibration (next 10%)
and held-out evaluation (last 10%). Fine-tuning only ever sees the train
split and scoring only the calibration split, so held-out perplexity is
measured on text nothing in the pipeline has touched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

TRAIN_FRACTION = 0.8
CALIB_FRACTION = 0.1
SUCCESSORS = 4
SMOOTHING = 0.05


@dataclass
class Corpus:
    documents: list[np.ndarray]
    vocab_size: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for doc in self.documents:
            if len(doc) and (doc.min() < 0 or doc.max() >= self.vocab_size):
                raise DataError("document contains ids outside the vocabulary")

    def _bounds(self) -> tuple[int, int]:
        n = len(self.documents)
        return int(round(TRAIN_FRACTION * n)), int(round((TRAIN_FRACTION + CALIB_FRACTION) * n))

    @property
    def train_docs(self) -> list[np.ndarray]:
        return self.documents[: self._bounds()[0]]

    @property
    def calib_docs(self) -> list[np.ndarray]:
        a, b = self._bounds()
        return self.documents[a:b]

    @property
    def eval_docs(self) -> list[np.ndarray]:
        return self.documents[self._bounds()[1]:]

    def save(self, path) -> None:
        lengths = np.array([len(d) for d in self.documents], dtype=np.int64)
        flat = np.concatenate(self.documents) if self.documents else np.zeros(0, np.int64)
        np.savez(path, lengths=lengths, tokens=flat.astype(np.int32),
                 vocab_size=np.int64(self.vocab_size))

    @classmethod
    def load(cls, path) -> "Corpus":
        with np.load(path) as z:
            lengths, flat, vocab = z["lengths"], z["tokens"].astype(np.int64), int(z["vocab_size"])
        docs = np.split(flat, np.cumsum(lengths)[:-1]) if len(lengths) else []
        return cls(list(docs), vocab, {"path": str(path)})


def _transition_table(rng: np.random.Generator, n_states: int, vocab_size: int):
    succ = np.stack([rng.choice(vocab_size, SUCCESSORS, replace=False) for _ in range(n_states)])
    probs = rng.dirichlet(np.full(SUCCESSORS, 0.5), size=n_states)
    return succ, np.cumsum(probs, axis=1)


def gen_corpus(seed: int, n_docs: int, doc_len: int, vocab_size: int, order: int = 1) -> Corpus:
    """Documents from a seeded order-``order`` Markov chain.

    Each state has a few preferred successors with Dirichlet weights; with
    probability ``SMOOTHING`` the next token is uniform instead.
    """
    if vocab_size < 4:
        raise ConfigError("vocab_size must be >= 4")
    if order not in (1, 2):
        raise ConfigError("order must be 1 or 2")
    if n_docs < 1 or doc_len < 2:
        raise ConfigError("need n_docs >= 1 and doc_len >= 2")
    rng = np.random.default_rng(seed)
    succ, cum = _transition_table(rng, vocab_size**order, vocab_size)
    tokens = np.zeros((n_docs, doc_len), dtype=np.int64)
    tokens[:, :order] = rng.integers(0, vocab_size, size=(n_docs, order))
    rows = np.arange(n_docs)
    for t in range(order, doc_len):
        state = tokens[:, t - 1] if order == 1 else tokens[:, t - 2] * vocab_size + tokens[:, t - 1]
        u = rng.random(n_docs)
        pick = (u[:, None] > cum[state]).sum(axis=1).clip(max=SUCCESSORS - 1)
        nxt = succ[state, pick]
        noisy = rng.random(n_docs) < SMOOTHING
        nxt[noisy] = rng.integers(0, vocab_size, size=int(noisy.sum()))
        tokens[rows, t] = nxt
    prov = {"synthetic_seed": seed, "order": order, "n_docs": n_docs, "doc_len": doc_len}
    return Corpus([row.copy() for row in tokens], vocab_size, prov)


def load_text_corpus(path, doc_len: int = 64) -> Corpus:
    """Byte-level ingestion of a local text file, cut into ``doc_len``-byte documents."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)
    n = len(raw) // doc_len
    if n == 0:
        raise DataError(f"{path}: fewer than {doc_len} bytes")
    docs = [raw[i * doc_len:(i + 1) * doc_len].copy() for i in range(n)]
    return Corpus(docs, 256, {"path": str(path), "doc_len": doc_len})


def tile_segments(docs, seg_len: int) -> np.ndarray:
    """Concatenate ``docs`` and cut into ``seg_len`` blocks, dropping the remainder."""
    stream = np.concatenate([np.asarray(d) for d in docs]) if len(docs) else np.zeros(0, np.int64)
    n = len(stream) // seg_len
    return stream[: n * seg_len].reshape(n, seg_len)


@dataclass(frozen=True)
class CalibSet:
    texts: tuple
    segments: np.ndarray
    seed: int

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.texts:
            h.update(np.int64(len(t)).tobytes())
            h.update(np.ascontiguousarray(t, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.segments, dtype=np.int64).tobytes())
        return h.hexdigest()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.int64)
    a.setflags(write=False)
    return a


def build_calibration(corpus: Corpus, n_texts: int = 32, seg_len: int = 256, seed: int = 0) -> CalibSet:
    pool = [d for d in corpus.calib_docs if len(d)]
    if n_texts < 1 or len(pool) < n_texts:
        raise DataError(f"calibration split has {len(pool)} non-empty documents, need {n_texts}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=n_texts, replace=False)
    segments = tile_segments(corpus.calib_docs, seg_len)
    if not len(segments):
        raise DataError(f"calibration split is shorter than one {seg_len}-token segment")
    return CalibSet(tuple(_frozen(pool[i]) for i in picks), _frozen(segments), seed)


def eval_segments(corpus: Corpus, seg_len: int = 256) -> np.ndarray:
    segments = tile_segments(corpus.eval_docs, seg_len)
    if not len(segments):
        raise DataError(f"held-out split is shorter than one {seg_len}-token segment")
    return segments


def sample_tune_subset(corpus, size: int, seed: int, t: int) -> list[np.ndarray]:
    """Uniform draw without replacement from the train split, keyed by (seed, t)."""
    docs = corpus.train_docs if isinstance(corpus, Corpus) else list(corpus)
    if size > len(docs):
        raise DataError(f"tune subset of {size} requested from {len(docs)} documents")
    rng = np.random.default_rng([seed, t])
    return [docs[i] for i in rng.choice(len(docs), size=size, replace=False)]
