"""Deterministic text matcher: hashed character trigrams + cosine.

Class names and generated captions are embedded as L2-normalized bags of
character trigrams (FNV-1a 64-bit, 256 buckets).  Prediction is the argmax
cosine against the registered class names, so near-miss generations still
land on the lexically closest class.  No learned weights anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import fnv1a64
from .tokenizer import extract_class, normalize

EMBED_DIM = 256
_BOUNDARY = "#"


@dataclass
class TextEmbedding:
    """Unit-norm trigram histogram; `empty` marks embeddings of empty text."""

    vector: np.ndarray
    empty: bool


def embed_text(text: str) -> TextEmbedding:
    """Embed lowercase text padded with boundary markers; empty text flags."""
    norm = normalize(text)
    if not norm:
        return TextEmbedding(np.zeros(EMBED_DIM), True)
    padded = _BOUNDARY + norm + _BOUNDARY
    vec = np.zeros(EMBED_DIM)
    for i in range(len(padded) - 2):
        bucket = fnv1a64(padded[i:i + 3].encode("utf-8")) % EMBED_DIM
        vec[bucket] += 1.0
    return TextEmbedding(vec / np.linalg.norm(vec), False)


def cosine(u: TextEmbedding, v: TextEmbedding) -> float:
    """Cosine similarity of two embeddings; empty embeddings are an error.

    Normalizes internally, so scaling either vector by a positive constant
    leaves the similarity unchanged.  Trigram counts are non-negative, hence
    the result lies in [0, 1].
    """
    if u.empty or v.empty:
        raise ValueError("cosine is undefined for empty-text embeddings")
    un = np.linalg.norm(u.vector)
    vn = np.linalg.norm(v.vector)
    if un == 0.0 or vn == 0.0:
        raise ValueError("cosine is undefined for zero embeddings")
    return float(u.vector @ v.vector / (un * vn))


class ClassRegistry:
    """Append-only (id, name, embedding) table; ids are dense from 0."""

    def __init__(self):
        self._names: list[str] = []
        self._matrix = np.zeros((0, EMBED_DIM))

    def __len__(self) -> int:
        return len(self._names)

    def add(self, name: str) -> int:
        norm = normalize(name)
        if not norm:
            raise ValueError(f"class name normalizes to empty: {name!r}")
        if norm in self._names:
            raise ValueError(f"class already registered: {norm!r}")
        emb = embed_text(norm)
        self._names.append(norm)
        self._matrix = np.vstack([self._matrix, emb.vector[None, :]])
        return len(self._names) - 1

    def name(self, class_id: int) -> str:
        return self._names[class_id]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def embedding(self, class_id: int) -> TextEmbedding:
        return TextEmbedding(self._matrix[class_id].copy(), False)

    def entries(self) -> list[tuple[int, str]]:
        """Ordered (id, name) pairs, the serialized registry form."""
        return list(enumerate(self._names))


@dataclass
class RunStats:
    """Counters surfaced in Results."""

    empty_generations: int = 0


def predict(generated_text: str, registry: ClassRegistry,
            stats: RunStats | None = None) -> int:
    """Extract the class text, embed it, return the nearest registered class.

    Empty extractions fall back to the lowest class id (and are counted);
    cosine ties also resolve to the lowest id via first-argmax.
    """
    if len(registry) == 0:
        raise ValueError("cannot predict against an empty registry")
    emb = embed_text(extract_class(generated_text))
    if emb.empty:
        if stats is not None:
            stats.empty_generations += 1
        return 0
    scores = registry.matrix @ emb.vector
    return int(np.argmax(scores))
