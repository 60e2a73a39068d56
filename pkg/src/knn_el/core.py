"""Shared domain types and numerically careful primitives.

All embeddings are float64 and stored L2-normalized, so cosine similarity is
a plain dot product. Row scans go through :func:`row_similarities`, which is
bitwise stable under row subsetting; BLAS matrix-vector products are not,
and exact/indexed search must agree down to tie order.
"""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import EmptyMentionError, InvalidInputError

EntityId = str


def normalize_text(raw: str) -> str:
    """NFKC-normalize, lowercase, collapse whitespace and trim."""
    text = unicodedata.normalize("NFKC", raw).lower()
    text = " ".join(text.split())
    if not text:
        raise EmptyMentionError(f"mention is empty after normalization: {raw!r}")
    return text


@dataclass(frozen=True)
class EntityRecord:
    id: EntityId
    canonical_name: str
    synonyms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidInputError("entity id must be non-empty")
        normalize_text(self.canonical_name)
        object.__setattr__(self, "synonyms", tuple(self.synonyms))


class Ontology:
    """Ordered entity vocabulary; ordinal position is load order."""

    def __init__(self, entities: Iterable[EntityRecord]) -> None:
        self.entities: tuple[EntityRecord, ...] = tuple(entities)
        if not self.entities:
            raise InvalidInputError("ontology must contain at least one entity")
        self.index: dict[EntityId, int] = {}
        for i, rec in enumerate(self.entities):
            if rec.id in self.index:
                raise InvalidInputError(f"duplicate entity id {rec.id!r}")
            self.index[rec.id] = i
        self.ids: tuple[EntityId, ...] = tuple(r.id for r in self.entities)

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self) -> Iterator[EntityRecord]:
        return iter(self.entities)

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self.index

    def __getitem__(self, entity_id: EntityId) -> EntityRecord:
        return self.entities[self.index[entity_id]]

    def ordinal(self, entity_id: EntityId) -> int:
        try:
            return self.index[entity_id]
        except KeyError:
            raise InvalidInputError(f"entity {entity_id!r} is not in the ontology") from None

    def canonical_names(self) -> list[str]:
        return [r.canonical_name for r in self.entities]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Ontology) and self.entities == other.entities

    def __repr__(self) -> str:
        return f"Ontology(N={len(self)})"


@dataclass(frozen=True)
class Mention:
    surface: str
    gold: EntityId | None = None

    def __post_init__(self) -> None:
        normalize_text(self.surface)


@dataclass(frozen=True)
class ScoredCandidate:
    entity: EntityId
    score: float


def check_golds(mentions: Sequence[Mention], ontology: Ontology) -> None:
    for i, m in enumerate(mentions):
        if m.gold is None:
            raise InvalidInputError(f"instance {i} ({m.surface!r}) has no gold entity")
        if m.gold not in ontology:
            raise InvalidInputError(f"instance {i}: gold {m.gold!r} is not in the ontology")


@dataclass(frozen=True, eq=False)
class ProbabilityDistribution:
    """Entity-indexed probabilities.

    Dense distributions list every ontology entity; sparse ones list only the
    support and every other entity has probability exactly zero.
    """

    entities: tuple[EntityId, ...]
    probs: np.ndarray
    _lookup: dict[EntityId, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (len(self.entities),):
            raise InvalidInputError("entities and probs must align")
        probs.setflags(write=False)
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_lookup", {e: i for i, e in enumerate(self.entities)})

    def prob(self, entity: EntityId) -> float:
        i = self._lookup.get(entity)
        return 0.0 if i is None else float(self.probs[i])

    def __contains__(self, entity: object) -> bool:
        return entity in self._lookup

    def __len__(self) -> int:
        return len(self.entities)

    def total(self) -> float:
        return float(self.probs.sum())

    def as_dict(self) -> dict[EntityId, float]:
        return {e: float(p) for e, p in zip(self.entities, self.probs)}

    @classmethod
    def from_mapping(cls, mapping: Mapping[EntityId, float]) -> "ProbabilityDistribution":
        return cls(tuple(mapping), np.fromiter(mapping.values(), dtype=np.float64, count=len(mapping)))


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    norm = np.sqrt(np.add.reduce(v * v))
    if norm == 0.0:
        raise InvalidInputError("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two unit vectors (a dot product), clamped against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(min(1.0, max(-1.0, float(row_similarities(a[None, :], b)[0]))))


def row_similarities(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot product of every row of ``matrix`` with ``query``.

    einsum's per-row reduction order does not depend on the other rows, so
    ``row_similarities(M[rows], q) == row_similarities(M, q)[rows]`` bitwise.
    """
    return np.einsum("ij,j->i", matrix, query)


def stable_softmax(scores: Sequence[float] | np.ndarray, temperature: float) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidInputError("softmax needs a non-empty 1-d score list")
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    z = (s - s.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending, ties by ascending index."""
    n = scores.shape[0]
    k = min(k, n)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order][:k]


@dataclass(frozen=True)
class Dataset:
    ontology: Ontology
    train: tuple[Mention, ...]
    validation: tuple[Mention, ...]
    test: tuple[Mention, ...]
