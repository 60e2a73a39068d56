"""Model distribution, kNN distribution and their interpolation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    EntityId,
    Mention,
    Ontology,
    ProbabilityDistribution,
    ScoredCandidate,
    row_similarities,
    stable_softmax,
)
from .datastore import Datastore, NeighborHit, query_knn, query_knn_indexed
from .encoder import EncoderParams, encode, encode_all
from .errors import InvalidInputError, InvalidStateError

log = logging.getLogger(__name__)

AGGREGATIONS = ("max", "sum")


@dataclass(frozen=True)
class InferenceConfig:
    k: int = 16
    lam: float = 0.1
    beta1: float = 0.05
    beta2: float = 0.05
    aggregation: str = "max"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InvalidInputError(f"k must be positive, got {self.k}")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInputError(f"lambda must lie in [0, 1], got {self.lam}")
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise InvalidInputError("beta1 and beta2 must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise InvalidInputError(f"aggregation must be one of {AGGREGATIONS}")

    def to_dict(self) -> dict:
        return {"k": self.k, "lambda": self.lam, "beta1": self.beta1, "beta2": self.beta2,
                "aggregation": self.aggregation}


# (beta1, beta2, k) per dataset; lambda is 0.1 everywhere.
PROFILES: dict[str, InferenceConfig] = {
    "ncbi": InferenceConfig(k=4, lam=0.1, beta1=0.01, beta2=1.0),
    "bc5cdr": InferenceConfig(k=4, lam=0.1, beta1=0.05, beta2=5.0),
    "cometa": InferenceConfig(k=128, lam=0.1, beta1=0.2, beta2=1.0),
    "aap": InferenceConfig(k=128, lam=0.1, beta1=1.0, beta2=1.0),
    "synthetic": InferenceConfig(),
}


@dataclass(frozen=True, eq=False)
class EntityCache:
    """Pre-computed entity embeddings in ontology order."""

    ontology: Ontology
    embeddings: np.ndarray
    fingerprint: bytes


def build_entity_cache(ontology: Ontology, params: EncoderParams) -> EntityCache:
    emb = encode_all(ontology.canonical_names(), params)
    emb.setflags(write=False)
    return EntityCache(ontology, emb, params.fingerprint())


def model_distribution(x_emb: np.ndarray, cache: EntityCache, beta1: float) -> ProbabilityDistribution:
    """Softmax over cosine scores against every cached entity."""
    if cache.embeddings.shape[0] == 0:
        raise InvalidStateError("entity cache is empty")
    x = np.asarray(x_emb, dtype=np.float64)
    if x.shape != (cache.embeddings.shape[1],):
        raise InvalidInputError(f"embedding dim {x.shape} does not match cache dim {cache.embeddings.shape[1]}")
    scores = row_similarities(cache.embeddings, x)
    return ProbabilityDistribution(cache.ontology.ids, stable_softmax(scores, beta1))


def aggregate_neighbor_scores(neighbors: Sequence[NeighborHit]) -> dict[EntityId, float]:
    """Per-entity maximum similarity, keyed in sorted entity order."""
    best: dict[EntityId, float] = {}
    for hit in neighbors:
        cur = best.get(hit.entity)
        if cur is None or hit.similarity > cur:
            best[hit.entity] = hit.similarity
    return {e: best[e] for e in sorted(best)}


def knn_distribution(
    neighbors: Sequence[NeighborHit], beta2: float, aggregation: str = "max"
) -> ProbabilityDistribution:
    """Sparse distribution over the retrieved entities.

    ``max`` softmaxes each entity's best neighbor similarity; ``sum`` softmaxes
    over all hits and adds up each entity's share.
    """
    if not neighbors:
        raise InvalidInputError("kNN distribution needs at least one neighbor")
    if aggregation == "max":
        scores = aggregate_neighbor_scores(neighbors)
        return ProbabilityDistribution(tuple(scores), stable_softmax(list(scores.values()), beta2))
    if aggregation == "sum":
        hits = sorted(neighbors, key=lambda h: (h.entity, h.row))
        probs = stable_softmax([h.similarity for h in hits], beta2)
        mass: dict[EntityId, float] = {}
        for h, p in zip(hits, probs):
            mass[h.entity] = mass.get(h.entity, 0.0) + p
        return ProbabilityDistribution.from_mapping(mass)
    raise InvalidInputError(f"unknown aggregation {aggregation!r}")


def interpolate(
    p_knn: ProbabilityDistribution, p_model: ProbabilityDistribution, lam: float
) -> ProbabilityDistribution:
    """Pointwise ``lam * p_knn + (1 - lam) * p_model`` over the union support."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    extra = tuple(e for e in p_knn.entities if e not in p_model)
    n_model = len(p_model)
    pm = np.concatenate([p_model.probs, np.zeros(len(extra))])
    pk = np.zeros_like(pm)
    extra_pos = {e: n_model + i for i, e in enumerate(extra)}
    for e, p in zip(p_knn.entities, p_knn.probs):
        i = p_model._lookup.get(e)
        pk[extra_pos[e] if i is None else i] = p
    entities = p_model.entities + extra if extra else p_model.entities
    return ProbabilityDistribution(entities, lam * pk + (1.0 - lam) * pm)


@dataclass
class LinkResult:
    mention: str
    ranked: list[ScoredCandidate]
    model_dist: ProbabilityDistribution
    knn_dist: ProbabilityDistribution | None
    final_dist: ProbabilityDistribution
    neighbors: list[NeighborHit]
    neighbor_texts: list[str]
    notices: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mention": self.mention,
            "top": [
                {
                    "entity_id": c.entity,
                    "prob": c.score,
                    "model_prob": self.model_dist.prob(c.entity),
                    "knn_prob": 0.0 if self.knn_dist is None else self.knn_dist.prob(c.entity),
                }
                for c in self.ranked
            ],
            "neighbors": [
                {"mention_text": t, "entity_id": h.entity, "similarity": h.similarity}
                for h, t in zip(self.neighbors, self.neighbor_texts)
            ],
        }


def rank_entities(final: ProbabilityDistribution, ontology: Ontology, top_n: int) -> list[ScoredCandidate]:
    """Descending probability, ties by ascending ontology ordinal."""
    if final.entities == ontology.ids:
        dense = final.probs
    else:
        dense = _densify(final, ontology)
    order = np.lexsort((np.arange(len(ontology)), -dense))[:top_n]
    return [ScoredCandidate(ontology.ids[i], float(dense[i])) for i in order]


def _densify(final: ProbabilityDistribution, ontology: Ontology) -> np.ndarray:
    dense = np.zeros(len(ontology))
    for e, p in zip(final.entities, final.probs):
        if e not in ontology:
            raise InvalidStateError(f"entity {e!r} is not in the ontology")
        dense[ontology.index[e]] = p
    return dense


def link(
    mention: Mention | str,
    store: Datastore | None,
    cache: EntityCache,
    params: EncoderParams,
    cfg: InferenceConfig,
    top_n: int = 5,
    use_index: bool = False,
) -> LinkResult:
    surface = mention.surface if isinstance(mention, Mention) else mention
    n = len(cache.ontology)
    if not 1 <= top_n:
        raise InvalidInputError("top_n must be positive")
    top_n = min(top_n, n)
    notices = []
    if cache.fingerprint != params.fingerprint():
        notices.append("entity cache was built with different encoder parameters")
    x = encode(surface, params)
    p_model = model_distribution(x, cache, cfg.beta1)
    if store is None or store.size == 0:
        notices.append("empty datastore: kNN term skipped, using the model distribution")
        return LinkResult(surface, rank_entities(p_model, cache.ontology, top_n), p_model, None,
                          p_model, [], [], notices)
    if store.fingerprint != params.fingerprint():
        notices.append("datastore fingerprint does not match encoder parameters")
        log.warning("datastore fingerprint does not match encoder parameters")
    hits = (query_knn_indexed if use_index else query_knn)(store, x, cfg.k)
    p_knn = knn_distribution(hits, cfg.beta2, cfg.aggregation)
    final = interpolate(p_knn, p_model, cfg.lam)
    return LinkResult(
        surface,
        rank_entities(final, cache.ontology, top_n),
        p_model,
        p_knn,
        final,
        hits,
        [store.provenance[h.row] for h in hits],
        notices,
    )
