"""Evaluation harness: accuracy, ablations, low-resource and hyperparameter sweeps.

Per-mention work (encoding, the model distribution and the widest neighbor
list) is computed once in :func:`prepare` and reused across configurations;
a k-neighbor list is a prefix of any longer exact list, so results match a
fresh :func:`knn_el.inference.link` call for every (k, lambda).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import Dataset, Mention, Ontology, ProbabilityDistribution
from .datastore import Datastore, NeighborHit, build_datastore, query_knn
from .encoder import EncoderParams, FeatureHasherConfig, encode_all, init_params
from .errors import InvalidInputError
from .inference import (
    EntityCache,
    InferenceConfig,
    LinkResult,
    build_entity_cache,
    interpolate,
    knn_distribution,
    model_distribution,
    rank_entities,
)
from .metrics import EvalRecord, acc_at_k
from .training import TrainConfig, TrainLog, train


@dataclass
class Prepared:
    mentions: tuple[Mention, ...]
    cache: EntityCache
    p_model: list[ProbabilityDistribution]
    hits: list[list[NeighborHit]]
    provenance: tuple[str, ...]


@dataclass
class EvalResult:
    acc1: float
    acc5: float
    records: list[EvalRecord]
    results: list[LinkResult]


def prepare(
    mentions: Sequence[Mention],
    ontology: Ontology,
    params: EncoderParams,
    store: Datastore | None,
    beta1: float,
    k_max: int,
) -> Prepared:
    cache = build_entity_cache(ontology, params)
    X = encode_all([m.surface for m in mentions], params)
    p_model = [model_distribution(x, cache, beta1) for x in X]
    if store is None or store.size == 0:
        hits: list[list[NeighborHit]] = [[] for _ in mentions]
    else:
        hits = [query_knn(store, x, k_max) for x in X]
    prov = store.provenance if store is not None else ()
    return Prepared(tuple(mentions), cache, p_model, hits, prov)


def _link_prepared(prep: Prepared, i: int, cfg: InferenceConfig, top_n: int) -> LinkResult:
    pm = prep.p_model[i]
    hits = prep.hits[i][: cfg.k]
    surface = prep.mentions[i].surface
    if not hits:
        ranked = rank_entities(pm, prep.cache.ontology, top_n)
        return LinkResult(surface, ranked, pm, None, pm, [], [], ["empty datastore"])
    pk = knn_distribution(hits, cfg.beta2, cfg.aggregation)
    final = interpolate(pk, pm, cfg.lam)
    ranked = rank_entities(final, prep.cache.ontology, top_n)
    return LinkResult(surface, ranked, pm, pk, final, hits, [prep.provenance[h.row] for h in hits])


def evaluate_prepared(prep: Prepared, cfg: InferenceConfig, top_n: int = 5) -> EvalResult:
    results = [_link_prepared(prep, i, cfg, top_n) for i in range(len(prep.mentions))]
    records = [
        EvalRecord(m.surface, m.gold, tuple(c.entity for c in r.ranked))
        for m, r in zip(prep.mentions, results)
    ]
    return EvalResult(acc_at_k(records, 1), acc_at_k(records, 5), records, results)


def evaluate(
    mentions: Sequence[Mention],
    ontology: Ontology,
    params: EncoderParams,
    store: Datastore | None,
    cfg: InferenceConfig,
    top_n: int = 5,
) -> EvalResult:
    prep = prepare(mentions, ontology, params, store, cfg.beta1, cfg.k)
    return evaluate_prepared(prep, cfg, top_n)


@dataclass
class TrainedModel:
    params: EncoderParams
    log: TrainLog | None
    store: Datastore


def fit(
    dataset: Dataset,
    train_cfg: TrainConfig,
    hasher: FeatureHasherConfig | None = None,
    embed_dim: int = 128,
    fraction: float = 1.0,
) -> TrainedModel:
    """Train on a seeded ``fraction`` of the training split; the datastore
    always covers the full split. ``fraction == 0`` keeps the initial encoder."""
    n = len(dataset.train)
    m = int(round(fraction * n))
    if m == 0:
        params, run_log = init_params(hasher, embed_dim, seed=train_cfg.seed), None
    else:
        subset = dataset.train
        if m < n:
            order = np.random.default_rng(train_cfg.seed).permutation(n)[:m]
            subset = tuple(dataset.train[i] for i in np.sort(order))
        params, run_log = train(subset, dataset.ontology, train_cfg, dataset.validation,
                                hasher=hasher, embed_dim=embed_dim)
    store = build_datastore(dataset.train, params, dataset.ontology)
    return TrainedModel(params, run_log, store)


def run_ablations(
    dataset: Dataset,
    train_cfg: TrainConfig,
    infer_cfg: InferenceConfig,
    hasher: FeatureHasherConfig | None = None,
    embed_dim: int = 128,
    full: TrainedModel | None = None,
) -> list[dict]:
    """Rows ``full``, ``w/o kNN`` (lambda 0) and ``w/o DHNS`` (retrained with p = 0)."""
    full = full or fit(dataset, train_cfg, hasher, embed_dim)
    no_dhns = fit(dataset, replace(train_cfg, hard_negatives_p=0), hasher, embed_dim)
    rows = []
    for name, model, cfg in (
        ("full", full, infer_cfg),
        ("w/o kNN", full, replace(infer_cfg, lam=0.0)),
        ("w/o DHNS", no_dhns, infer_cfg),
    ):
        res = evaluate(dataset.test, dataset.ontology, model.params, model.store, cfg)
        rows.append({"variant": name, "acc1": res.acc1, "acc5": res.acc5})
    return rows


LOW_RESOURCE_FRACTIONS = (0.0, 0.1, 0.25, 0.5, 1.0)


def low_resource_sweep(
    dataset: Dataset,
    train_cfg: TrainConfig,
    infer_cfg: InferenceConfig,
    fractions: Sequence[float] = LOW_RESOURCE_FRACTIONS,
    hasher: FeatureHasherConfig | None = None,
    embed_dim: int = 128,
) -> list[dict]:
    """Acc@1 with and without kNN per fine-tuning fraction."""
    fractions = list(fractions)
    if any(not 0.0 <= f <= 1.0 for f in fractions) or fractions != sorted(fractions):
        raise InvalidInputError("fractions must be sorted and lie in [0, 1]")
    rows = []
    for f in fractions:
        model = fit(dataset, train_cfg, hasher, embed_dim, fraction=f)
        prep = prepare(dataset.test, dataset.ontology, model.params, model.store, infer_cfg.beta1, infer_cfg.k)
        for with_knn in (False, True):
            cfg = infer_cfg if with_knn else replace(infer_cfg, lam=0.0)
            rows.append({"fraction": f, "knn": with_knn, "acc1": evaluate_prepared(prep, cfg).acc1})
    return rows


def hyperparameter_sweep(
    mentions: Sequence[Mention],
    ontology: Ontology,
    params: EncoderParams,
    store: Datastore,
    k_values: Sequence[int],
    lambda_values: Sequence[float],
    base_cfg: InferenceConfig,
) -> dict[int, dict[float, float]]:
    """Acc@1 grid ``grid[k][lambda]``."""
    if not k_values or not lambda_values:
        raise InvalidInputError("sweep grids must be non-empty")
    prep = prepare(mentions, ontology, params, store, base_cfg.beta1, max(k_values))
    return {
        k: {lam: evaluate_prepared(prep, replace(base_cfg, k=k, lam=lam)).acc1 for lam in lambda_values}
        for k in k_values
    }


def grid_csv(grid: dict[int, dict[float, float]]) -> str:
    lambdas = list(next(iter(grid.values())))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"lambda={lam:g}" for lam in lambdas])
    for k, row in grid.items():
        w.writerow([k] + [f"{row[lam]:.6f}" for lam in lambdas])
    return buf.getvalue()


def rows_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
