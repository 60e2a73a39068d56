"""Contrastive encoder training with in-batch and dynamic hard negatives.

Each anchor mention is scored against its gold entity, the golds of the
other batch members (in-batch negatives) and the ``p`` entities the current
encoder ranks highest apart from the gold (hard negatives). The hard
negatives are retrieved from an entity index rebuilt once per epoch, while
the loss itself always uses live embeddings so gradients reach the encoder
through every entity in the denominator.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EntityId, Mention, Ontology, check_golds, normalize_text, row_similarities, top_k_indices
from .encoder import (
    TRAINABLE,
    EncoderParams,
    FeatureHasherConfig,
    _forward,
    encode_all,
    feature_matrix,
    init_params,
    projection_gradient,
)
from .errors import InvalidInputError, UnsupportedModeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.01
    hard_negatives_p: int = 4
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    early_stop_patience: int = 3
    seed: int = 0
    synonym_pairs: bool = False

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")
        if self.hard_negatives_p < 0:
            raise InvalidInputError("hard_negatives_p must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise InvalidInputError("epochs, batch_size and early_stop_patience must be positive")
        if self.batch_size < 2 and self.hard_negatives_p == 0:
            raise InvalidInputError("batch_size >= 2 is required when only in-batch negatives are used")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise InvalidInputError("learning_rate must be positive and weight_decay non-negative")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "hard_negatives_p": self.hard_negatives_p,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "early_stop_patience": self.early_stop_patience,
            "seed": self.seed,
            "synonym_pairs": self.synonym_pairs,
        }


@dataclass(frozen=True)
class NegativeSet:
    in_batch: tuple[EntityId, ...]
    hard: tuple[EntityId, ...]


@dataclass(frozen=True, eq=False)
class EntityIndexSnapshot:
    ids: tuple[EntityId, ...]
    embeddings: np.ndarray
    built_at_epoch: int


def build_in_batch_negatives(batch: Sequence[Mention], anchor_index: int) -> list[EntityId]:
    """Distinct golds of the other batch members, minus the anchor's own gold."""
    if not 0 <= anchor_index < len(batch):
        raise InvalidInputError(f"anchor_index {anchor_index} outside batch of {len(batch)}")
    gold = batch[anchor_index].gold
    seen: dict[EntityId, None] = {}
    for i, m in enumerate(batch):
        if i != anchor_index and m.gold != gold:
            seen.setdefault(m.gold)
    return list(seen)


def rebuild_entity_index(ontology: Ontology, params: EncoderParams, epoch: int = 0) -> EntityIndexSnapshot:
    emb = encode_all(ontology.canonical_names(), params)
    emb.setflags(write=False)
    return EntityIndexSnapshot(ontology.ids, emb, epoch)


def _hard_ordinals(query: np.ndarray, embeddings: np.ndarray, gold: int, p: int) -> np.ndarray:
    if p <= 0:
        return np.empty(0, dtype=np.int64)
    top = top_k_indices(row_similarities(embeddings, query), p + 1)
    return top[top != gold][:p]


def dhns_retrieve(
    mention_emb: np.ndarray, snapshot: EntityIndexSnapshot, gold: EntityId, p: int
) -> list[EntityId]:
    """Top-``p`` entities by cosine excluding ``gold``; ties by ontology order."""
    if p < 0:
        raise InvalidInputError("p must be >= 0")
    try:
        g = snapshot.ids.index(gold)
    except ValueError:
        g = -1
    return [snapshot.ids[i] for i in _hard_ordinals(np.asarray(mention_emb, dtype=np.float64),
                                                     snapshot.embeddings, g, p)]


@dataclass
class ContrastiveLoss:
    loss: float
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negatives: np.ndarray  # (n_neg, dim)


def _masked_nll(S: np.ndarray, mask: np.ndarray, pos: np.ndarray):
    """Row-wise ``-log softmax(S)[pos]`` over masked entries, and its gradient in ``S``.

    The loss is ``(max - s_pos) + log1p(sum of the non-max terms)``, which stays
    accurate when the positive dominates and the loss is tiny. For the same
    reason the positive's gradient ``p_pos - 1`` is formed as minus the summed
    probability of the other candidates instead of by subtraction from one.
    """
    rows = np.arange(S.shape[0])
    Sm = np.where(mask, S, -np.inf)
    top = np.argmax(Sm, axis=1)
    smax = Sm[rows, top]
    E = np.exp(Sm - smax[:, None])
    total = E.sum(axis=1)
    grad = E / total[:, None]
    grad[rows, pos] = 0.0
    grad[rows, pos] = -grad.sum(axis=1)
    E[rows, top] = 0.0
    loss = (smax - S[rows, pos]) + np.log1p(E.sum(axis=1))
    return loss, grad


def contrastive_loss(
    anchor: np.ndarray, positive: np.ndarray, negatives: Sequence[np.ndarray] | np.ndarray, tau: float
) -> ContrastiveLoss:
    """``-log(d(pos) / (d(pos) + sum d(neg)))`` with ``d = exp(a.c / tau)``.

    Inputs are unit vectors so the dot product is the cosine. Gradients are
    with respect to each (unit) embedding.
    """
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    a = np.asarray(anchor, dtype=np.float64)
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1, a.shape[0])
    if pos.shape != a.shape:
        raise InvalidInputError("anchor and positive dims differ")
    C = np.vstack([pos[None, :], neg])
    S = (row_similarities(C, a) / tau)[None, :]
    loss, dS = _masked_nll(S, np.ones_like(S, dtype=bool), np.zeros(1, dtype=np.int64))
    coef = dS[0] / tau
    grad_c = coef[:, None] * a[None, :]
    return ContrastiveLoss(float(loss[0]), coef @ C, grad_c[0], grad_c[1:])


def batch_contrastive_loss(Q: np.ndarray, C: np.ndarray, pos: np.ndarray, mask: np.ndarray, tau: float):
    """Mean loss over anchors ``Q`` against candidate rows ``C``.

    ``mask[i, j]`` selects the candidates in anchor ``i``'s denominator and
    ``pos[i]`` its positive column. Returns ``(mean_loss, per_anchor, dQ, dC)``.
    """
    S = (Q @ C.T) / tau
    loss, dS = _masked_nll(S, mask, pos)
    dS /= Q.shape[0] * tau
    return float(loss.mean()), loss, dS @ C, dS.T @ Q


@dataclass
class AdamWState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update, applied in place to ``params`` and ``state``."""
    if params.shape != grads.shape:
        raise InvalidInputError(f"shape mismatch {params.shape} vs {grads.shape}")
    b1, b2 = betas
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    t = state.step
    buf = np.multiply(grads, 1.0 - b1)
    state.m *= b1
    state.m += buf
    np.multiply(grads, grads, out=buf)
    buf *= 1.0 - b2
    state.v *= b2
    state.v += buf
    if weight_decay:
        params *= 1.0 - lr * weight_decay
    # m_hat / (sqrt(v_hat) + eps), bias corrections folded into scalars
    np.sqrt(state.v, out=buf)
    buf /= math.sqrt(1.0 - b2**t)
    buf += eps
    np.divide(state.m, buf, out=buf)
    buf *= lr / (1.0 - b1**t)
    params -= buf
    return params, state


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    best_epoch: int | None = None
    dhns_enabled: bool = True

    @property
    def dhns_violations(self) -> int:
        return sum(e["dhns_gold_violations"] + e["dhns_size_violations"] for e in self.epochs)


def _model_only_accuracy(U: np.ndarray, golds: np.ndarray, E: np.ndarray) -> tuple[float, float]:
    hit1 = hit5 = 0
    for u, g in zip(U, golds):
        top = top_k_indices(row_similarities(E, u), 5)
        hit1 += int(top[0] == g)
        hit5 += int(g in top)
    return hit1 / len(golds), hit5 / len(golds)


def train(
    train_set: Sequence[Mention],
    ontology: Ontology,
    config: TrainConfig = TrainConfig(),
    validation: Sequence[Mention] | None = None,
    params: EncoderParams | None = None,
    hasher: FeatureHasherConfig | None = None,
    embed_dim: int = 128,
) -> tuple[EncoderParams, TrainLog]:
    """Train the n-gram encoder; returns the best-validation parameters and the log.

    Starting parameters are copied, never mutated. Without a validation set
    early stopping is disabled and the final parameters are returned.
    """
    if not train_set:
        raise InvalidInputError("training set is empty")
    check_golds(train_set, ontology)
    if params is None:
        params = init_params(hasher, embed_dim, seed=config.seed)
    if params.mode != TRAINABLE:
        raise UnsupportedModeError("only the trainable n-gram encoder can be trained")
    params = params.copy()
    cfg_h = params.hasher
    W = params.projection

    instances = list(train_set)
    if config.synonym_pairs:
        instances += [Mention(s, r.id) for r in ontology for s in r.synonyms]

    run_log = TrainLog(dhns_enabled=config.hard_negatives_p > 0)
    if not run_log.dhns_enabled:
        run_log.warnings.append("hard_negatives_p = 0: dynamic hard negative sampling disabled")
    val = list(validation or [])
    if val:
        check_golds(val, ontology)
    else:
        run_log.warnings.append("empty validation set: early stopping disabled")
        log.warning("empty validation set: early stopping disabled")

    X_ent = feature_matrix([normalize_text(n) for n in ontology.canonical_names()], cfg_h)
    X_men = feature_matrix([normalize_text(m.surface) for m in instances], cfg_h)
    gold_ord = np.array([ontology.index[m.gold] for m in instances], dtype=np.int64)
    X_val = feature_matrix([normalize_text(m.surface) for m in val], cfg_h) if val else None
    val_gold = np.array([ontology.index[m.gold] for m in val], dtype=np.int64)

    p = config.hard_negatives_p
    n_ent = len(ontology)
    expected_hard = min(p, n_ent - 1)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    opt = AdamWState()
    best_acc = -1.0
    best_W = W.copy()
    stale = 0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        snap = rebuild_entity_index(ontology, params, epoch)
        rebuild_ms = (time.perf_counter() - t0) * 1000.0
        perm = rng.permutation(len(instances))
        loss_sum = 0.0
        gold_viol = size_viol = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            Xq = X_men[idx]
            Uq, nq = _forward(Xq, W)
            golds = gold_ord[idx]
            hard = [_hard_ordinals(Uq[i], snap.embeddings, int(golds[i]), p) for i in range(len(idx))]
            for i, h in enumerate(hard):
                gold_viol += int(np.any(h == golds[i]))
                size_viol += int(h.size != expected_hard)
            cand = np.unique(np.concatenate([golds, *hard]) if hard else golds)
            col = {int(c): j for j, c in enumerate(cand)}
            gold_cols = np.array([col[int(g)] for g in golds])
            mask = np.zeros((len(idx), cand.size), dtype=bool)
            mask[:, gold_cols] = True
            for i, h in enumerate(hard):
                mask[i, [col[int(e)] for e in h]] = True
            Xc = X_ent[cand]
            Uc, nc = _forward(Xc, W)
            _, per_anchor, dQ, dC = batch_contrastive_loss(Uq, Uc, gold_cols, mask, config.tau)
            loss_sum += float(per_anchor.sum())
            grad = projection_gradient(Xq, Uq, nq, dQ)
            grad += projection_gradient(Xc, Uc, nc, dC)
            adamw_step(W, grad, opt, config.learning_rate, config.weight_decay)
            params.invalidate()

        record = {
            "epoch": epoch,
            "mean_loss": loss_sum / len(instances),
            "val_acc1": None,
            "val_acc5": None,
            "hard_negatives_p": p,
            "dhns_gold_violations": gold_viol,
            "dhns_size_violations": size_viol,
        }
        run_log.timings.append(
            {"epoch": epoch, "index_rebuild_ms": rebuild_ms, "epoch_ms": (time.perf_counter() - t0) * 1000.0}
        )
        if gold_viol or size_viol:
            log.error("epoch %d: %d gold / %d size violations in hard negatives", epoch, gold_viol, size_viol)
        if val:
            E, _ = _forward(X_ent, W)
            Uv, _ = _forward(X_val, W)
            acc1, acc5 = _model_only_accuracy(Uv, val_gold, E)
            record["val_acc1"], record["val_acc5"] = acc1, acc5
            if acc1 > best_acc:
                best_acc, best_W, stale = acc1, W.copy(), 0
                run_log.best_epoch = epoch
            else:
                stale += 1
        run_log.epochs.append(record)
        log.info("epoch %d loss %.5f val_acc1 %s", epoch, record["mean_loss"], record["val_acc1"])
        if val and stale >= config.early_stop_patience:
            break

    if val:
        params.projection = best_W
    else:
        run_log.best_epoch = len(run_log.epochs)
    params.invalidate()
    return params, run_log
