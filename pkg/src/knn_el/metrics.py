from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .core import EntityId, Mention
from .errors import InvalidInputError, UndefinedMetricError

# (label, low, high) inclusive train-frequency ranges
BUCKETS: tuple[tuple[str, int, float], ...] = (
    ("0", 0, 0),
    ("1", 1, 1),
    ("2-4", 2, 4),
    ("5-9", 5, 9),
    (">=10", 10, float("inf")),
)


@dataclass(frozen=True)
class EvalRecord:
    mention: str
    gold: EntityId
    predictions: tuple[EntityId, ...]

    def __post_init__(self) -> None:
        if not self.predictions:
            raise InvalidInputError("an eval record needs at least one prediction")
        object.__setattr__(self, "predictions", tuple(self.predictions))


@dataclass(frozen=True)
class FrequencyBucket:
    label: str
    entities: frozenset[EntityId]
    count: int
    acc1: float | None  # None for an empty bucket


def acc_at_k(records: Sequence[EvalRecord], k: int) -> float:
    """Fraction of records whose gold is among the first ``k`` predictions."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if not records:
        raise UndefinedMetricError("accuracy is undefined on zero records")
    hits = sum(1 for r in records if r.gold in r.predictions[:k])
    return hits / len(records)


def bucket_label(freq: int) -> str:
    for label, lo, hi in BUCKETS:
        if lo <= freq <= hi:
            return label
    raise AssertionError(freq)


def long_tail_report(records: Sequence[EvalRecord], train_set: Sequence[Mention]) -> list[FrequencyBucket]:
    """Per-bucket Acc@1 where buckets are by the gold's training frequency."""
    freq = Counter(m.gold for m in train_set)
    grouped: dict[str, list[EvalRecord]] = {label: [] for label, _, _ in BUCKETS}
    for r in records:
        grouped[bucket_label(freq.get(r.gold, 0))].append(r)
    out = []
    for label, _, _ in BUCKETS:
        recs = grouped[label]
        out.append(
            FrequencyBucket(
                label,
                frozenset(r.gold for r in recs),
                len(recs),
                acc_at_k(recs, 1) if recs else None,
            )
        )
    return out
