"""Seeded synthetic linking benchmark.

Entity names are built from a syllable grammar with shared medical-style
suffixes. Synonyms are unrelated names (think "motrin" vs "ibuprofen").
Confusable pairs share a base and differ in one qualifier token, and their
synonyms follow the same pattern. Mention counts follow a Zipf law over a
random entity ranking; mentions are surface forms, optionally corrupted by
character edits that never touch qualifier tokens.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import Dataset, EntityRecord, Mention, Ontology
from .errors import InvalidSpecError

_ONSETS = ("b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cl", "tr", "st", "ph")
_VOWELS = ("a", "e", "i", "o", "u", "y")
_CODAS = ("", "", "", "n", "r", "s", "l", "x")
_SUFFIXES = ("itis", "osis", "emia", "ase", "ine", "oma", "pathy", "algia", "ol", "ide")
QUALIFIERS = (
    "1", "2", "3", "4", "i", "ii", "iii", "a", "b", "c",
    "acute", "chronic", "early", "late", "primary", "secondary", "alpha", "beta", "gamma", "delta",
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_entities: int = 500
    synonyms_per_entity: int = 2
    noise_rate: float = 0.3
    confusable_fraction: float = 0.2
    zipf_exponent: float = 1.1
    n_train: int = 5000
    n_validation: int = 500
    n_test: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.n_entities < 1 or self.n_train < 1 or self.n_test < 1:
            raise InvalidSpecError("n_entities, n_train and n_test must be positive")
        if self.n_validation < 0 or self.synonyms_per_entity < 0:
            raise InvalidSpecError("n_validation and synonyms_per_entity must be non-negative")
        if not 0.0 <= self.noise_rate < 1.0:
            raise InvalidSpecError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if not 0.0 <= self.confusable_fraction:
            raise InvalidSpecError("confusable_fraction must be non-negative")
        if self.zipf_exponent <= 0:
            raise InvalidSpecError("zipf_exponent must be positive")
        if 2 * self.n_confusable_pairs > self.n_entities:
            raise InvalidSpecError(
                f"{self.n_confusable_pairs} confusable pairs need {2 * self.n_confusable_pairs} entities, "
                f"only {self.n_entities} available"
            )

    @property
    def n_confusable_pairs(self) -> int:
        return int(round(self.confusable_fraction * self.n_entities))

    def to_dict(self) -> dict:
        return asdict(self)


class _Names:
    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.used: set[str] = set()

    def word(self) -> str:
        n = int(self.rng.integers(2, 4))
        w = "".join(
            _ONSETS[self.rng.integers(len(_ONSETS))] + _VOWELS[self.rng.integers(len(_VOWELS))]
            for _ in range(n)
        )
        w += _CODAS[self.rng.integers(len(_CODAS))]
        if self.rng.random() < 0.5:
            w += _SUFFIXES[self.rng.integers(len(_SUFFIXES))]
        return w

    def phrase(self, max_words: int = 3) -> str:
        while True:
            n = int(self.rng.integers(1, max_words + 1))
            name = " ".join(self.word() for _ in range(n))
            if name not in self.used:
                self.used.add(name)
                return name

    def claim(self, name: str) -> bool:
        if name in self.used:
            return False
        self.used.add(name)
        return True


def _make_entities(spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[str, list[str]]]:
    names = _Names(rng)
    entities: list[tuple[str, list[str]]] = []
    for _ in range(spec.n_confusable_pairs):
        while True:
            qa, qb = (QUALIFIERS[i] for i in rng.choice(len(QUALIFIERS), size=2, replace=False))
            base = names.phrase(2)
            syn_bases = [names.phrase(2) for _ in range(spec.synonyms_per_entity)]
            forms_a = [f"{base} {qa}"] + [f"{s} {qa}" for s in syn_bases]
            forms_b = [f"{base} {qb}"] + [f"{s} {qb}" for s in syn_bases]
            if all(names.claim(f) for f in forms_a + forms_b):
                break
        entities.append((forms_a[0], forms_a[1:]))
        entities.append((forms_b[0], forms_b[1:]))
    while len(entities) < spec.n_entities:
        canonical = names.phrase()
        entities.append((canonical, [names.phrase() for _ in range(spec.synonyms_per_entity)]))
    order = rng.permutation(len(entities))
    return [entities[i] for i in order]


def _corrupt_token(tok: str, rng: np.random.Generator) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    op = int(rng.integers(5))
    i = int(rng.integers(len(tok)))
    if op == 0:
        return tok[:i] + letters[rng.integers(26)] + tok[i + 1 :]
    if op == 1 and len(tok) > 3:
        return tok[:i] + tok[i + 1 :]
    if op == 2:
        return tok[:i] + letters[rng.integers(26)] + tok[i:]
    if op == 3 and len(tok) > 1:
        i = min(i, len(tok) - 2)
        return tok[:i] + tok[i + 1] + tok[i] + tok[i + 2 :]
    return tok + "s"


def _corrupt(text: str, rng: np.random.Generator) -> str:
    tokens = text.split(" ")
    editable = [i for i, t in enumerate(tokens) if t not in QUALIFIERS and len(t) >= 3]
    if not editable:
        return text
    for _ in range(int(rng.integers(1, 3))):
        j = editable[int(rng.integers(len(editable)))]
        tokens[j] = _corrupt_token(tokens[j], rng)
    return " ".join(tokens)


def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Build ``(ontology, train, validation, test)`` reproducibly from ``spec.seed``.

    A distinct (mention text, gold) pair lands in at most one split; samples
    that would repeat a pair from an earlier split are redrawn.
    """
    spec.validate()
    name_rng, mention_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    raw = _make_entities(spec, name_rng)
    width = len(str(spec.n_entities))
    records = [EntityRecord(f"SYN{i:0{width}d}", c, tuple(s)) for i, (c, s) in enumerate(raw)]
    ontology = Ontology(records)

    rank = mention_rng.permutation(spec.n_entities)
    weights = np.empty(spec.n_entities)
    weights[rank] = zipf_weights(spec.n_entities, spec.zipf_exponent)

    taken: set[tuple[str, str]] = set()
    splits = []
    for size in (spec.n_train, spec.n_validation, spec.n_test):
        split: list[Mention] = []
        seen_here: set[tuple[str, str]] = set()
        attempts = 0
        budget = 200 * size + 1000
        while len(split) < size:
            attempts += 1
            if attempts > budget:
                raise InvalidSpecError(
                    f"could only draw {len(split)} of {size} mentions disjoint from earlier splits"
                )
            e = int(mention_rng.choice(spec.n_entities, p=weights))
            rec = records[e]
            forms = (rec.canonical_name, *rec.synonyms)
            text = forms[int(mention_rng.integers(len(forms)))]
            if mention_rng.random() < spec.noise_rate:
                text = _corrupt(text, mention_rng)
            pair = (text, rec.id)
            if pair in taken:
                continue
            seen_here.add(pair)
            split.append(Mention(text, rec.id))
        taken |= seen_here
        splits.append(tuple(split))
    return Dataset(ontology, *splits)


def corpus_summary(dataset: Dataset) -> dict:
    """Entity count and the cumulative mention mass of the most frequent entities."""
    from collections import Counter

    counts = Counter(m.gold for m in dataset.train)
    freqs = sorted(counts.values(), reverse=True)
    total = sum(freqs)
    n = len(dataset.ontology)
    mass = {}
    for pct in (1, 5, 10, 25, 50, 100):
        top = max(1, int(round(n * pct / 100)))
        mass[f"top{pct}pct"] = sum(freqs[:top]) / total if total else 0.0
    return {
        "n_entities": n,
        "n_train": len(dataset.train),
        "n_validation": len(dataset.validation),
        "n_test": len(dataset.test),
        "train_entities_seen": len(counts),
        "zipf_mass": mass,
    }
