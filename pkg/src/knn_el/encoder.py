"""Mention/entity encoders.

Two modes share one surface:

* ``trainable-ngram``: boundary-marked character n-grams are hashed into a
  sparse count vector, multiplied by a dense projection and L2-normalized.
* ``frozen-lookup``: vectors produced elsewhere (e.g. by a pretrained
  language model) are looked up by normalized text.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .core import normalize_text
from .errors import (
    CorruptFileError,
    DegenerateEmbeddingError,
    InvalidInputError,
    UnknownTextError,
    UnsupportedModeError,
    VersionMismatchError,
)

TRAINABLE = "trainable-ngram"
FROZEN = "frozen-lookup"

FROZEN_MAGIC = b"KELF"
FROZEN_VERSION = 1
_FROZEN_HEADER = struct.Struct("<4sIQI")

_U64 = (1 << 64) - 1


def worker_count() -> int:
    """Worker cap from ``KNN_EL_THREADS`` (default 1)."""
    raw = os.environ.get("KNN_EL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class FeatureHasherConfig:
    ngram_sizes: tuple[int, ...] = (2, 3, 4)
    feature_dim: int = 2**18
    hash_seed: int = 0

    def __post_init__(self) -> None:
        sizes = tuple(int(n) for n in self.ngram_sizes)
        if not sizes or any(n < 1 for n in sizes):
            raise InvalidInputError(f"ngram sizes must be non-empty and >= 1: {self.ngram_sizes}")
        if self.feature_dim < 2:
            raise InvalidInputError("feature_dim must be >= 2")
        object.__setattr__(self, "ngram_sizes", sizes)

    def to_dict(self) -> dict:
        return {"ngram_sizes": list(self.ngram_sizes), "feature_dim": self.feature_dim, "hash_seed": self.hash_seed}


@dataclass(frozen=True)
class SparseFeatures:
    """Bucket indices (ascending, unique) with their n-gram counts."""

    indices: np.ndarray
    counts: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


def char_ngrams(text: str, sizes: Sequence[int]) -> list[str]:
    marked = f"^{text}$"
    grams = []
    for n in sizes:
        grams.extend(marked[i : i + n] for i in range(len(marked) - n + 1))
    return grams


@lru_cache(maxsize=1 << 17)
def _featurize_cached(text: str, cfg: FeatureHasherConfig) -> SparseFeatures:
    key = struct.pack("<Q", cfg.hash_seed & _U64)
    buckets: dict[int, int] = {}
    for gram in char_ngrams(text, cfg.ngram_sizes):
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest()
        b = int.from_bytes(digest, "little") % cfg.feature_dim
        buckets[b] = buckets.get(b, 0) + 1
    idx = np.array(sorted(buckets), dtype=np.int64)
    counts = np.array([buckets[i] for i in idx], dtype=np.float64)
    idx.setflags(write=False)
    counts.setflags(write=False)
    return SparseFeatures(idx, counts)


def featurize(text: str, cfg: FeatureHasherConfig) -> SparseFeatures:
    """Hash the n-grams of already-normalized ``text`` into count buckets."""
    if not text:
        raise InvalidInputError("cannot featurize empty text")
    return _featurize_cached(text, cfg)


def feature_matrix(texts: Sequence[str], cfg: FeatureHasherConfig) -> sp.csr_matrix:
    """Stack normalized texts' features into a CSR matrix (one row per text)."""
    feats = _map(lambda t: featurize(t, cfg), texts)
    indptr = np.zeros(len(feats) + 1, dtype=np.int64)
    np.cumsum([f.nnz for f in feats], out=indptr[1:])
    if feats:
        indices = np.concatenate([f.indices for f in feats])
        data = np.concatenate([f.counts for f in feats])
    else:
        indices = np.empty(0, dtype=np.int64)
        data = np.empty(0, dtype=np.float64)
    return sp.csr_matrix((data, indices, indptr), shape=(len(feats), cfg.feature_dim))


def _map(fn, items):
    workers = worker_count()
    if workers > 1 and len(items) > 256:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


class FrozenTable:
    """Externally produced embeddings keyed by normalized text.

    The float32 values read from (or destined for) disk are kept verbatim so
    that save/load round-trips are byte-identical; lookups return the
    re-normalized float64 vector.
    """

    def __init__(self, entries: Mapping[str, np.ndarray]) -> None:
        self._raw: dict[str, np.ndarray] = {}
        self._unit: dict[str, np.ndarray] = {}
        dim = None
        for text, vec in entries.items():
            key = normalize_text(text)
            if key in self._raw:
                raise InvalidInputError(f"duplicate frozen entry after normalization: {key!r}")
            raw = np.asarray(vec, dtype="<f4").reshape(-1)
            if dim is None:
                dim = raw.size
            elif raw.size != dim:
                raise InvalidInputError(f"frozen entry {key!r} has dim {raw.size}, expected {dim}")
            if not np.all(np.isfinite(raw)):
                raise InvalidInputError(f"frozen entry {key!r} has non-finite values")
            v64 = raw.astype(np.float64)
            norm = np.sqrt(np.add.reduce(v64 * v64))
            if norm == 0.0:
                raise DegenerateEmbeddingError(f"frozen entry {key!r} is a zero vector")
            raw.setflags(write=False)
            unit = v64 / norm
            unit.setflags(write=False)
            self._raw[key] = raw
            self._unit[key] = unit
        if dim is None:
            raise InvalidInputError("frozen table must contain at least one entry")
        self.dim: int = dim

    def __len__(self) -> int:
        return len(self._raw)

    def __contains__(self, text: object) -> bool:
        return text in self._unit

    def lookup(self, normalized: str) -> np.ndarray:
        try:
            return self._unit[normalized]
        except KeyError:
            raise UnknownTextError(f"text not in frozen table: {normalized!r}") from None

    def items_raw(self):
        return self._raw.items()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrozenTable) or list(self._raw) != list(other._raw):
            return False
        return all(np.array_equal(self._raw[k], other._raw[k]) for k in self._raw)


@dataclass(eq=False)
class EncoderParams:
    mode: str
    hasher: FeatureHasherConfig | None = None
    projection: np.ndarray | None = None
    table: FrozenTable | None = None
    _fingerprint: bytes | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.mode == TRAINABLE:
            if self.hasher is None or self.projection is None:
                raise InvalidInputError("trainable encoder needs a hasher config and a projection")
            proj = np.ascontiguousarray(self.projection, dtype=np.float64)
            if proj.ndim != 2 or proj.shape[0] != self.hasher.feature_dim:
                raise InvalidInputError(
                    f"projection shape {proj.shape} does not match feature_dim {self.hasher.feature_dim}"
                )
            if proj.shape[1] < 2:
                raise InvalidInputError("embed_dim must be >= 2")
            if not np.all(np.isfinite(proj)):
                raise InvalidInputError("projection has non-finite entries")
            self.projection = proj
        elif self.mode == FROZEN:
            if self.table is None:
                raise InvalidInputError("frozen-lookup encoder needs a FrozenTable")
        else:
            raise InvalidInputError(f"unknown encoder mode {self.mode!r}")

    @property
    def embed_dim(self) -> int:
        return self.projection.shape[1] if self.mode == TRAINABLE else self.table.dim

    def fingerprint(self) -> bytes:
        """SHA-256 over everything that determines the encoder's output.

        Cached: call :meth:`invalidate` after mutating ``projection`` in place.
        """
        if self._fingerprint is None:
            h = hashlib.sha256(self.mode.encode())
            if self.mode == TRAINABLE:
                h.update(json.dumps(self.hasher.to_dict(), sort_keys=True).encode())
                h.update(struct.pack("<QQ", *self.projection.shape))
                h.update(self.projection.astype("<f8", copy=False).tobytes())
            else:
                for text, raw in self.table.items_raw():
                    h.update(struct.pack("<I", len(text.encode())) + text.encode())
                    h.update(raw.tobytes())
            self._fingerprint = h.digest()
        return self._fingerprint

    def invalidate(self) -> None:
        self._fingerprint = None

    def copy(self) -> "EncoderParams":
        if self.mode == TRAINABLE:
            return EncoderParams(TRAINABLE, self.hasher, self.projection.copy())
        return EncoderParams(FROZEN, table=self.table)


def init_params(
    hasher: FeatureHasherConfig | None = None, embed_dim: int = 128, seed: int = 0
) -> EncoderParams:
    """Seeded uniform(-1, 1) projection scaled by 1/sqrt(feature_dim)."""
    hasher = hasher or FeatureHasherConfig()
    rng = np.random.default_rng(seed)
    proj = rng.uniform(-1.0, 1.0, size=(hasher.feature_dim, embed_dim)) / np.sqrt(hasher.feature_dim)
    return EncoderParams(TRAINABLE, hasher, proj)


def frozen_params(table: FrozenTable) -> EncoderParams:
    return EncoderParams(FROZEN, table=table)


# forward / backward through projection + normalization


def _forward(X: sp.csr_matrix, W: np.ndarray, labels: Sequence[str] | None = None):
    Z = np.asarray(X @ W)
    norms = np.sqrt(np.add.reduce(Z * Z, axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        i = int(zero[0])
        what = repr(labels[i]) if labels is not None else ""
        raise DegenerateEmbeddingError(
            f"input {i} {what} projects to the zero vector (hashed rows are all zero)"
        )
    return Z / norms[:, None], norms


def _normalize_backward(U: np.ndarray, norms: np.ndarray, dU: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. pre-normalization rows given gradient w.r.t. unit rows."""
    radial = np.add.reduce(U * dU, axis=1)
    return (dU - U * radial[:, None]) / norms[:, None]


def normalize_backward(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Chain a gradient taken w.r.t. ``raw / |raw|`` back to ``raw``."""
    z = np.asarray(raw, dtype=np.float64).reshape(1, -1)
    norm = np.sqrt(np.add.reduce(z * z, axis=1))
    g = np.asarray(grad_unit, dtype=np.float64).reshape(1, -1)
    return _normalize_backward(z / norm[:, None], norm, g)[0]


def encode_all(texts: Sequence[str], params: EncoderParams) -> np.ndarray:
    """Encode raw texts; returns an ``(len(texts), embed_dim)`` array of unit rows."""
    normalized = []
    for i, t in enumerate(texts):
        try:
            normalized.append(normalize_text(t))
        except InvalidInputError as exc:
            raise type(exc)(f"input {i}: {exc}") from None
    if not normalized:
        return np.empty((0, params.embed_dim), dtype=np.float64)
    if params.mode == FROZEN:
        rows = []
        for i, t in enumerate(normalized):
            try:
                rows.append(params.table.lookup(t))
            except UnknownTextError as exc:
                raise UnknownTextError(f"input {i}: {exc}") from None
        return np.stack(rows)
    X = feature_matrix(normalized, params.hasher)
    U, _ = _forward(X, params.projection, normalized)
    return U


def encode(text: str, params: EncoderParams) -> np.ndarray:
    return encode_all([text], params)[0]


@dataclass(frozen=True)
class SparseGradient:
    """Projection gradient restricted to its nonzero rows."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=np.float64)
        out[self.rows] = self.values
        return out


def encode_gradient(text: str, params: EncoderParams, upstream_grad: np.ndarray) -> SparseGradient:
    """Contract d encode(text) / d projection with ``upstream_grad``."""
    if params.mode != TRAINABLE:
        raise UnsupportedModeError("gradients are only defined for the trainable encoder")
    feats = featurize(normalize_text(text), params.hasher)
    X = sp.csr_matrix(
        (feats.counts, feats.indices, np.array([0, feats.nnz])), shape=(1, params.hasher.feature_dim)
    )
    U, norms = _forward(X, params.projection, [text])
    g = np.asarray(upstream_grad, dtype=np.float64).reshape(1, -1)
    dZ = _normalize_backward(U, norms, g)[0]
    return SparseGradient(feats.indices.copy(), feats.counts[:, None] * dZ[None, :])


def projection_gradient(
    X: sp.csr_matrix, U: np.ndarray, norms: np.ndarray, dU: np.ndarray
) -> np.ndarray:
    """Dense projection gradient for a batch (rows of ``X`` with outputs ``U``)."""
    dZ = _normalize_backward(U, norms, dU)
    return np.asarray(X.T @ dZ)


# frozen embedding files


def save_frozen_table(table: FrozenTable, path: str | Path) -> None:
    from .io import atomic_write_bytes

    parts = [_FROZEN_HEADER.pack(FROZEN_MAGIC, FROZEN_VERSION, len(table), table.dim)]
    for text, raw in table.items_raw():
        b = text.encode("utf-8")
        parts.append(struct.pack("<I", len(b)))
        parts.append(b)
        parts.append(raw.astype("<f4", copy=False).tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_frozen_table(path: str | Path) -> FrozenTable:
    data = Path(path).read_bytes()
    what = "corrupt-embeddings"
    if len(data) < _FROZEN_HEADER.size:
        raise CorruptFileError(f"{path}: truncated header", category=what)
    magic, version, count, dim = _FROZEN_HEADER.unpack_from(data, 0)
    if magic != FROZEN_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}", category=what)
    if version != FROZEN_VERSION:
        raise VersionMismatchError(version, FROZEN_VERSION, what="frozen-embedding")
    if dim == 0:
        raise CorruptFileError(f"{path}: zero dimension", category=what)
    off = _FROZEN_HEADER.size
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + n + 4 * dim > len(data):
                raise CorruptFileError(f"{path}: truncated record", category=what)
            text = data[off : off + n].decode("utf-8")
            off += n
            entries[text] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
            off += 4 * dim
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}", category=what) from None
    if off != len(data):
        raise CorruptFileError(f"{path}: {len(data) - off} trailing bytes", category=what)
    try:
        return FrozenTable(entries)
    except InvalidInputError as exc:
        raise CorruptFileError(f"{path}: {exc}", category=what) from None
