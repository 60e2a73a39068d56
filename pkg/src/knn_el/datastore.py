"""Key-value datastore of training mentions and nearest-neighbor search.

Keys are the encoder's mention embeddings, values the gold entity ids.
Keys are rounded to float32 at build time (the on-disk precision) so a saved
store reloads bit-for-bit.

Exact search scans every key. :class:`ClusterIndex` is an opt-in
branch-and-bound index: keys are grouped by spherical k-means, and a cluster
is skipped only when the Cauchy-Schwarz bound ``q.c + |q| r`` rules out every
member beating the current k-th hit. Surviving rows are scored with the same
routine as the exact path, so both return identical lists, ties included.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EntityId, Mention, Ontology, check_golds, row_similarities, top_k_indices
from .encoder import EncoderParams, encode_all
from .errors import (
    CorruptFileError,
    IndexNotBuiltError,
    InvalidInputError,
    VersionMismatchError,
)

log = logging.getLogger(__name__)

STORE_MAGIC = b"KELS"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIQI32s")
_BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class NeighborHit:
    row: int
    similarity: float
    entity: EntityId


@dataclass(frozen=True)
class ClusterIndex:
    centroids: np.ndarray  # (C, dim), not normalized
    radii: np.ndarray  # (C,) max member distance to centroid
    members: tuple[np.ndarray, ...]  # ascending row ids per cluster


@dataclass(frozen=True, eq=False)
class Datastore:
    keys: np.ndarray
    values: tuple[EntityId, ...]
    provenance: tuple[str, ...]
    fingerprint: bytes
    index: ClusterIndex | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        keys = np.asarray(self.keys, dtype=np.float64)
        if keys.ndim != 2:
            raise InvalidInputError("datastore keys must be a 2-d array")
        if not (keys.shape[0] == len(self.values) == len(self.provenance)):
            raise InvalidInputError("datastore keys, values and provenance must align")
        if len(self.fingerprint) != 32:
            raise InvalidInputError("fingerprint must be 32 bytes")
        keys.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Datastore)
            and self.keys.shape == other.keys.shape
            and np.array_equal(self.keys, other.keys)
            and self.values == other.values
            and self.provenance == other.provenance
            and self.fingerprint == other.fingerprint
        )

    def __repr__(self) -> str:
        return f"Datastore(M={self.size}, dim={self.dim}, indexed={self.index is not None})"


def build_datastore(
    train_set: Sequence[Mention], params: EncoderParams, ontology: Ontology | None = None
) -> Datastore:
    """One row per training instance, in input order, no deduplication."""
    if ontology is not None:
        check_golds(train_set, ontology)
    elif any(m.gold is None for m in train_set):
        raise InvalidInputError("every datastore instance needs a gold entity")
    emb = encode_all([m.surface for m in train_set], params)
    keys = emb.astype(np.float32).astype(np.float64)
    return Datastore(
        keys.reshape(len(train_set), params.embed_dim),
        tuple(m.gold for m in train_set),
        tuple(m.surface for m in train_set),
        params.fingerprint(),
    )


def _check_query(store: Datastore, query: np.ndarray, k: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (store.dim,):
        raise InvalidInputError(f"query dim {q.shape} does not match store dim {store.dim}")
    if k < 1:
        raise InvalidInputError("k must be positive")
    return q


def _hits(store: Datastore, rows: np.ndarray, sims: np.ndarray) -> list[NeighborHit]:
    return [
        NeighborHit(int(r), float(min(1.0, max(-1.0, s))), store.values[r]) for r, s in zip(rows, sims)
    ]


def query_knn(store: Datastore, query: np.ndarray, k: int) -> list[NeighborHit]:
    """Exact top-k by cosine; descending similarity, ties by ascending row."""
    q = _check_query(store, query, k)
    if store.size == 0:
        return []
    sims = row_similarities(store.keys, q)
    top = top_k_indices(sims, k)
    return _hits(store, top, sims[top])


def build_index(store: Datastore, n_clusters: int | None = None, iters: int = 8, seed: int = 0) -> Datastore:
    """Return a copy of ``store`` carrying a :class:`ClusterIndex`."""
    m = store.size
    if m == 0:
        idx = ClusterIndex(np.zeros((0, store.dim)), np.zeros(0), ())
        return replace(store, index=idx)
    c = n_clusters or max(1, int(round(np.sqrt(m))))
    c = min(c, m)
    keys = store.keys
    rng = np.random.default_rng(seed)
    centroids = keys[np.sort(rng.choice(m, size=c, replace=False))].copy()
    for _ in range(iters):
        assign = np.argmax(keys @ centroids.T, axis=1)
        for j in range(c):
            sel = assign == j
            if sel.any():
                mean = keys[sel].mean(axis=0)
                n = np.linalg.norm(mean)
                if n > 0:
                    centroids[j] = mean / n
    assign = np.argmax(keys @ centroids.T, axis=1)
    members, cents, radii = [], [], []
    for j in range(c):
        rows = np.flatnonzero(assign == j)
        if rows.size == 0:
            continue
        # the bound holds for any reference point; use the member mean
        center = keys[rows].mean(axis=0)
        radius = float(np.sqrt(((keys[rows] - center) ** 2).sum(axis=1)).max())
        members.append(rows)
        cents.append(center)
        radii.append(radius)
    idx = ClusterIndex(np.array(cents), np.array(radii), tuple(members))
    return replace(store, index=idx)


def query_knn_indexed(store: Datastore, query: np.ndarray, k: int) -> list[NeighborHit]:
    """Same contract and output as :func:`query_knn`, pruned by the cluster index."""
    if store.index is None:
        raise IndexNotBuiltError("datastore has no index; call build_index first")
    q = _check_query(store, query, k)
    if store.size == 0:
        return []
    idx = store.index
    qnorm = float(np.sqrt(np.add.reduce(q * q)))
    bounds = idx.centroids @ q + qnorm * idx.radii + _BOUND_SLACK
    order = np.argsort(-bounds, kind="stable")
    k_eff = min(k, store.size)
    scanned_rows: list[np.ndarray] = []
    scanned_sims: list[np.ndarray] = []
    count = 0
    kth = -np.inf
    for ci in order:
        if count >= k_eff and bounds[ci] < kth:
            break
        rows = idx.members[ci]
        scanned_rows.append(rows)
        scanned_sims.append(row_similarities(store.keys[rows], q))
        count += rows.size
        if count >= k_eff:
            allsims = np.concatenate(scanned_sims)
            kth = np.partition(allsims, allsims.size - k_eff)[allsims.size - k_eff]
    rows = np.concatenate(scanned_rows)
    sims = np.concatenate(scanned_sims)
    perm = np.argsort(rows, kind="stable")
    rows, sims = rows[perm], sims[perm]
    top = top_k_indices(sims, k_eff)
    return _hits(store, rows[top], sims[top])


def save_datastore(store: Datastore, path: str | Path) -> None:
    from .io import atomic_write_bytes

    parts = [_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.size, store.dim, store.fingerprint)]
    parts.append(store.keys.astype("<f4").tobytes())
    for seq in (store.values, store.provenance):
        for s in seq:
            b = s.encode("utf-8")
            parts.append(struct.pack("<I", len(b)))
            parts.append(b)
    atomic_write_bytes(path, b"".join(parts))


def load_datastore(path: str | Path) -> Datastore:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, version, m, dim, fp = _HEADER.unpack_from(data, 0)
    if magic != STORE_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise VersionMismatchError(version, STORE_VERSION)
    off = _HEADER.size
    nbytes = 4 * m * dim
    if off + nbytes > len(data):
        raise CorruptFileError(f"{path}: truncated key block")
    keys = np.frombuffer(data, dtype="<f4", count=m * dim, offset=off).astype(np.float64).reshape(m, dim)
    off += nbytes
    seqs: list[list[str]] = [[], []]
    try:
        for seq in seqs:
            for _ in range(m):
                (n,) = struct.unpack_from("<I", data, off)
                off += 4
                if off + n > len(data):
                    raise CorruptFileError(f"{path}: truncated string table")
                seq.append(data[off : off + n].decode("utf-8"))
                off += n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    if off != len(data):
        raise CorruptFileError(f"{path}: {len(data) - off} trailing bytes")
    return Datastore(keys, tuple(seqs[0]), tuple(seqs[1]), fp)
