"""File formats: JSONL corpora, encoder parameter files, atomic writes."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EntityRecord, Mention, Ontology
from .encoder import TRAINABLE, EncoderParams, FeatureHasherConfig
from .errors import CorruptFileError, DataFileError, InvalidInputError, VersionMismatchError

PARAMS_MAGIC = b"KELP"
PARAMS_VERSION = 1


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(f"no such file: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataFileError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def load_ontology(path: str | Path) -> Ontology:
    records = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            records.append(EntityRecord(str(row["id"]), row["name"], tuple(row.get("synonyms") or ())))
        except KeyError as exc:
            raise DataFileError(f"{path}: entity record {i} lacks field {exc}") from None
        except InvalidInputError as exc:
            raise DataFileError(f"{path}: entity record {i}: {exc}") from None
    try:
        return Ontology(records)
    except InvalidInputError as exc:
        raise DataFileError(f"{path}: {exc}") from None


def load_mentions(path: str | Path, ontology: Ontology | None = None) -> list[Mention]:
    mentions = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            gold = row.get("entity_id")
            m = Mention(row["mention"], None if gold is None else str(gold))
        except KeyError as exc:
            raise DataFileError(f"{path}: mention record {i} lacks field {exc}") from None
        except InvalidInputError as exc:
            raise DataFileError(f"{path}: mention record {i}: {exc}") from None
        if ontology is not None and m.gold is not None and m.gold not in ontology:
            raise DataFileError(f"{path}: mention record {i}: entity {m.gold!r} not in ontology")
        mentions.append(m)
    return mentions


def ontology_jsonl(ontology: Ontology) -> str:
    return dumps_jsonl(
        {"id": r.id, "name": r.canonical_name, "synonyms": list(r.synonyms)} for r in ontology
    )


def mentions_jsonl(mentions: Sequence[Mention]) -> str:
    return dumps_jsonl({"mention": m.surface, "entity_id": m.gold} for m in mentions)


def save_params(params: EncoderParams, path: str | Path) -> None:
    if params.mode != TRAINABLE:
        raise InvalidInputError("only trainable encoder parameters are written to params files")
    header = json.dumps(
        {"mode": params.mode, "hasher": params.hasher.to_dict(), "shape": list(params.projection.shape)},
        sort_keys=True,
    ).encode()
    blob = (
        PARAMS_MAGIC
        + struct.pack("<II", PARAMS_VERSION, len(header))
        + header
        + params.projection.astype("<f8", copy=False).tobytes()
    )
    atomic_write_bytes(path, blob)


def load_params(path: str | Path) -> EncoderParams:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(f"no such params file: {path}")
    data = path.read_bytes()
    bad = "corrupt-params"
    if len(data) < 12 or data[:4] != PARAMS_MAGIC:
        raise CorruptFileError(f"{path}: not a params file", category=bad)
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != PARAMS_VERSION:
        raise VersionMismatchError(version, PARAMS_VERSION, what="params")
    try:
        header = json.loads(data[12 : 12 + hlen])
        rows, cols = header["shape"]
        hasher = FeatureHasherConfig(tuple(header["hasher"]["ngram_sizes"]), header["hasher"]["feature_dim"],
                                     header["hasher"]["hash_seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})", category=bad) from None
    body = data[12 + hlen :]
    if len(body) != rows * cols * 8:
        raise CorruptFileError(f"{path}: expected {rows * cols * 8} payload bytes, found {len(body)}", category=bad)
    proj = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    try:
        return EncoderParams(TRAINABLE, hasher, proj)
    except InvalidInputError as exc:
        raise CorruptFileError(f"{path}: {exc}", category=bad) from None
