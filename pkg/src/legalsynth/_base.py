"""Shared retrieval types, ranking helpers and input validation."""

from __future__ import annotations

import hashlib
import json
from typing import IO, Any, Iterable, Iterator, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

__version__ = "0.1.0"

# One query's ranked output: (passage id, score), best first.
Ranking = list[tuple[str, float]]
# Per-query rankings, the input to evaluation.
RunList = dict[str, Ranking]

META_KEY = "_meta"


class DataError(ValueError):
    """Raised when input data violates a documented contract."""


@runtime_checkable
class Retriever(Protocol):
    """Anything mapping query text to a ranked list of passage ids."""

    def search(self, query: str, top_k: int = 10) -> Ranking: ...

    def has_passage(self, passage_id: str) -> bool: ...


def rank_scores(scores: np.ndarray, ids: Sequence[str], top_k: int, id_order: np.ndarray | None = None) -> Ranking:
    """Top ``top_k`` by score descending, ties by passage id ascending.

    ``id_order`` is the precomputed lexicographic rank of each id; passing it
    avoids re-sorting the ids on every call.
    """
    check_positive_int(top_k, "top_k")
    scores = np.asarray(scores, dtype=np.float64)
    if id_order is None:
        id_order = lexical_order(ids)
    order = np.lexsort((id_order, -scores))[:top_k]
    return [(ids[i], float(scores[i])) for i in order]


def lexical_order(ids: Sequence[str]) -> np.ndarray:
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))
    return ranks


def check_positive_int(value: Any, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_matrix(x: Any, name: str, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def derive_seed(*parts: Any) -> int:
    """Stable 64-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def make_meta(seed: int | None = None, config: Mapping[str, Any] | None = None, **extra: Any) -> dict:
    meta = {"tool": "legalsynth", "version": __version__, "config_hash": config_hash(config or {}), "seed": seed}
    meta.update(extra)
    return meta


def write_jsonl(records: Iterable[Mapping[str, Any]], sink: IO[str], meta: Mapping[str, Any] | None = None) -> int:
    if meta is not None:
        sink.write(json.dumps({META_KEY: dict(meta)}, ensure_ascii=False, sort_keys=True) + "\n")
    n = 0
    for rec in records:
        sink.write(json.dumps(rec, ensure_ascii=False) + "\n")
        n += 1
    return n


def read_jsonl(source: Iterable[str]) -> Iterator[tuple[int, dict]]:
    """Yield (record index, record), skipping blank and metadata lines."""
    idx = 0
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if isinstance(rec, dict) and META_KEY in rec:
            continue
        if not isinstance(rec, dict):
            raise DataError(f"record {idx}: expected an object")
        yield idx, rec
        idx += 1


def require_fields(rec: Mapping[str, Any], fields: Sequence[str], idx: int) -> None:
    for f in fields:
        if f not in rec:
            raise DataError(f"record {idx}: missing field {f!r}")
