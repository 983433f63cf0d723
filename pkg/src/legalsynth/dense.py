"""Single-vector exhaustive dot-product retrieval and embedding providers."""

from __future__ import annotations

import abc
import hashlib
import struct
from typing import BinaryIO, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._base import DataError, Ranking, check_matrix, check_positive_int, lexical_order, rank_scores
from .corpus import Corpus, Passage, tokenize

MAGIC = b"VLDE"
VERSION = 1


def _bucket_sign(token: str, dim: int, seed: int) -> tuple[int, float]:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    v = int.from_bytes(h, "little")
    return (v >> 1) % dim, (1.0 if v & 1 else -1.0)


def pseudo_embed(text: str, dim: int = 64, seed: int = 0, normalize: bool = True) -> np.ndarray:
    """Signed feature hashing of case-folded tokens into ``dim`` buckets.

    Empty text maps to the zero vector.
    """
    check_positive_int(dim, "dim", 2)
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        b, s = _bucket_sign(tok.casefold(), dim, seed)
        vec[b] += s
    norm = np.linalg.norm(vec)
    if normalize and norm > 0:
        vec /= norm
    return vec


class EmbeddingProvider(abc.ABC):
    dim: int

    @abc.abstractmethod
    def embed_query(self, text: str) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_passage(self, passage: Passage) -> np.ndarray: ...


class PseudoEmbedder(TransformerMixin, BaseEstimator, EmbeddingProvider):
    """Deterministic hashing encoder, used for both queries and passages."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def fit(self, X=None, y=None):
        check_positive_int(self.dim, "dim", 2)
        return self

    def transform(self, X: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed_query(t) for t in X]) if len(X) else np.zeros((0, self.dim))

    def embed_query(self, text: str) -> np.ndarray:
        return pseudo_embed(text, self.dim, self.seed)

    def embed_passage(self, passage: Passage) -> np.ndarray:
        return pseudo_embed(passage.content, self.dim, self.seed)


def embed_corpus(corpus: Corpus | Sequence[Passage], provider: EmbeddingProvider) -> np.ndarray:
    rows = []
    for p in corpus:
        try:
            v = np.asarray(provider.embed_passage(p), dtype=np.float64)
        except Exception as exc:
            raise DataError(f"embedding failed for passage {p.id!r}: {exc}") from exc
        if v.shape != (provider.dim,):
            raise DataError(f"passage {p.id!r}: embedding has shape {v.shape}, expected ({provider.dim},)")
        rows.append(v)
    return np.stack(rows)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


class DenseRetriever(BaseEstimator):
    """Flat index over one vector per passage, scored by dot product.

    ``similarity="cosine"`` normalizes both sides before the dot product.
    """

    def __init__(self, provider: EmbeddingProvider | None = None, similarity: str = "dot"):
        self.provider = provider
        self.similarity = similarity

    def fit(self, X: Corpus | Sequence[Passage], y=None):
        if self.provider is None:
            raise ValueError("DenseRetriever needs an embedding provider to fit a corpus")
        check_positive_int(self.provider.dim, "provider dimension", 2)
        passages = list(X)
        if not passages:
            raise DataError("cannot build a dense index over an empty corpus")
        return self.set_matrix(embed_corpus(passages, self.provider), [p.id for p in passages])

    def set_matrix(self, matrix: np.ndarray, ids: Sequence[str]):
        matrix = check_matrix(matrix, "embedding matrix")
        if len(ids) != matrix.shape[0] or len(set(ids)) != len(ids):
            raise DataError("ids must be unique and match the matrix row count")
        if self.similarity not in ("dot", "cosine"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        self.matrix_ = _unit_rows(matrix) if self.similarity == "cosine" else matrix
        self.ids_ = list(ids)
        self.id_order_ = lexical_order(self.ids_)
        self.ordinal_ = {pid: i for i, pid in enumerate(self.ids_)}
        self.dim_ = matrix.shape[1]
        return self

    def scores(self, query_vector: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "matrix_")
        q = np.asarray(query_vector, dtype=np.float64)
        if q.shape != (self.dim_,):
            raise ValueError(f"query vector has shape {q.shape}, expected ({self.dim_},)")
        if self.similarity == "cosine":
            q = _unit_rows(q)
        return self.matrix_ @ q

    def search_vector(self, query_vector: np.ndarray, top_k: int = 10) -> Ranking:
        return rank_scores(self.scores(query_vector), self.ids_, top_k, self.id_order_)

    def search(self, query: str, top_k: int = 10) -> Ranking:
        if self.provider is None:
            raise ValueError("text search needs an embedding provider")
        return self.search_vector(self.provider.embed_query(query), top_k)

    def has_passage(self, passage_id: str) -> bool:
        check_is_fitted(self, "matrix_")
        return passage_id in self.ordinal_


def dense_search(matrix: np.ndarray, ids: Sequence[str], query_vector: np.ndarray, top_k: int) -> Ranking:
    return DenseRetriever().set_matrix(matrix, ids).search_vector(query_vector, top_k)


def save_embeddings(matrix: np.ndarray, sink: BinaryIO) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    sink.write(MAGIC + struct.pack("<BII", VERSION, m.shape[0], m.shape[1]) + m.tobytes())


def load_embeddings(source: BinaryIO) -> np.ndarray:
    data = source.read()
    if data[:4] != MAGIC:
        raise DataError("not an embedding matrix file (bad magic)")
    version, count, dim = struct.unpack_from("<BII", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported embedding file version {version}")
    offset = 4 + struct.calcsize("<BII")
    if len(data) - offset != 4 * count * dim:
        raise DataError("embedding file is truncated")
    return np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim).astype(np.float64)
