"""Multi-vector MaxSim retrieval with b-bit residual compression."""

from __future__ import annotations

import functools
import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._base import DataError, Ranking, check_matrix, check_positive_int, lexical_order, rank_scores
from .corpus import Corpus, Passage, tokenize
from .dense import _bucket_sign

MAGIC = b"VLCI"
VERSION = 1
ALLOWED_BITS = (1, 2, 4, 8)
UNIT_TOL = 1e-6
MAX_CENTROIDS = 2**16


@dataclass(frozen=True)
class MultiVectorDoc:
    passage_id: str
    vectors: np.ndarray

    def __post_init__(self):
        v = check_matrix(self.vectors, f"token vectors of {self.passage_id!r}")
        if v.shape[0] == 0:
            raise DataError(f"document {self.passage_id!r} has no token vectors")
        if np.any(np.abs(np.linalg.norm(v, axis=1) - 1.0) > UNIT_TOL):
            raise DataError(f"document {self.passage_id!r} has non-unit token vectors")
        object.__setattr__(self, "vectors", v)


def maxsim_score(query_vectors: np.ndarray, doc: MultiVectorDoc | np.ndarray) -> float:
    """Sum over query vectors of the best dot product against any doc vector."""
    d = doc.vectors if isinstance(doc, MultiVectorDoc) else np.asarray(doc, dtype=np.float64)
    q = np.asarray(query_vectors, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] == 0:
        raise ValueError("document must have at least one token vector")
    if q.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ValueError(f"dimension mismatch: query {q.shape} vs doc {d.shape}")
    return float((q @ d.T).max(axis=1).sum())


@functools.lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, seed: int, ngram: int) -> np.ndarray:
    t = token.casefold()
    feats = [t]
    if ngram > 0:
        padded = f"<{t}>"
        feats += ["#" + padded[i : i + ngram] for i in range(max(1, len(padded) - ngram + 1))]
    vec = np.zeros(dim)
    for f in feats:
        b, s = _bucket_sign(f, dim, seed)
        vec[b] += s
    norm = np.linalg.norm(vec)
    if norm == 0:  # features cancelled out; fall back to the whole-token bucket
        b, s = _bucket_sign(t, dim, seed)
        vec[b], norm = s, 1.0
    vec /= norm
    vec.setflags(write=False)
    return vec


class TokenEncoder(BaseEstimator):
    """One unit vector per token: signed hashing of the token and its character n-grams.

    Tokens that share character n-grams get correlated vectors;
    ``ngram=0`` hashes whole tokens only.
    """

    def __init__(self, dim: int = 32, seed: int = 0, max_tokens: int = 256, ngram: int = 3):
        self.dim = dim
        self.seed = seed
        self.max_tokens = max_tokens
        self.ngram = ngram

    def encode(self, text: str) -> np.ndarray:
        check_positive_int(self.dim, "dim", 2)
        toks = tokenize(text)[: self.max_tokens]
        if not toks:
            raise DataError("cannot encode empty text")
        return np.stack([_token_vector(t, self.dim, self.seed, self.ngram) for t in toks])

    def encode_passage(self, passage: Passage) -> MultiVectorDoc:
        return MultiVectorDoc(passage.id, self.encode(passage.content))

    def encode_corpus(self, corpus: Corpus | Sequence[Passage]) -> list[MultiVectorDoc]:
        return [self.encode_passage(p) for p in corpus]


class ResidualQuantizer(TransformerMixin, BaseEstimator):
    """Uniform per-dimension scalar quantizer with ``2**bits`` buckets.

    Buckets span the observed [min, max] of each dimension; a value decodes
    to its bucket center, so in-range error is at most half a bucket width.
    Dimensions with min == max decode every code to that single value.
    """

    def __init__(self, bits: int = 2):
        self.bits = bits

    def fit(self, X: np.ndarray, y=None):
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {self.bits!r}")
        X = check_matrix(X, "residuals")
        if X.shape[0] == 0:
            raise ValueError("residual sample is empty")
        return self._set_range(X.min(axis=0), X.max(axis=0))

    def _set_range(self, lo: np.ndarray, hi: np.ndarray):
        self.lo_ = np.asarray(lo, dtype=np.float64)
        self.hi_ = np.asarray(hi, dtype=np.float64)
        self.n_buckets_ = 2**self.bits
        self.width_ = (self.hi_ - self.lo_) / self.n_buckets_
        return self

    @property
    def centers_(self) -> np.ndarray:
        """(dim, 2**bits) bucket centers."""
        check_is_fitted(self, "lo_")
        k = np.arange(self.n_buckets_) + 0.5
        return self.lo_[:, None] + k[None, :] * self.width_[:, None]

    def transform(self, X: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "lo_")
        X = check_matrix(X, "residuals", dim=len(self.lo_))
        safe = np.where(self.width_ > 0, self.width_, 1.0)
        codes = np.floor((X - self.lo_) / safe)
        codes = np.where(self.width_ > 0, codes, 0)
        return np.clip(codes, 0, self.n_buckets_ - 1).astype(np.uint8)

    def inverse_transform(self, codes: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "lo_")
        codes = np.asarray(codes)
        return self.lo_ + (codes.astype(np.float64) + 0.5) * self.width_

    @property
    def half_width_(self) -> np.ndarray:
        return self.width_ / 2.0


def fit_quantizer(residuals: np.ndarray, bits: int = 2) -> ResidualQuantizer:
    return ResidualQuantizer(bits).fit(residuals)


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack (n, d) codes into (n, ceil(d*bits/8)) bytes, least significant bit first."""
    codes = np.asarray(codes, dtype=np.uint8)
    if bits == 8:
        return codes.copy()
    n, d = codes.shape
    shifts = np.arange(bits, dtype=np.uint8)
    bitplanes = (codes[:, :, None] >> shifts) & 1
    return np.packbits(bitplanes.reshape(n, d * bits), axis=1, bitorder="little")


def unpack_codes(packed: np.ndarray, dim: int, bits: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if bits == 8:
        return packed[:, :dim].copy()
    n = packed.shape[0]
    flat = np.unpackbits(packed, axis=1, count=dim * bits, bitorder="little").reshape(n, dim, bits)
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (flat * weights).sum(axis=2).astype(np.uint8)


def default_n_centroids(n_vectors: int) -> int:
    c = 1 << max(0, math.ceil(math.log2(max(1.0, 4.0 * math.sqrt(n_vectors)))))
    return max(1, min(c, MAX_CENTROIDS, n_vectors))


def _sq_dists(X: np.ndarray, C: np.ndarray, x_sq: np.ndarray) -> np.ndarray:
    return x_sq[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]


def _assign(X: np.ndarray, C: np.ndarray, x_sq: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.int64)
    for s in range(0, X.shape[0], chunk):
        out[s : s + chunk] = np.argmin(_sq_dists(X[s : s + chunk], C, x_sq[s : s + chunk]), axis=1)
    return out


def kmeans(X: np.ndarray, n_centroids: int, n_iter: int = 20, seed: int = 0) -> np.ndarray:
    """Lloyd's k-means with seeded farthest-point initialization.

    Empty clusters keep their previous centroid. Deterministic given seed.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= n_centroids <= n:
        raise ValueError(f"n_centroids must be in [1, {n}], got {n_centroids}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    min_d = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, n_centroids):
        nxt = int(np.argmax(min_d))
        chosen.append(nxt)
        min_d = np.minimum(min_d, ((X - X[nxt]) ** 2).sum(axis=1))
    C = X[chosen].copy()
    x_sq = (X * X).sum(axis=1)
    prev = None
    for _ in range(n_iter):
        labels = _assign(X, C, x_sq)
        if prev is not None and np.array_equal(labels, prev):
            break
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=n_centroids)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        prev = labels
    return C


class CompressedLateInteractionIndex(BaseEstimator):
    """Late-interaction index storing each token vector as centroid id + b-bit residual.

    Search decodes every vector and scores exhaustively with MaxSim.
    """

    def __init__(
        self,
        bits: int = 2,
        n_centroids: int | None = None,
        n_iter: int = 20,
        seed: int = 0,
        encoder: TokenEncoder | None = None,
    ):
        self.bits = bits
        self.n_centroids = n_centroids
        self.n_iter = n_iter
        self.seed = seed
        self.encoder = encoder

    def fit(self, X: Sequence[MultiVectorDoc] | Corpus, y=None):
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {self.bits!r}")
        docs = list(X)
        if docs and isinstance(docs[0], Passage):
            if self.encoder is None:
                raise ValueError("fitting on passages requires an encoder")
            docs = self.encoder.encode_corpus(docs)
        if not docs:
            raise DataError("cannot build an index over no documents")
        ids = [doc.passage_id for doc in docs]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate passage ids in documents")
        dims = {doc.vectors.shape[1] for doc in docs}
        if len(dims) != 1:
            raise DataError(f"documents have mixed dimensions {sorted(dims)}")
        V = np.concatenate([doc.vectors for doc in docs])
        n_cent = self.n_centroids or default_n_centroids(len(V))
        check_positive_int(n_cent, "n_centroids")
        if n_cent > len(V):
            raise ValueError(f"n_centroids={n_cent} exceeds the {len(V)} token vectors")
        centroids = kmeans(V, n_cent, self.n_iter, self.seed).astype(np.float32).astype(np.float64)
        x_sq = (V * V).sum(axis=1)
        assign = _assign(V, centroids, x_sq)
        residuals = V - centroids[assign]
        quantizer = ResidualQuantizer(self.bits).fit(residuals)
        codes = quantizer.transform(residuals)
        lengths = np.array([len(doc.vectors) for doc in docs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        self._set_state(centroids, quantizer, assign.astype(np.uint32), pack_codes(codes, self.bits), ids, offsets)
        return self

    def _set_state(self, centroids, quantizer, centroid_ids, packed, ids, offsets):
        self.centroids_ = centroids
        self.quantizer_ = quantizer
        self.centroid_ids_ = centroid_ids
        self.packed_codes_ = packed
        self.ids_ = list(ids)
        self.offsets_ = np.asarray(offsets, dtype=np.int64)
        self.dim_ = centroids.shape[1]
        self.id_order_ = lexical_order(self.ids_)
        self.ordinal_ = {pid: i for i, pid in enumerate(self.ids_)}
        codes = unpack_codes(packed, self.dim_, self.bits)
        self.decoded_ = centroids[centroid_ids.astype(np.int64)] + quantizer.inverse_transform(codes)

    @property
    def n_vectors_(self) -> int:
        return len(self.centroid_ids_)

    def doc_vectors(self, passage_id: str) -> np.ndarray:
        i = self.ordinal_[passage_id]
        return self.decoded_[self.offsets_[i] : self.offsets_[i + 1]]

    def scores(self, query_vectors: np.ndarray) -> np.ndarray:
        check_is_fitted(self, "decoded_")
        q = check_matrix(query_vectors, "query vectors", dim=self.dim_)
        sims = q @ self.decoded_.T
        return np.maximum.reduceat(sims, self.offsets_[:-1], axis=1).sum(axis=0)

    def search(self, query: str | np.ndarray, top_k: int = 10) -> Ranking:
        if isinstance(query, str):
            if self.encoder is None:
                raise ValueError("text search needs an encoder")
            query = self.encoder.encode(query)
        return rank_scores(self.scores(query), self.ids_, top_k, self.id_order_)

    def has_passage(self, passage_id: str) -> bool:
        return passage_id in self.ordinal_

    def storage_report(self) -> dict:
        check_is_fitted(self, "decoded_")
        return storage_layout(self.n_vectors_, self.dim_, self.bits, len(self.centroids_))

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "decoded_")
        buf = io.BytesIO()
        C, d = self.centroids_.shape
        buf.write(MAGIC + struct.pack("<BIIBI", VERSION, C, d, self.bits, self.n_vectors_))
        buf.write(np.ascontiguousarray(self.centroids_, dtype="<f4").tobytes())
        buf.write(np.stack([self.quantizer_.lo_, self.quantizer_.hi_], axis=1).astype("<f8").tobytes())
        buf.write(struct.pack("<I", len(self.ids_)))
        for i, pid in enumerate(self.ids_):
            raw = pid.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<II", self.offsets_[i], self.offsets_[i + 1]))
        entries = np.empty(self.n_vectors_, dtype=[("cid", "<u4"), ("codes", "u1", (self.packed_codes_.shape[1],))])
        entries["cid"] = self.centroid_ids_
        entries["codes"] = self.packed_codes_
        buf.write(entries.tobytes())
        return buf.getvalue()

    def save(self, sink: BinaryIO) -> None:
        sink.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, encoder: TokenEncoder | None = None) -> "CompressedLateInteractionIndex":
        if data[:4] != MAGIC:
            raise DataError("not a compressed late-interaction index (bad magic)")
        hdr = "<BIIBI"
        version, C, d, bits, n = struct.unpack_from(hdr, data, 4)
        if version != VERSION:
            raise DataError(f"unsupported index version {version}")
        if bits not in ALLOWED_BITS:
            raise DataError(f"invalid bit width {bits} in index file")
        pos = 4 + struct.calcsize(hdr)
        centroids = np.frombuffer(data, "<f4", C * d, pos).reshape(C, d).astype(np.float64)
        pos += 4 * C * d
        bounds = np.frombuffer(data, "<f8", 2 * d, pos).reshape(d, 2)
        pos += 16 * d
        (n_docs,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids, offsets = [], [0]
        for _ in range(n_docs):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ids.append(data[pos : pos + ln].decode("utf-8"))
            pos += ln
            start, end = struct.unpack_from("<II", data, pos)
            pos += 8
            if start != offsets[-1]:
                raise DataError("doc offset table is not contiguous")
            offsets.append(end)
        width = math.ceil(d * bits / 8)
        entries = np.frombuffer(data, [("cid", "<u4"), ("codes", "u1", (width,))], n, pos)
        if np.any(entries["cid"] >= C):
            raise DataError("centroid id out of range")
        est = cls(bits=bits, n_centroids=C, encoder=encoder)
        quantizer = ResidualQuantizer(bits)._set_range(bounds[:, 0], bounds[:, 1])
        est._set_state(centroids, quantizer, entries["cid"].astype(np.uint32), entries["codes"].copy(), ids, offsets)
        return est

    @classmethod
    def load(cls, source: BinaryIO, encoder: TokenEncoder | None = None) -> "CompressedLateInteractionIndex":
        return cls.from_bytes(source.read(), encoder=encoder)


def storage_layout(n_vectors: int, dim: int, bits: int, n_centroids: int) -> dict:
    """Analytic payload sizes of an index file, excluding header and doc offset table."""
    code_bytes = math.ceil(dim * bits / 8)
    parts = {
        "bytes_centroids": n_centroids * dim * 4,
        "bytes_quantizer": dim * 16,
        "bytes_ids": n_vectors * 4,
        "bytes_residuals": n_vectors * code_bytes,
    }
    parts["bytes_total"] = sum(parts.values())
    parts["bytes_per_vector"] = 4 + code_bytes
    return parts


def exact_search(docs: Sequence[MultiVectorDoc], query_vectors: np.ndarray, top_k: int = 10) -> Ranking:
    """Uncompressed exhaustive MaxSim, the reference for compressed search."""
    scores = np.array([maxsim_score(query_vectors, doc) for doc in docs])
    return rank_scores(scores, [doc.passage_id for doc in docs], top_k)
