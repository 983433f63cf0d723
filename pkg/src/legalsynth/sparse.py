"""BM25 inverted index retriever."""

from __future__ import annotations

import io
import math
import struct
from collections import Counter
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._base import DataError, Ranking, lexical_order, rank_scores
from .corpus import Corpus, tokenize

MAGIC = b"VLBM"
VERSION = 1


def analyze(text: str) -> list[str]:
    return [t.casefold() for t in tokenize(text)]


@dataclass
class InvertedIndex:
    # term -> (ordinals ascending, term frequencies)
    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    doc_lengths: np.ndarray
    ids: list[str]

    @property
    def doc_count(self) -> int:
        return len(self.ids)

    @property
    def avg_doc_length(self) -> float:
        return float(self.doc_lengths.mean())

    def df(self, term: str) -> int:
        p = self.postings.get(term)
        return 0 if p is None else len(p[0])


def build_index(corpus: Corpus | Sequence) -> InvertedIndex:
    passages = list(corpus)
    if not passages:
        raise DataError("cannot build a BM25 index over an empty corpus")
    acc: dict[str, tuple[list[int], list[int]]] = {}
    lengths = []
    for ordinal, p in enumerate(passages):
        toks = analyze(p.content)
        lengths.append(len(toks))
        for term, tf in Counter(toks).items():
            ords, tfs = acc.setdefault(term, ([], []))
            ords.append(ordinal)
            tfs.append(tf)
    if sum(lengths) == 0:
        raise DataError("corpus has no tokens")
    postings = {
        t: (np.asarray(o, dtype=np.int64), np.asarray(f, dtype=np.int64)) for t, (o, f) in sorted(acc.items())
    }
    return InvertedIndex(postings, np.asarray(lengths, dtype=np.int64), [p.id for p in passages])


class BM25Retriever(BaseEstimator):
    """Okapi BM25 with a non-negative idf, ``ln(1 + (N - df + 0.5) / (df + 0.5))``."""

    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b

    def fit(self, X: Corpus | Sequence, y=None):
        if self.k1 < 0 or not 0 <= self.b <= 1:
            raise ValueError("BM25 requires k1 >= 0 and 0 <= b <= 1")
        self._set_index(build_index(X))
        return self

    def _set_index(self, index: InvertedIndex) -> None:
        self.index_ = index
        self.id_order_ = lexical_order(index.ids)
        self.ordinal_ = {pid: i for i, pid in enumerate(index.ids)}
        self.length_norm_ = 1.0 - self.b + self.b * index.doc_lengths / index.avg_doc_length

    def idf(self, term: str) -> float:
        check_is_fitted(self, "index_")
        n, df = self.index_.doc_count, self.index_.df(term)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def score_all(self, query_tokens: Sequence[str]) -> np.ndarray:
        """BM25 score of every passage for an already-analyzed query."""
        check_is_fitted(self, "index_")
        scores = np.zeros(self.index_.doc_count, dtype=np.float64)
        for term in query_tokens:
            posting = self.index_.postings.get(term)
            if posting is None:
                continue
            ords, tfs = posting
            idf = self.idf(term)
            scores[ords] += idf * tfs * (self.k1 + 1.0) / (tfs + self.k1 * self.length_norm_[ords])
        return scores

    def score(self, query_tokens: Sequence[str], ordinal: int) -> float:
        check_is_fitted(self, "index_")
        if not 0 <= ordinal < self.index_.doc_count:
            raise IndexError(f"ordinal {ordinal} out of range")
        return float(self.score_all(query_tokens)[ordinal])

    def search(self, query: str, top_k: int = 10) -> Ranking:
        return rank_scores(self.score_all(analyze(query)), self.index_.ids, top_k, self.id_order_)

    def has_passage(self, passage_id: str) -> bool:
        check_is_fitted(self, "index_")
        return passage_id in self.ordinal_

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "index_")
        idx = self.index_
        buf = io.BytesIO()
        buf.write(MAGIC + struct.pack("<Bdd", VERSION, self.k1, self.b))
        buf.write(struct.pack("<I", idx.doc_count))
        for pid, length in zip(idx.ids, idx.doc_lengths):
            raw = pid.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", int(length)))
        buf.write(struct.pack("<I", len(idx.postings)))
        for term, (ords, tfs) in idx.postings.items():
            raw = term.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(ords)))
            pairs = np.empty((len(ords), 2), dtype="<u4")
            pairs[:, 0], pairs[:, 1] = ords, tfs
            buf.write(pairs.tobytes())
        return buf.getvalue()

    def save(self, sink: BinaryIO) -> None:
        sink.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "BM25Retriever":
        if data[:4] != MAGIC:
            raise DataError("not a BM25 index file (bad magic)")
        version, k1, b = struct.unpack_from("<Bdd", data, 4)
        if version != VERSION:
            raise DataError(f"unsupported BM25 index version {version}")
        pos = 4 + struct.calcsize("<Bdd")

        def u32() -> int:
            nonlocal pos
            (v,) = struct.unpack_from("<I", data, pos)
            pos += 4
            return v

        def text() -> str:
            nonlocal pos
            n = u32()
            s = data[pos : pos + n].decode("utf-8")
            pos += n
            return s

        ids, lengths = [], []
        for _ in range(u32()):
            ids.append(text())
            lengths.append(u32())
        postings = {}
        for _ in range(u32()):
            term = text()
            n = u32()
            pairs = np.frombuffer(data, dtype="<u4", count=2 * n, offset=pos).reshape(n, 2).astype(np.int64)
            pos += 8 * n
            postings[term] = (pairs[:, 0].copy(), pairs[:, 1].copy())
        est = cls(k1=k1, b=b)
        est._set_index(InvertedIndex(postings, np.asarray(lengths, dtype=np.int64), ids))
        return est

    @classmethod
    def load(cls, source: BinaryIO) -> "BM25Retriever":
        return cls.from_bytes(source.read())
