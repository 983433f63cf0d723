"""Legal document ingestion, passage flattening and token-budget chunking."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import IO, Iterable, Iterator, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from ._base import DataError, check_positive_int, read_jsonl, require_fields, write_jsonl

HEADER_SEP = ", "
MIN_CHUNK_TOKENS = 8


def tokenize(text: str | bytes) -> list[str]:
    """NFC-normalize and split on Unicode whitespace.

    >>> tokenize("a  b\\tc")
    ['a', 'b', 'c']
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValueError(f"invalid UTF-8 input at byte {exc.start}") from exc
    return unicodedata.normalize("NFC", text).split()


@dataclass(frozen=True)
class LegalDocument:
    id: str
    domain: str
    title: str
    sections: tuple[tuple[tuple[str, ...], str], ...]


@dataclass(frozen=True)
class Passage:
    id: str
    doc_id: str
    domain: str
    title: str
    header: str
    content: str
    token_count: int = field(default=-1)

    def __post_init__(self):
        if self.token_count < 0:
            object.__setattr__(self, "token_count", len(tokenize(self.content)))

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "doc_id": self.doc_id,
            "domain": self.domain,
            "title": self.title,
            "header": self.header,
            "content": self.content,
        }


class Corpus:
    """Ordered, immutable collection of passages grouped by document."""

    def __init__(self, passages: Iterable[Passage] = ()):
        self._passages = tuple(passages)
        by_id: dict[str, Passage] = {}
        doc_index: dict[str, list[str]] = {}
        for p in self._passages:
            if p.id in by_id:
                raise DataError(f"duplicate passage id {p.id!r}")
            by_id[p.id] = p
            doc_index.setdefault(p.doc_id, []).append(p.id)
        self._by_id = by_id
        self.doc_index: Mapping[str, tuple[str, ...]] = MappingProxyType(
            {k: tuple(v) for k, v in doc_index.items()}
        )

    @property
    def passages(self) -> tuple[Passage, ...]:
        return self._passages

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self._passages]

    def __len__(self) -> int:
        return len(self._passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self._passages)

    def __getitem__(self, passage_id: str) -> Passage:
        return self._by_id[passage_id]

    def __contains__(self, passage_id: object) -> bool:
        return passage_id in self._by_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Corpus) and self._passages == other._passages

    def doc_of(self, passage_id: str) -> str:
        return self._by_id[passage_id].doc_id

    def write(self, sink: IO[str], meta: Mapping | None = None) -> int:
        return write_jsonl((p.to_record() for p in self._passages), sink, meta=meta)

    @classmethod
    def read(cls, source: Iterable[str]) -> "Corpus":
        passages = []
        for idx, rec in read_jsonl(source):
            require_fields(rec, ("id", "doc_id", "domain", "title", "header", "content"), idx)
            passages.append(
                Passage(rec["id"], rec["doc_id"], rec["domain"], rec["title"], rec["header"], rec["content"])
            )
        return cls(passages)


def _parse_document(rec: dict, idx: int) -> LegalDocument:
    require_fields(rec, ("id", "domain", "title", "sections"), idx)
    doc_id = rec["id"]
    if not isinstance(doc_id, str) or not doc_id.strip():
        raise DataError(f"record {idx}: field 'id' must be a non-empty string")
    if not isinstance(rec["sections"], list):
        raise DataError(f"record {idx}: field 'sections' must be a list")
    sections = []
    for j, sec in enumerate(rec["sections"]):
        if not isinstance(sec, dict):
            raise DataError(f"record {idx}: section {j} must be an object")
        for f in ("header", "body"):
            if f not in sec:
                raise DataError(f"record {idx}: section {j} missing field {f!r}")
        header = sec["header"]
        if not isinstance(header, list) or not all(isinstance(h, str) for h in header):
            raise DataError(f"record {idx}: section {j} 'header' must be a list of strings")
        body = sec["body"]
        if not isinstance(body, str) or not body.strip():
            raise DataError(f"record {idx}: section {j} has an empty body")
        sections.append((tuple(header), body))
    return LegalDocument(doc_id, str(rec["domain"]), str(rec["title"]), tuple(sections))


def document_passages(doc: LegalDocument) -> list[Passage]:
    return [
        Passage(
            id=f"{doc.id}:{j}",
            doc_id=doc.id,
            domain=doc.domain,
            title=doc.title,
            header=HEADER_SEP.join(header),
            content=body.strip(),
        )
        for j, (header, body) in enumerate(doc.sections)
    ]


def ingest_documents(source: Iterable[str], max_tokens: int | None = None) -> Corpus:
    """Read JSON-lines document records into a flat passage corpus.

    Passages follow document order, then section order, then chunk order.
    When ``max_tokens`` is given every section is chunked to that budget.
    """
    seen: set[str] = set()
    passages: list[Passage] = []
    for idx, rec in read_jsonl(source):
        doc = _parse_document(rec, idx)
        if doc.id in seen:
            raise DataError(f"record {idx}: duplicate document id {doc.id!r}")
        seen.add(doc.id)
        for p in document_passages(doc):
            passages.extend(chunk_passage(p, max_tokens) if max_tokens else [p])
    return Corpus(passages)


def chunk_passage(p: Passage, max_tokens: int, overlap: int = 0) -> list[Passage]:
    """Split a passage into greedy token windows of at most ``max_tokens``.

    With ``overlap=0`` the chunk token sequences concatenate back to the
    original token sequence exactly.
    """
    check_positive_int(max_tokens, "max_tokens", MIN_CHUNK_TOKENS)
    if overlap < 0 or overlap >= max_tokens:
        raise ValueError(f"overlap must be in [0, max_tokens), got {overlap}")
    tokens = tokenize(p.content)
    if len(tokens) <= max_tokens:
        return [replace(p, token_count=len(tokens))]
    step = max_tokens - overlap
    chunks = []
    start = 0
    while True:
        window = tokens[start : start + max_tokens]
        chunks.append(
            replace(p, id=f"{p.id}#{len(chunks)}", content=" ".join(window), token_count=len(window))
        )
        if start + max_tokens >= len(tokens):
            break
        start += step
    return chunks


class PassageChunker(TransformerMixin, BaseEstimator):
    """Chunk every passage of a corpus to a token budget.

    Stateless; ``fit`` only validates parameters.
    """

    def __init__(self, max_tokens: int = 256, overlap: int = 0):
        self.max_tokens = max_tokens
        self.overlap = overlap

    def fit(self, X: Corpus | Sequence[Passage], y=None):
        check_positive_int(self.max_tokens, "max_tokens", MIN_CHUNK_TOKENS)
        if not 0 <= self.overlap < self.max_tokens:
            raise ValueError("overlap must be in [0, max_tokens)")
        return self

    def transform(self, X: Corpus | Sequence[Passage]) -> Corpus:
        out: list[Passage] = []
        for p in X:
            out.extend(chunk_passage(p, self.max_tokens, self.overlap))
        return Corpus(out)
