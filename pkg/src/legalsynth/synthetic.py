"""Seeded synthetic corpora for demos and acceptance experiments."""

from __future__ import annotations

import numpy as np

from .corpus import Corpus, Passage
from .late_interaction import MultiVectorDoc

_ONSETS = ["b", "c", "d", "đ", "g", "h", "k", "l", "m", "n", "ph", "qu", "s", "t", "th", "tr", "v", "x", "ch", "nh", "ng", "kh"]
_RHYMES = ["a", "à", "á", "ai", "an", "ang", "anh", "ao", "ân", "ất", "âu", "e", "em", "ên", "ết", "i", "inh", "o", "oa",
           "ong", "ô", "ốc", "ông", "ơ", "ời", "u", "ung", "ư", "ức", "ương", "ước", "uyên", "ể", "ệ", "ị", "ỏ", "ụ"]
_FILLER = ["các", "của", "được", "theo", "và", "cơ", "quan", "có", "thẩm", "quyền", "trong", "trường", "hợp", "người",
           "tổ", "chức", "thực", "hiện", "việc", "đối", "với", "nhà", "nước", "quy", "định", "về", "phải", "khi"]
_DOMAINS = ["Tiền tệ - Ngân hàng", "Bộ máy hành chính", "Thuế - Phí - Lệ Phí", "Lao động - Tiền lương", "Đầu tư", "Giao thông - Vận tải"]
_KINDS = ["Thông tư", "Nghị định", "Luật", "Quyết định"]


def _syllables(rng: np.random.Generator, n: int) -> list[str]:
    seen: dict[str, None] = {}
    while len(seen) < n:
        seen.setdefault(_ONSETS[rng.integers(len(_ONSETS))] + _RHYMES[rng.integers(len(_RHYMES))]
                        + _RHYMES[rng.integers(len(_RHYMES))][:1], None)
    return list(seen)


def make_documents(n_docs: int = 40, seed: int = 0, sections: tuple[int, int] = (2, 5), body_tokens: tuple[int, int] = (30, 90)) -> list[dict]:
    """Legal-looking document records: each document has its own topic vocabulary."""
    rng = np.random.default_rng(seed)
    lexicon = _syllables(rng, 40 * n_docs)
    docs = []
    for i in range(n_docs):
        topic = lexicon[40 * i : 40 * (i + 1)]
        kind = _KINDS[rng.integers(len(_KINDS))]
        title = f"{kind} {i + 1}/{2010 + i % 14}/TT-{topic[0].upper()} quy định về {topic[1]} {topic[2]}"
        secs = []
        for j in range(int(rng.integers(sections[0], sections[1] + 1))):
            n = int(rng.integers(body_tokens[0], body_tokens[1] + 1))
            words = [topic[rng.integers(len(topic))] if rng.random() < 0.55 else _FILLER[rng.integers(len(_FILLER))]
                     for _ in range(n)]
            if rng.random() < 0.2:
                pos = int(rng.integers(1, n - 3))
                words[pos : pos + 3] = ["quy", "định", "này"]
            body = f"Điều {j + 1}. " + " ".join(words) + "."
            secs.append({"header": [f"Điều {j + 1}", f"Chương {['I', 'II', 'III'][j % 3]}", title], "body": body})
        docs.append({"id": f"d{i:04d}", "domain": _DOMAINS[i % len(_DOMAINS)], "title": title, "sections": secs})
    return docs


def make_separable_corpus(n_passages: int = 256, seed: int = 0, body_tokens: int = 24, filler_vocab: int = 40) -> Corpus:
    """Each passage opens with a unique key token; the rest is shared filler.

    Mock-generated queries always carry a passage's lead token, so every query
    shares exactly one distinctive token with its source passage.
    """
    rng = np.random.default_rng(seed)
    keys = _syllables(rng, n_passages + filler_vocab)
    filler, keys = keys[:filler_vocab], keys[filler_vocab:]
    passages = []
    for i, key in enumerate(keys):
        words = [filler[rng.integers(filler_vocab)] for _ in range(body_tokens - 1)]
        passages.append(Passage(f"t{i:04d}", f"doc{i // 4:03d}", "Tổng hợp", "Bộ dữ liệu thử", "Điều 1", " ".join([key] + words)))
    return Corpus(passages)


def make_multivector_dataset(
    n_docs: int = 1000,
    dim: int = 32,
    n_queries: int = 100,
    seed: int = 0,
    tokens: tuple[int, int] = (4, 12),
    n_topics: int = 64,
    noise: float = 0.35,
) -> tuple[list[MultiVectorDoc], list[np.ndarray], list[str]]:
    """Clustered unit token vectors plus noisy queries drawn from known documents.

    Returns (docs, query matrices, source passage id per query).
    """
    rng = np.random.default_rng(seed)
    topics = rng.standard_normal((n_topics, dim))

    def unit(m):
        return m / np.linalg.norm(m, axis=-1, keepdims=True)

    docs = []
    for i in range(n_docs):
        n = int(rng.integers(tokens[0], tokens[1] + 1))
        centers = topics[rng.integers(n_topics, size=n)]
        docs.append(MultiVectorDoc(f"p{i:05d}", unit(centers + noise * rng.standard_normal((n, dim)))))
    queries, sources = [], []
    for _ in range(n_queries):
        src = docs[int(rng.integers(n_docs))]
        m = min(len(src.vectors), int(rng.integers(2, 6)))
        rows = src.vectors[rng.choice(len(src.vectors), size=m, replace=False)]
        queries.append(unit(rows + 0.1 * rng.standard_normal(rows.shape)))
        sources.append(src.passage_id)
    return docs, queries, sources
