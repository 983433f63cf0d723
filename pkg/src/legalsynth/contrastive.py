"""InfoNCE objective, hard-negative mining and a trainable desk-scale encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._base import DataError, Retriever, check_positive_int, derive_seed, read_jsonl, require_fields, write_jsonl
from .corpus import Corpus, Passage, tokenize
from .dense import EmbeddingProvider, pseudo_embed

DEFAULT_NEG_SINGLE = 7
DEFAULT_NEG_MULTI = 15


@dataclass(frozen=True)
class TrainingExample:
    query_id: str
    positive_id: str
    hard_negative_ids: tuple[str, ...]
    source: str = "synthetic"

    def __post_init__(self):
        negs = self.hard_negative_ids
        if self.positive_id in negs:
            raise ValueError(f"{self.query_id}: positive listed among negatives")
        if len(set(negs)) != len(negs):
            raise ValueError(f"{self.query_id}: duplicate hard negatives")

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "positive_id": self.positive_id,
            "negative_ids": list(self.hard_negative_ids),
            "source": self.source,
        }


def write_examples(examples: Iterable[TrainingExample], sink: IO[str], meta: Mapping | None = None) -> int:
    return write_jsonl((e.to_record() for e in examples), sink, meta=meta)


def read_examples(source: Iterable[str]) -> list[TrainingExample]:
    out = []
    for idx, rec in read_jsonl(source):
        require_fields(rec, ("query_id", "positive_id", "negative_ids"), idx)
        out.append(TrainingExample(rec["query_id"], rec["positive_id"], tuple(rec["negative_ids"]), rec.get("source", "synthetic")))
    return out


def mine_hard_negatives(
    queries: Mapping[str, str],
    positives: Mapping[str, Iterable[str]],
    retriever: Retriever,
    passage_ids: Sequence[str],
    n_neg: int = DEFAULT_NEG_SINGLE,
    pool_depth: int | None = None,
    seed: int = 0,
    source: str = "synthetic",
) -> list[TrainingExample]:
    """Top-ranked non-positive passages as negatives, one example per (query, positive).

    Queries whose pool yields fewer than ``n_neg`` candidates are padded with
    uniformly drawn non-positive passages (seeded per query).
    """
    check_positive_int(n_neg, "n_neg")
    pool_depth = pool_depth if pool_depth is not None else 4 * n_neg
    if pool_depth < n_neg:
        raise ValueError("pool_depth must be >= n_neg")
    universe = list(passage_ids)
    out = []
    for qid, text in queries.items():
        pos = list(dict.fromkeys(positives.get(qid, ())))
        if not pos:
            continue
        pos_set = set(pos)
        if len(universe) < n_neg + len(pos_set):
            raise DataError(f"corpus of {len(universe)} passages too small for {n_neg} negatives of query {qid!r}")
        negs = [pid for pid, _ in retriever.search(text, top_k=pool_depth) if pid not in pos_set][:n_neg]
        if len(negs) < n_neg:
            rng = np.random.default_rng(derive_seed(seed, qid))
            taken = pos_set.union(negs)
            pool = [pid for pid in universe if pid not in taken]
            pick = rng.choice(len(pool), size=n_neg - len(negs), replace=False)
            negs.extend(pool[i] for i in sorted(pick))
        out.extend(TrainingExample(qid, p, tuple(negs), source) for p in pos)
    return out


@dataclass
class InfoNCEBatch:
    queries: np.ndarray  # (B, d)
    positives: np.ndarray  # (B, d)
    negatives: np.ndarray  # (B, n_neg, d)
    temperature: float = 1.0
    use_in_batch: bool = False

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        q, p = np.asarray(self.queries), np.asarray(self.positives)
        n = np.asarray(self.negatives)
        if q.ndim != 2 or p.shape != q.shape:
            raise ValueError(f"query/positive shape mismatch: {q.shape} vs {p.shape}")
        if n.ndim != 3 or n.shape[0] != q.shape[0] or (n.shape[1] and n.shape[2] != q.shape[1]):
            raise ValueError(f"negatives must be (B, n_neg, d), got {n.shape}")
        for name, a in (("queries", q), ("positives", p), ("negatives", n)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contain non-finite values")


def _logits(batch: InfoNCEBatch):
    batch.validate()
    q = np.asarray(batch.queries, dtype=np.float64)
    p = np.asarray(batch.positives, dtype=np.float64)
    n = np.asarray(batch.negatives, dtype=np.float64).reshape(q.shape[0], -1, q.shape[1])
    hard = np.einsum("bd,bnd->bn", q, n)
    if batch.use_in_batch:
        # column i of row i is the positive; other columns are in-batch negatives
        sims = np.concatenate([q @ p.T, hard], axis=1)
        target = np.arange(q.shape[0])
    else:
        sims = np.concatenate([(q * p).sum(axis=1, keepdims=True), hard], axis=1)
        target = np.zeros(q.shape[0], dtype=np.int64)
    return q, p, n, sims / batch.temperature, target


def _softmax_terms(logits: np.ndarray, target: np.ndarray):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    rows = np.arange(len(target))
    losses = (np.log(z[:, 0]) + m[:, 0]) - logits[rows, target]
    return e / z, losses


def infonce_loss(batch: InfoNCEBatch) -> float:
    """Mean of -log softmax(positive) over dot-product similarities / temperature."""
    _, _, _, logits, target = _logits(batch)
    _, losses = _softmax_terms(logits, target)
    return float(losses.mean())


def infonce_grad(batch: InfoNCEBatch) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and its exact gradients w.r.t. queries, positives and negatives."""
    q, p, n, logits, target = _logits(batch)
    B = q.shape[0]
    probs, losses = _softmax_terms(logits, target)
    coef = probs.copy()
    coef[np.arange(B), target] -= 1.0
    coef /= batch.temperature * B
    if batch.use_in_batch:
        c_pos, c_neg = coef[:, :B], coef[:, B:]
        g_q = c_pos @ p + np.einsum("bn,bnd->bd", c_neg, n)
        g_p = c_pos.T @ q
    else:
        c_pos, c_neg = coef[:, 0], coef[:, 1:]
        g_q = c_pos[:, None] * p + np.einsum("bn,bnd->bd", c_neg, n)
        g_p = c_pos[:, None] * q
    g_n = c_neg[:, :, None] * q[:, None, :]
    return float(losses.mean()), g_q, g_p, g_n.reshape(np.asarray(batch.negatives).shape)


class ToyEncoder(TransformerMixin, BaseEstimator, EmbeddingProvider):
    """Bag-of-token-vectors encoder: mean of token vectors, L2-normalized.

    Token vectors start from the hashing pseudo-embedding of each token, so
    an untrained encoder reproduces :func:`pseudo_embed` exactly. Tokens
    outside the vocabulary keep that initial vector.
    """

    def __init__(
        self,
        dim: int = 32,
        seed: int = 0,
        steps: int = 500,
        batch_size: int = 32,
        learning_rate: float = 1.0,
        momentum: float = 0.0,
        temperature: float = 1.0,
        use_in_batch: bool = True,
    ):
        self.dim = dim
        self.seed = seed
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.temperature = temperature
        self.use_in_batch = use_in_batch

    def build_vocab(self, texts: Iterable[str]):
        vocab: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                vocab.setdefault(tok.casefold(), len(vocab))
        self.vocab_ = vocab
        self.vectors_ = np.stack([self._init_vector(t) for t in vocab]) if vocab else np.zeros((0, self.dim))
        return self

    def _init_vector(self, token: str) -> np.ndarray:
        return pseudo_embed(token, self.dim, self.seed)

    def token_ids(self, text: str) -> np.ndarray:
        check_is_fitted(self, "vocab_")
        return np.array([self.vocab_.get(t.casefold(), -1) for t in tokenize(text)], dtype=np.int64)

    def _encode_ids(self, ids: np.ndarray, text: str | None = None) -> tuple[np.ndarray, np.ndarray, float]:
        """Return (unit encoding, mean vector, norm of mean)."""
        if len(ids) == 0:
            z = np.zeros(self.dim)
            return z, z, 0.0
        rows = [self.vectors_[i] if i >= 0 else None for i in ids]
        if any(r is None for r in rows):
            toks = [t.casefold() for t in tokenize(text or "")]
            rows = [r if r is not None else self._init_vector(t) for r, t in zip(rows, toks)]
        u = np.mean(rows, axis=0)
        norm = float(np.linalg.norm(u))
        return (u / norm if norm > 0 else u), u, norm

    def encode(self, text: str) -> np.ndarray:
        return self._encode_ids(self.token_ids(text), text)[0]

    def transform(self, X: Sequence[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in X]) if len(X) else np.zeros((0, self.dim))

    def embed_query(self, text: str) -> np.ndarray:
        return self.encode(text)

    def embed_passage(self, passage: Passage) -> np.ndarray:
        return self.encode(passage.content)

    def fit(self, X: Sequence[TrainingExample], y=None, *, corpus: Corpus, queries: Mapping[str, str]):
        train_toy(corpus, X, queries, self, self.steps, self.batch_size, self.learning_rate)
        return self


def _backprop(encoder: ToyEncoder, cache: list, grads: np.ndarray, acc: np.ndarray) -> None:
    """Accumulate d(loss)/d(token vectors) given d(loss)/d(unit encodings)."""
    for (ids, h, norm), g in zip(cache, grads):
        if norm == 0 or len(ids) == 0:
            continue
        g_u = (g - h * (h @ g)) / norm
        known = ids[ids >= 0]
        np.add.at(acc, known, np.broadcast_to(g_u / len(ids), (len(known), len(g_u))))


def train_toy(
    corpus: Corpus,
    examples: Sequence[TrainingExample],
    queries: Mapping[str, str],
    encoder: ToyEncoder,
    steps: int = 500,
    batch_size: int = 32,
    learning_rate: float = 1.0,
) -> tuple[ToyEncoder, list[float]]:
    """SGD on the InfoNCE loss over seeded-shuffled batches.

    Returns the trained encoder and the per-step loss trace. Momentum,
    temperature and in-batch negatives come from the encoder's parameters.
    """
    check_positive_int(steps, "steps")
    check_positive_int(batch_size, "batch_size")
    if not examples:
        raise DataError("no training examples")
    if not hasattr(encoder, "vocab_"):
        encoder.build_vocab([p.content for p in corpus] + [queries[qid] for qid in sorted(queries)])
    content = {p.id: p.content for p in corpus}
    n_neg = {len(e.hard_negative_ids) for e in examples}
    if len(n_neg) != 1:
        raise DataError(f"examples have differing negative counts {sorted(n_neg)}")
    batch_size = min(batch_size, len(examples))
    rng = np.random.default_rng(encoder.seed)
    velocity = np.zeros_like(encoder.vectors_)
    order = rng.permutation(len(examples))
    cursor = 0
    trace = []
    for _ in range(steps):
        if cursor + batch_size > len(order):
            order = np.concatenate([order[cursor:], rng.permutation(len(examples))])
            cursor = 0
        batch = [examples[i] for i in order[cursor : cursor + batch_size]]
        cursor += batch_size

        def enc(text: str):
            ids = encoder.token_ids(text)
            h, _, norm = encoder._encode_ids(ids, text)
            return (ids, h, norm)

        q_cache = [enc(queries[e.query_id]) for e in batch]
        p_cache = [enc(content[e.positive_id]) for e in batch]
        n_cache = [[enc(content[n]) for n in e.hard_negative_ids] for e in batch]
        k = len(batch[0].hard_negative_ids)
        neg = np.array([[c[1] for c in row] for row in n_cache]).reshape(len(batch), k, encoder.dim)
        ib = InfoNCEBatch(
            np.array([c[1] for c in q_cache]),
            np.array([c[1] for c in p_cache]),
            neg,
            encoder.temperature,
            encoder.use_in_batch,
        )
        loss, g_q, g_p, g_n = infonce_grad(ib)
        trace.append(loss)
        acc = np.zeros_like(encoder.vectors_)
        _backprop(encoder, q_cache, g_q, acc)
        _backprop(encoder, p_cache, g_p, acc)
        _backprop(encoder, [c for row in n_cache for c in row], g_n.reshape(-1, encoder.dim), acc)
        velocity = encoder.momentum * velocity + acc
        encoder.vectors_ -= learning_rate * velocity
    return encoder, trace


def write_loss_trace(trace: Sequence[float], sink: IO[str]) -> None:
    sink.write("step,loss\n")
    for i, loss in enumerate(trace, 1):
        sink.write(f"{i},{loss!r}\n")
