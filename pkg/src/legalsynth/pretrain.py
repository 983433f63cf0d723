"""Query-as-context pre-training pairs with encoder/decoder masking."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from ._base import DataError, derive_seed, read_jsonl, require_fields, write_jsonl
from .corpus import Corpus, Passage, tokenize
from .query_gen import SyntheticQuery

DEFAULT_ENCODER_RATIO = 0.30
DEFAULT_DECODER_RATIO = 0.45


@dataclass(frozen=True)
class PretrainPair:
    passage_id: str
    x_tokens: list[str]
    y_tokens: list[str]
    enc_mask: list[int]
    dec_mask: list[int]
    seed: int

    def to_record(self) -> dict:
        return asdict(self)


def mask_count(ratio: float, n: int) -> int:
    """floor(ratio * n), reading ``ratio`` as the decimal it was written as."""
    return math.floor(Fraction(repr(float(ratio))) * n)


def sample_pairs(
    corpus: Corpus, queries: Mapping[str, Sequence[SyntheticQuery]], seed: int = 0
) -> tuple[list[tuple[Passage, SyntheticQuery]], int]:
    """Pick one query per passage uniformly (seeded per passage).

    Returns the pairs in corpus order and the number of passages skipped
    for having no queries.
    """
    for pid in queries:
        if pid not in corpus:
            raise DataError(f"queries reference unknown passage {pid!r}")
    pairs, skipped = [], 0
    for p in corpus:
        cands = queries.get(p.id, ())
        if not cands:
            skipped += 1
            continue
        rng = np.random.default_rng(derive_seed(seed, "sample", p.id))
        pairs.append((p, cands[int(rng.integers(len(cands)))]))
    return pairs, skipped


def _mask(n: int, ratio: float, rng: np.random.Generator) -> list[int]:
    k = mask_count(ratio, n)
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def apply_masking(
    pair: tuple[Passage, SyntheticQuery],
    encoder_ratio: float = DEFAULT_ENCODER_RATIO,
    decoder_ratio: float = DEFAULT_DECODER_RATIO,
    seed: int = 0,
) -> PretrainPair:
    for name, r in (("encoder_ratio", encoder_ratio), ("decoder_ratio", decoder_ratio)):
        if not 0 < r < 1:
            raise ValueError(f"{name} must be in (0, 1), got {r}")
    passage, query = pair
    x, y = tokenize(passage.content), tokenize(query.text)
    if len(x) < 2 or len(y) < 2:
        raise DataError(f"passage {passage.id!r}: need at least 2 tokens on each side to mask")
    pair_seed = derive_seed(seed, "mask", passage.id)
    rng = np.random.default_rng(pair_seed)
    return PretrainPair(passage.id, x, y, _mask(len(x), encoder_ratio, rng), _mask(len(y), decoder_ratio, rng), pair_seed)


def build_pretrain_pairs(
    corpus: Corpus,
    queries: Iterable[SyntheticQuery],
    seed: int = 0,
    encoder_ratio: float = DEFAULT_ENCODER_RATIO,
    decoder_ratio: float = DEFAULT_DECODER_RATIO,
) -> tuple[list[PretrainPair], int]:
    by_passage: dict[str, list[SyntheticQuery]] = {}
    for q in queries:
        by_passage.setdefault(q.passage_id, []).append(q)
    pairs, skipped = sample_pairs(corpus, by_passage, seed)
    # pairs too short to mask (e.g. one-token chunk tails) are skipped, not fatal
    usable = [(p, q) for p, q in pairs if len(tokenize(p.content)) >= 2 and len(tokenize(q.text)) >= 2]
    skipped += len(pairs) - len(usable)
    return [apply_masking(pr, encoder_ratio, decoder_ratio, seed) for pr in usable], skipped


def serialize_pairs(pairs: Iterable[PretrainPair], sink: IO[str], meta: Mapping | None = None) -> int:
    try:
        return write_jsonl((p.to_record() for p in pairs), sink, meta=meta)
    except OSError as exc:
        raise DataError(f"failed writing pairs: {exc}") from exc


def read_pairs(source: Iterable[str]) -> list[PretrainPair]:
    out = []
    for idx, rec in read_jsonl(source):
        require_fields(rec, ("passage_id", "x_tokens", "y_tokens", "enc_mask", "dec_mask"), idx)
        out.append(
            PretrainPair(rec["passage_id"], rec["x_tokens"], rec["y_tokens"], rec["enc_mask"], rec["dec_mask"], rec.get("seed", 0))
        )
    return out
