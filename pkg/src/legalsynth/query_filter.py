"""Self-reference and top-k recovery filters for synthetic queries."""

from __future__ import annotations

import json
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

from ._base import Retriever, check_positive_int
from .query_gen import SyntheticQuery

DEFAULT_BLACKLIST = ("quy định này", "thông tư này")
DEFAULT_RECOVERY_K = 40


def _fold(text: str) -> str:
    return unicodedata.normalize("NFC", text).casefold()


@dataclass
class FilterReport:
    input_count: int = 0
    kept: list[str] = field(default_factory=list)
    dropped_self_ref: list[tuple[str, str]] = field(default_factory=list)
    dropped_recovery: list[tuple[str, int | None]] = field(default_factory=list)
    kept_ranks: dict[str, int] = field(default_factory=dict)

    @property
    def pass_rate(self) -> float:
        return len(self.kept) / self.input_count if self.input_count else 0.0

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["dropped_self_ref"] = [list(x) for x in self.dropped_self_ref]
        rec["dropped_recovery"] = [list(x) for x in self.dropped_recovery]
        rec["pass_rate"] = self.pass_rate
        return rec

    def write(self, sink: IO[str]) -> None:
        sink.write(json.dumps(self.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def self_reference_filter(q: SyntheticQuery | str, blacklist: Sequence[str] = DEFAULT_BLACKLIST) -> tuple[bool, str | None]:
    """Return (keep, matched phrase). Matching is substring after NFC + casefold."""
    text = _fold(q.text if isinstance(q, SyntheticQuery) else q)
    for phrase in blacklist:
        if not phrase.strip():
            raise ValueError("blacklist phrases must be non-empty")
        if _fold(phrase) in text:
            return False, phrase
    return True, None


def source_rank(q: SyntheticQuery, retriever: Retriever, k: int) -> int | None:
    """1-based rank of the query's source passage within the top k, else None."""
    for rank, (pid, _) in enumerate(retriever.search(q.text, top_k=k), 1):
        if pid == q.passage_id:
            return rank
    return None


def recovery_filter(
    queries: Sequence[SyntheticQuery],
    retriever: Retriever,
    k: int = DEFAULT_RECOVERY_K,
    max_workers: int = 1,
    report: FilterReport | None = None,
) -> FilterReport:
    """Keep a query iff its source passage ranks <= k for that query."""
    check_positive_int(k, "k")
    for q in queries:
        if not retriever.has_passage(q.passage_id):
            raise KeyError(f"query {q.id!r} references unknown passage {q.passage_id!r}")
    if report is None:
        report = FilterReport(input_count=len(queries))

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            ranks = list(pool.map(lambda q: source_rank(q, retriever, k), queries))
    else:
        ranks = [source_rank(q, retriever, k) for q in queries]
    for q, rank in zip(queries, ranks):
        if rank is None:
            report.dropped_recovery.append((q.id, None))
        else:
            report.kept.append(q.id)
            report.kept_ranks[q.id] = rank
    return report


def filter_queries(
    queries: Sequence[SyntheticQuery],
    retriever: Retriever,
    k: int = DEFAULT_RECOVERY_K,
    blacklist: Sequence[str] = DEFAULT_BLACKLIST,
    max_workers: int = 1,
) -> tuple[list[SyntheticQuery], FilterReport]:
    """Run the self-reference filter, then the recovery filter on survivors."""
    report = FilterReport(input_count=len(queries))
    survivors = []
    for q in queries:
        keep, phrase = self_reference_filter(q, blacklist)
        if keep:
            survivors.append(q)
        else:
            report.dropped_self_ref.append((q.id, phrase))
    recovery_filter(survivors, retriever, k, max_workers=max_workers, report=report)
    kept = set(report.kept)
    return [q for q in queries if q.id in kept], report
