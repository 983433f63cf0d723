"""Ranked-retrieval metrics over TREC-style runs and qrels."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

from ._base import DataError, RunList, check_positive_int

log = logging.getLogger(__name__)

# query id -> {passage id: relevance grade}
Judgments = dict[str, dict[str, int]]

TABLE_COLUMNS = (("mrr", 10), ("map", 10), ("recall", 10), ("recall", 100), ("f2", 10))
_LABELS = {"mrr": "MRR", "map": "MAP", "recall": "R", "f2": "F2"}


def _relevant(judged: Mapping[str, int]) -> set[str]:
    return {pid for pid, g in judged.items() if g >= 1}


def _queries(run: RunList, judgments: Judgments, include_empty: bool, tally: Counter | None):
    """Yield (ranked passage ids, relevant set) for every evaluated query.

    Evaluated queries are the judged ones (with >= 1 relevant passage unless
    ``include_empty``); judged queries missing from the run get an empty
    ranking. Run queries without judgments are skipped and tallied.
    """
    tally = tally if tally is not None else Counter()
    for qid in run:
        if qid not in judgments:
            tally["unjudged"] += 1
    for qid in sorted(judgments):
        rel = _relevant(judgments[qid])
        if not rel and not include_empty:
            tally["no_relevant"] += 1
            continue
        if qid not in run:
            tally["missing_from_run"] += 1
        yield [pid for pid, _ in run.get(qid, [])], rel


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def mrr_at_k(run: RunList, judgments: Judgments, k: int = 10, include_empty: bool = False, tally: Counter | None = None) -> float:
    check_positive_int(k, "k")
    vals = []
    for ranked, rel in _queries(run, judgments, include_empty, tally):
        vals.append(next((1.0 / r for r, pid in enumerate(ranked[:k], 1) if pid in rel), 0.0))
    return _mean(vals)


def map_at_k(run: RunList, judgments: Judgments, k: int = 10, include_empty: bool = False, tally: Counter | None = None) -> float:
    """Average precision at cutoff k, normalized by min(|relevant|, k)."""
    check_positive_int(k, "k")
    vals = []
    for ranked, rel in _queries(run, judgments, include_empty, tally):
        if not rel:
            vals.append(0.0)
            continue
        hits, total = 0, 0.0
        for r, pid in enumerate(ranked[:k], 1):
            if pid in rel:
                hits += 1
                total += hits / r
        vals.append(total / min(len(rel), k))
    return _mean(vals)


def recall_at_k(run: RunList, judgments: Judgments, k: int = 10, include_empty: bool = False, tally: Counter | None = None) -> float:
    check_positive_int(k, "k")
    vals = []
    for ranked, rel in _queries(run, judgments, include_empty, tally):
        vals.append(len(rel.intersection(ranked[:k])) / len(rel) if rel else 0.0)
    return _mean(vals)


def f_beta_at_k(
    run: RunList, judgments: Judgments, k: int = 10, beta: float = 2.0, include_empty: bool = False, tally: Counter | None = None
) -> float:
    check_positive_int(k, "k")
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    vals = []
    for ranked, rel in _queries(run, judgments, include_empty, tally):
        hits = len(rel.intersection(ranked[:k]))
        p = hits / k
        r = hits / len(rel) if rel else 0.0
        vals.append((1 + b2) * p * r / (b2 * p + r) if p + r > 0 else 0.0)
    return _mean(vals)


def hit_rates(
    run: RunList, sources: Mapping[str, tuple[str, str]], passage_doc: Mapping[str, str], k: int = 10
) -> tuple[float, float]:
    """(passage hit rate %, document hit rate %) over all queries in ``sources``.

    ``sources`` maps query id to (source passage id, source doc id);
    ``passage_doc`` maps every retrievable passage id to its doc id.
    """
    check_positive_int(k, "k")
    if not sources:
        return 0.0, 0.0
    p_hits = d_hits = 0
    for qid, (src_pid, src_doc) in sources.items():
        if src_pid not in passage_doc:
            raise DataError(f"query {qid!r}: unknown source passage {src_pid!r}")
        top = [pid for pid, _ in run.get(qid, [])[:k]]
        for pid in top:
            if pid not in passage_doc:
                raise DataError(f"query {qid!r}: unknown passage {pid!r} in run")
        p_hits += src_pid in top
        d_hits += any(passage_doc[pid] == src_doc for pid in top)
    n = len(sources)
    return 100.0 * p_hits / n, 100.0 * d_hits / n


@dataclass
class EvalResult:
    metrics: dict[str, float]
    ks: list[int]
    warnings: dict[str, int] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"metrics": self.metrics, "ks": self.ks, "warnings": self.warnings}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def table(self) -> str:
        header = ["k", "MRR", "MAP", "Recall", "F2"]
        rows = [
            [str(k)] + [f"{self.metrics[f'{m}@{k}']:.4f}" for m in ("mrr", "map", "recall", "f2")] for k in self.ks
        ]
        return _align([header] + rows)


def evaluate_run(run: RunList, judgments: Judgments, ks: Sequence[int] = (10, 100), include_empty: bool = False) -> EvalResult:
    if not ks:
        raise ValueError("ks must be non-empty")
    ks = sorted({check_positive_int(k, "k") for k in ks})
    metrics: dict[str, float] = {}
    for k in ks:
        metrics[f"mrr@{k}"] = mrr_at_k(run, judgments, k, include_empty)
        metrics[f"map@{k}"] = map_at_k(run, judgments, k, include_empty)
        metrics[f"recall@{k}"] = recall_at_k(run, judgments, k, include_empty)
        metrics[f"f2@{k}"] = f_beta_at_k(run, judgments, k, 2.0, include_empty)
    tally: Counter = Counter()
    list(_queries(run, judgments, include_empty, tally))
    for kind, n in sorted(tally.items()):
        log.warning("%d queries %s", n, kind.replace("_", " "))
    return EvalResult(metrics, ks, dict(sorted(tally.items())))


def system_table(results: Mapping[str, Mapping[str, float]]) -> str:
    """Aligned comparison table: MRR@10, MAP@10, R@10, R@100, F2@10 per system."""
    header = ["System"] + [f"{_LABELS[m]}@{k}" for m, k in TABLE_COLUMNS]
    rows = [header]
    for name, metrics in results.items():
        rows.append([name] + [f"{metrics.get(f'{m}@{k}', float('nan')):.4f}" for m, k in TABLE_COLUMNS])
    return _align(rows)


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def load_qrels(lines: Iterable[str]) -> Judgments:
    """Parse ``query_id 0 passage_id grade`` lines (tab or space separated)."""
    out: Judgments = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"qrels line {lineno}: expected 4 fields, got {len(parts)}")
        qid, _, pid, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise DataError(f"qrels line {lineno}: grade {grade!r} is not an integer") from None
        if g < 0:
            raise DataError(f"qrels line {lineno}: negative grade")
        judged = out.setdefault(qid, {})
        if pid in judged:
            raise DataError(f"qrels line {lineno}: duplicate judgment for ({qid}, {pid})")
        judged[pid] = g
    return out


def write_qrels(judgments: Judgments, sink: IO[str]) -> None:
    for qid in sorted(judgments):
        for pid in sorted(judgments[qid]):
            sink.write(f"{qid}\t0\t{pid}\t{judgments[qid][pid]}\n")


def load_run(lines: Iterable[str]) -> RunList:
    """Parse ``query_id Q0 passage_id rank score tag`` lines.

    Each query's list must be in rank order with scores descending and ties
    by passage id ascending; duplicate passages are rejected.
    """
    rows: dict[str, list[tuple[int, str, float]]] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DataError(f"run line {lineno}: expected 6 fields, got {len(parts)}")
        qid, _, pid, rank, score, _tag = parts
        try:
            rows.setdefault(qid, []).append((int(rank), pid, float(score)))
        except ValueError:
            raise DataError(f"run line {lineno}: bad rank or score") from None
    run: RunList = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        seen: set[str] = set()
        for (_, pid, s), nxt in zip(entries, entries[1:] + [None]):
            if pid in seen:
                raise DataError(f"run: duplicate passage {pid!r} for query {qid!r}")
            seen.add(pid)
            if nxt is not None and (nxt[2] > s or (nxt[2] == s and nxt[1] < pid)):
                raise DataError(f"run: query {qid!r} is not ordered by score desc, id asc at {pid!r}")
        run[qid] = [(pid, s) for _, pid, s in entries]
    return run


def write_run(run: RunList, sink: IO[str], tag: str = "legalsynth") -> None:
    for qid in sorted(run):
        for rank, (pid, score) in enumerate(run[qid], 1):
            sink.write(f"{qid}\tQ0\t{pid}\t{rank}\t{float(score)!r}\t{tag}\n")
