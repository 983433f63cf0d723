"""Aspect-guided synthetic query generation over a text-completion backend."""

from __future__ import annotations

import abc
import hashlib
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Literal, Mapping, Sequence

import requests

from ._base import read_jsonl, require_fields, write_jsonl
from .corpus import Corpus, Passage, tokenize

log = logging.getLogger(__name__)

Mode = Literal["aspect_guided", "basic"]
MAX_ITEMS = 5
ENV_BASE_URL = "LEGALSYNTH_BASE_URL"
ENV_API_KEY = "LEGALSYNTH_API_KEY"
ENV_MODEL = "LEGALSYNTH_MODEL"

ASPECT_INSTRUCTION = (
    "First identify 1-5 different aspects covered in the passage. "
    "Then write exactly one question for each aspect."
)
BASIC_INSTRUCTION = "Write questions that a citizen might ask which this passage answers."
FORMAT_INSTRUCTION = (
    "Answer only with numbered pairs of lines in this format:\n"
    "1. Aspect: <short description>\n"
    "   Query: <question>\n"
    "Do not refer to the passage itself (avoid phrases such as \"quy định này\" or \"thông tư này\")."
)
CONTENT_BEGIN = "<<<PASSAGE"
CONTENT_END = "PASSAGE>>>"


class BackendError(RuntimeError):
    """Transport-level failure of a completion backend."""


@dataclass(frozen=True)
class AspectQuery:
    aspect: str
    query_text: str

    def __post_init__(self):
        if not self.aspect.strip() or not self.query_text.strip():
            raise ValueError("aspect and query_text must be non-empty")


@dataclass
class GenerationResult:
    passage_id: str
    items: list[AspectQuery]
    raw_response: str
    attempt_count: int


@dataclass
class Skip:
    passage_id: str
    reason: str
    attempt_count: int


@dataclass(frozen=True)
class SyntheticQuery:
    id: str
    passage_id: str
    aspect: str
    text: str
    source: str = "synthetic"

    def to_record(self) -> dict:
        return {"id": self.id, "passage_id": self.passage_id, "aspect": self.aspect, "text": self.text, "source": self.source}


@dataclass
class GenerationOutput:
    results: list[GenerationResult]
    skipped: list[Skip] = field(default_factory=list)

    def queries(self) -> list[SyntheticQuery]:
        return results_to_queries(self.results)


class CompletionBackend(abc.ABC):
    name: str = "backend"

    @abc.abstractmethod
    def complete(self, prompt: str) -> str:
        """Return the completion text for ``prompt``; raise BackendError on transport failure."""


def extract_content(prompt: str) -> str:
    """Recover the passage content block embedded by :func:`build_prompt`."""
    start = prompt.rfind(CONTENT_BEGIN)
    end = prompt.rfind(CONTENT_END)
    if start < 0 or end < start:
        return ""
    return prompt[start + len(CONTENT_BEGIN) : end].strip()


class MockBackend(CompletionBackend):
    """Deterministic offline backend.

    Output depends only on a hash of the prompt. Each query starts with the
    passage's lead token (article numbers in real legal text) followed by a
    contiguous window of content words, so recovery filtering has something
    real to find.
    """

    name = "mock"

    def __init__(self, n_aspects: int | None = None, window: int = 6, seed: int = 0):
        if n_aspects is not None and not 1 <= n_aspects <= MAX_ITEMS:
            raise ValueError("n_aspects must be in [1, 5]")
        self.n_aspects = n_aspects
        self.window = window
        self.seed = seed

    def complete(self, prompt: str) -> str:
        digest = hashlib.sha256(f"{self.seed}\x1f{prompt}".encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(digest[:8], "little"))
        words = tokenize(extract_content(prompt))
        if not words:
            return "I cannot help with that."
        n = self.n_aspects or rng.randint(1, MAX_ITEMS)
        lines = []
        for i in range(1, n + 1):
            w = min(self.window, len(words))
            start = rng.randrange(0, len(words) - w + 1)
            span = words[start : start + w]
            aspect = " ".join(span[: max(1, w // 2)])
            lines.append(f"{i}. Aspect: {aspect}")
            lines.append(f"   Query: {words[0]} {' '.join(span)} là gì?")
        return "\n".join(lines)


class HTTPCompletionBackend(CompletionBackend):
    """OpenAI-compatible ``/completions`` client.

    Base URL and API key come from the environment unless given explicitly.
    ``options`` are passed through verbatim (temperature, max_tokens, ...).
    """

    name = "http"

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        options: Mapping[str, Any] | None = None,
        session: requests.Session | None = None,
    ):
        self.base_url = (base_url or os.environ.get(ENV_BASE_URL, "")).rstrip("/")
        if not self.base_url:
            raise ValueError(f"no base URL given and {ENV_BASE_URL} is unset")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.timeout = timeout
        self.options = dict(options or {})
        self.session = session or requests.Session()

    def complete(self, prompt: str) -> str:
        payload = {"model": self.model, "prompt": prompt, **self.options}
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.session.post(f"{self.base_url}/completions", json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(str(exc)) from exc
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["text"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response body: {resp.text[:200]}") from exc


def build_prompt(p: Passage, mode: Mode = "aspect_guided", few_shot: Sequence[str] = ()) -> str:
    if not p.content.strip():
        raise ValueError(f"passage {p.id!r} has empty content")
    if mode == "aspect_guided":
        task = ASPECT_INSTRUCTION
    elif mode == "basic":
        task = BASIC_INSTRUCTION
    else:
        raise ValueError(f"unknown mode {mode!r}")
    parts = [
        "You are a Vietnamese legal expert writing search questions for a legal passage.",
        task,
        FORMAT_INSTRUCTION,
    ]
    for i, ex in enumerate(few_shot, 1):
        parts.append(f"Example {i}:\n{ex.strip()}")
    parts.append(f"Domain: {p.domain}\nTitle: {p.title}\nHeader: {p.header}")
    parts.append(f"Content:\n{CONTENT_BEGIN}\n{p.content}\n{CONTENT_END}")
    return "\n\n".join(parts) + "\n"


_LABEL = re.compile(r"^\s*(?:[-*]\s*)?(?:\(?\d+[.)]\s*)?(?:\*\*)?(aspect|query)(?:\s*\d+)?(?:\*\*)?\s*:\s*(.*)$", re.I)


def parse_generation(raw: str) -> list[AspectQuery]:
    """Extract ordered (aspect, query) pairs from labeled lines.

    An ``Aspect:`` line opens a pair, the next ``Query:`` line closes it. An
    aspect without a query (or replaced by a later aspect) is dropped.
    """
    items: list[AspectQuery] = []
    pending: str | None = None
    for line in raw.splitlines():
        m = _LABEL.match(line)
        if not m:
            continue
        label, text = m.group(1).lower(), m.group(2).strip().strip("*").strip()
        if label == "aspect":
            pending = text or None
        elif pending is not None and text:
            items.append(AspectQuery(pending, text))
            pending = None
    return items


def render_generation(items: Sequence[AspectQuery]) -> str:
    return "\n".join(f"{i}. Aspect: {it.aspect}\n   Query: {it.query_text}" for i, it in enumerate(items, 1))


def _attempt_passage(
    p: Passage, prompt: str, backend: CompletionBackend, max_retries: int, backoff: float
) -> GenerationResult | Skip:
    reason = ""
    for attempt in range(1, max_retries + 2):
        try:
            raw = backend.complete(prompt)
        except BackendError as exc:
            reason = f"backend error: {exc}"
            if attempt <= max_retries and backoff > 0:
                time.sleep(backoff * 2 ** (attempt - 1))
            continue
        items = parse_generation(raw)
        if items:
            if len(items) > MAX_ITEMS:
                log.warning("passage %s: truncating %d generated items to %d", p.id, len(items), MAX_ITEMS)
                items = items[:MAX_ITEMS]
            return GenerationResult(p.id, items, raw, attempt)
        reason = "no parseable Aspect/Query pair"
    return Skip(p.id, reason, max_retries + 1)


def generate_for_corpus(
    corpus: Corpus | Iterable[Passage],
    backend: CompletionBackend,
    mode: Mode = "aspect_guided",
    few_shot: Sequence[str] = (),
    max_retries: int = 2,
    max_workers: int = 1,
    backoff: float = 0.5,
) -> GenerationOutput:
    """Generate queries for every passage; results follow corpus order."""
    if max_retries < 0:
        raise ValueError("max_retries must be >= 0")
    passages = list(corpus)
    prompts = [build_prompt(p, mode, few_shot) for p in passages]

    def run(i: int):
        return _attempt_passage(passages[i], prompts[i], backend, max_retries, backoff)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(run, range(len(passages))))
    else:
        outcomes = [run(i) for i in range(len(passages))]
    out = GenerationOutput([], [])
    for o in outcomes:
        (out.results if isinstance(o, GenerationResult) else out.skipped).append(o)
    return out


def results_to_queries(results: Iterable[GenerationResult]) -> list[SyntheticQuery]:
    return [
        SyntheticQuery(f"{r.passage_id}/q{j}", r.passage_id, it.aspect, it.query_text)
        for r in results
        for j, it in enumerate(r.items)
    ]


def write_queries(queries: Iterable[SyntheticQuery], sink: IO[str], meta: Mapping | None = None) -> int:
    return write_jsonl((q.to_record() for q in queries), sink, meta=meta)


def read_queries(source: Iterable[str]) -> list[SyntheticQuery]:
    out = []
    for idx, rec in read_jsonl(source):
        require_fields(rec, ("id", "passage_id", "text"), idx)
        out.append(SyntheticQuery(rec["id"], rec["passage_id"], rec.get("aspect", ""), rec["text"], rec.get("source", "synthetic")))
    return out
